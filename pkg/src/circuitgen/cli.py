"""Single command-line entry point for the whole pipeline.

Subcommands: dataset gen|stats, sim run, fmt convert, train, finetune,
eval, generate. Machine-readable results go to stdout as JSON lines;
human-readable progress goes to stderr. Exit codes: 0 success, 1 runtime
failure, 2 usage, 3 configuration.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import torch

from .circuit import Circuit, Spec, canonical_form, canonical_key, validate_structure
from .dataset import (
    DatasetRecord,
    GenConfig,
    dataset_stats,
    generate_dataset,
    read_jsonl,
)
from .evaluation import evaluate_checkpoint
from .formulations import Style, Task, TokenStream, parse, parse_generation, serialize
from .model import CircuitTransformer, ModelConfig, greedy_generate
from .simulator import SimConfig, steady_state
from .training import TrainConfig, finetune, load_checkpoint, train


class ConfigError(ValueError):
    pass


MODEL_PROFILES = {
    "base": dict(d_model=256, n_layers_enc=4, n_layers_dec=4, n_heads=8, d_head=32, d_ff=1024),
    "small": dict(d_model=128, n_layers_enc=2, n_layers_dec=2, n_heads=4, d_head=32, d_ff=512),
}


def read_kv_config(path: str | Path) -> dict[str, str]:
    """Flat `key = value` file; '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def build_sim_config(path: str | None) -> SimConfig:
    cfg = SimConfig()
    if not path:
        return cfg
    overrides = read_kv_config(path)
    kwargs = {}
    for key, value in overrides.items():
        if key not in cfg.__dict__:
            raise ConfigError(f"unknown simulator option {key!r}")
        kwargs[key] = int(value) if key == "steps_per_period" else float(value)
    return cfg.replace(**kwargs)


def echo_config(out_dir: Path, payload: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _emit(obj: dict):
    print(json.dumps(obj), flush=True)


def _log(msg: str):
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def cmd_dataset_gen(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    per_size = args.count // len(sizes)
    targets = {s: per_size for s in sizes}
    targets[sizes[-1]] += args.count - per_size * len(sizes)
    gen_cfg = GenConfig(
        targets_per_size=targets,
        seed=args.seed,
        test_fraction=args.test_fraction,
        workers=args.workers,
    )
    sim_cfg = build_sim_config(args.config)
    out_dir = Path(args.out)
    echo_config(out_dir, {
        "command": "dataset gen",
        "targets_per_size": targets,
        "seed": args.seed,
        "test_fraction": args.test_fraction,
        "workers": args.workers,
        "sim": sim_cfg.__dict__,
    })
    stats = generate_dataset(gen_cfg, out_dir, sim_cfg)
    _log(f"wrote {stats.n_train} train / {stats.n_test} test records to {out_dir}")
    _emit(stats.to_json_dict())
    return 0


def cmd_dataset_stats(args) -> int:
    _emit(dataset_stats(args.path))
    return 0


def cmd_sim_run(args) -> int:
    with open(args.circuit) as fh:
        circuit = Circuit.from_json_dict(json.load(fh))
    sim_cfg = build_sim_config(args.config)
    report = validate_structure(circuit)
    if not report.is_valid:
        _emit({"status": "invalid", "reason": "STRUCTURE", "detail": list(report.reasons)})
        return 0
    result = steady_state(circuit, args.duty, sim_cfg)
    _emit(result.to_json_dict())
    return 0


def cmd_fmt_convert(args) -> int:
    text = Path(args.infile).read_text() if args.infile != "-" else sys.stdin.read()
    stream = TokenStream.from_text(text)
    circuit, spec = parse(stream, Style(args.src))
    out = serialize(circuit, spec, Style(args.dst))
    print(out.to_text())
    return 0


def _model_config(args) -> ModelConfig:
    profile = dict(MODEL_PROFILES[args.model_size])
    return ModelConfig(
        **profile,
        dropout=args.dropout,
        float_input=Style(args.style) == Style.FM,
        seed=args.seed,
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        style=Style(args.style),
        task=Task(args.task),
        lr=args.lr,
        warmup_steps=args.warmup,
        weight_decay=args.weight_decay,
        batch_size=args.batch,
        epochs=args.epochs,
        augment=args.augment,
        seed=args.seed,
    )


def _load_split(data_dir: str) -> tuple[list[DatasetRecord], list[DatasetRecord]]:
    data = Path(data_dir)
    train_recs = read_jsonl(data / "train.jsonl", "train")
    test_path = data / "test.jsonl"
    test_recs = read_jsonl(test_path, "test") if test_path.exists() else []
    return train_recs, test_recs


def cmd_train(args) -> int:
    torch.set_num_threads(args.threads)
    train_recs, test_recs = _load_split(args.data)
    tc = _train_config(args)
    mc = _model_config(args)
    out_dir = Path(args.out)
    echo_config(out_dir, {"command": "train", "train": tc.to_json_dict(), "model": mc.to_json_dict()})
    _log(f"training {args.style}/{args.task} on {len(train_recs)} records")
    result = train(tc, train_recs, test_recs, mc, out_dir)
    _emit({
        "checkpoint": str(result.checkpoint_path),
        "best_epoch": result.best_epoch,
        "final_train_loss": result.history[-1]["train_loss"] if result.history else None,
        "final_test_loss": result.history[-1]["test_loss"] if result.history else None,
    })
    return 0


def cmd_finetune(args) -> int:
    torch.set_num_threads(args.threads)
    train_recs, test_recs = _load_split(args.data)
    tc = _train_config(args)
    out_dir = Path(args.out)
    echo_config(out_dir, {"command": "finetune", "train": tc.to_json_dict(), "ckpt": args.ckpt})
    result = finetune(args.ckpt, train_recs, test_recs, tc, out_dir)
    _emit({"checkpoint": str(result.checkpoint_path), "best_epoch": result.best_epoch})
    return 0


def cmd_eval(args) -> int:
    torch.set_num_threads(args.threads)
    records = read_jsonl(args.data, "test")
    train_records = read_jsonl(args.train_data, "train") if args.train_data else None
    sim_cfg = build_sim_config(args.config)
    report = evaluate_checkpoint(args.ckpt, records, sim_cfg, train_records)
    if args.report:
        report.write(args.report)
        _log(f"wrote report to {args.report}")
    _emit(report.to_json_dict())
    return 0


def cmd_generate(args) -> int:
    torch.set_num_threads(args.threads)
    model, meta = load_checkpoint(args.ckpt)
    tc = meta.get("train_config") or {}
    style = Style(args.style or tc.get("style", "PM"))
    sim_cfg = build_sim_config(args.config)

    # One-shot topology generation: build the spec-only query, decode, parse,
    # and re-simulate the result.
    from .formulations import build_training_pair

    template = _template_circuit()
    query = build_training_pair(
        template.with_duty(0.5), Spec(args.ratio, args.eff), style, Task.TOPOLOGY
    ).encoder_input
    generation = greedy_generate(model, [query], max_new=args.max_new)[0]
    out: dict = {"ratio_target": args.ratio, "eff_target": args.eff, "style": style.value}
    try:
        circuit, _ = parse_generation(query, generation, style, Task.TOPOLOGY)
        result = steady_state(circuit, circuit.duty, sim_cfg)
        out.update({
            "valid": result.is_valid,
            "circuit": circuit.to_json_dict(),
            "simulated": result.to_json_dict(),
        })
    except Exception as exc:  # malformed generations are an expected outcome
        out.update({"valid": False, "error": str(exc), "tokens": generation.to_text()})
    _emit(out)
    return 0


def _template_circuit() -> Circuit:
    """Any canonical circuit works as a query scaffold: only its spec prefix
    survives masking in the topology task."""
    from .circuit import Net, Terminal, Vertex

    def v(name):
        return Vertex.parse(name)

    return canonical_form(Circuit(
        vertices=tuple(v(n) for n in ("VIN", "VOUT", "GND", "Sa0", "Sb0", "L0")),
        nets=(
            Net((Terminal(v("VIN"), 0), Terminal(v("Sa0"), 0))),
            Net((Terminal(v("Sa0"), 1), Terminal(v("Sb0"), 0), Terminal(v("L0"), 0))),
            Net((Terminal(v("Sb0"), 1), Terminal(v("GND"), 0))),
            Net((Terminal(v("L0"), 1), Terminal(v("VOUT"), 0))),
        ),
        duty=0.5,
    ))


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--style", required=True, choices=[s.value for s in Style])
    p.add_argument("--task", default="edge_gen", choices=[t.value for t in Task])
    p.add_argument("--data", required=True, help="directory with train.jsonl/test.jsonl")
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--warmup", type=int, default=300)
    p.add_argument("--weight-decay", type=float, default=1e-5, dest="weight_decay")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--model-size", default="small", choices=sorted(MODEL_PROFILES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="circuitgen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_ds = sub.add_parser("dataset", help="dataset generation and statistics")
    ds_sub = p_ds.add_subparsers(dest="subcommand", required=True)
    p_gen = ds_sub.add_parser("gen")
    p_gen.add_argument("--sizes", default="3,4", help="comma-separated component counts")
    p_gen.add_argument("--count", type=int, default=2000, help="total target topologies")
    p_gen.add_argument("--seed", type=int, default=7)
    p_gen.add_argument("--test-fraction", type=float, default=0.1, dest="test_fraction")
    p_gen.add_argument("--workers", type=int, default=1)
    p_gen.add_argument("--config", default=None, help="simulator key=value overrides")
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(fn=cmd_dataset_gen)
    p_stats = ds_sub.add_parser("stats")
    p_stats.add_argument("path")
    p_stats.set_defaults(fn=cmd_dataset_stats)

    p_sim = sub.add_parser("sim", help="steady-state simulation")
    sim_sub = p_sim.add_subparsers(dest="subcommand", required=True)
    p_run = sim_sub.add_parser("run")
    p_run.add_argument("--circuit", required=True, help="circuit JSON file")
    p_run.add_argument("--duty", type=float, required=True)
    p_run.add_argument("--config", default=None)
    p_run.set_defaults(fn=cmd_sim_run)

    p_fmt = sub.add_parser("fmt", help="formulation conversion")
    fmt_sub = p_fmt.add_subparsers(dest="subcommand", required=True)
    p_conv = fmt_sub.add_parser("convert")
    p_conv.add_argument("--from", dest="src", required=True, choices=[s.value for s in Style])
    p_conv.add_argument("--to", dest="dst", required=True, choices=[s.value for s in Style])
    p_conv.add_argument("--in", dest="infile", default="-", help="token text file or - for stdin")
    p_conv.set_defaults(fn=cmd_fmt_convert)

    p_train = sub.add_parser("train", help="train a model from scratch")
    _add_train_flags(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_ft = sub.add_parser("finetune", help="continue training from a checkpoint")
    _add_train_flags(p_ft)
    p_ft.add_argument("--ckpt", required=True)
    p_ft.set_defaults(fn=cmd_finetune)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a test set")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--data", required=True, help="test JSONL file")
    p_eval.add_argument("--train-data", default=None, dest="train_data",
                        help="train JSONL for the split-leakage audit")
    p_eval.add_argument("--report", default=None)
    p_eval.add_argument("--config", default=None)
    p_eval.add_argument("--threads", type=int, default=0)
    p_eval.set_defaults(fn=cmd_eval)

    p_g = sub.add_parser("generate", help="one-shot topology generation from a spec")
    p_g.add_argument("--ratio", type=float, required=True)
    p_g.add_argument("--eff", type=float, required=True)
    p_g.add_argument("--style", default=None, choices=[s.value for s in Style])
    p_g.add_argument("--ckpt", required=True)
    p_g.add_argument("--max-new", type=int, default=256, dest="max_new")
    p_g.add_argument("--config", default=None)
    p_g.add_argument("--threads", type=int, default=0)
    p_g.set_defaults(fn=cmd_generate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", 0):
        torch.set_num_threads(args.threads)
    elif hasattr(args, "threads"):
        torch.set_num_threads(os.cpu_count() or 1)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(json.dumps({"error": "CONFIG", "detail": str(exc)}), file=sys.stderr)
        return 3
    except Exception as exc:
        print(json.dumps({"error": "RUNTIME", "detail": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
