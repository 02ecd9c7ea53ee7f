import json
from pathlib import Path

import numpy as np
import pytest
import torch

from circuitgen.circuit import Spec, canonical_form
from circuitgen.cli import build_parser, main, read_kv_config
from circuitgen.dataset import sample_topology
from circuitgen.formulations import Style, TokenStream, parse, serialize
from circuitgen.model import CircuitTransformer, ModelConfig
from circuitgen.training import TrainConfig, save_checkpoint
from circuitgen.formulations import Task


def run_cli(capsys, *argv) -> tuple[int, list[dict], str]:
    code = main(list(argv))
    captured = capsys.readouterr()
    lines = [json.loads(line) for line in captured.out.splitlines() if line.startswith("{")]
    return code, lines, captured.err


@pytest.fixture(scope="module")
def circuit_file(tmp_path_factory):
    rng = np.random.default_rng(1)
    path = tmp_path_factory.mktemp("cli") / "buck.json"
    from conftest import make_net, make_vertex
    from circuitgen.circuit import Circuit

    buck = canonical_form(Circuit(
        vertices=tuple(make_vertex(n) for n in ("VIN", "VOUT", "GND", "Sa0", "Sb0", "L0")),
        nets=(
            make_net(("VIN", 0), ("Sa0", 0)),
            make_net(("Sa0", 1), ("Sb0", 0), ("L0", 0)),
            make_net(("Sb0", 1), ("GND", 0)),
            make_net(("L0", 1), ("VOUT", 0)),
        ),
        duty=0.5,
    ))
    path.write_text(json.dumps(buck.to_json_dict()))
    return path


class TestSimRun:
    def test_buck_json_line(self, capsys, circuit_file):
        code, lines, _ = run_cli(capsys, "sim", "run", "--circuit", str(circuit_file), "--duty", "0.5")
        assert code == 0
        assert lines[0]["status"] == "valid"
        assert abs(lines[0]["ratio"] - 0.5) < 0.05

    def test_config_override(self, capsys, circuit_file, tmp_path):
        cfg = tmp_path / "sim.cfg"
        cfg.write_text("r_load = 5.0\nsteps_per_period = 128  # coarser\n")
        code, lines, _ = run_cli(
            capsys, "sim", "run", "--circuit", str(circuit_file), "--duty", "0.5",
            "--config", str(cfg),
        )
        assert code == 0
        assert lines[0]["status"] == "valid"

    def test_bad_config_key_is_config_error(self, capsys, circuit_file, tmp_path):
        cfg = tmp_path / "sim.cfg"
        cfg.write_text("nonsense = 1\n")
        code, _, err = run_cli(
            capsys, "sim", "run", "--circuit", str(circuit_file), "--duty", "0.5",
            "--config", str(cfg),
        )
        assert code == 3
        assert "CONFIG" in err

    def test_usage_error_exit_2(self, circuit_file):
        with pytest.raises(SystemExit) as exc:
            main(["sim", "run", "--circuit", str(circuit_file)])  # missing --duty
        assert exc.value.code == 2


class TestKvConfig:
    def test_parse(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# comment\na = 1\n b=2 # trailing\n\n")
        assert read_kv_config(p) == {"a": "1", "b": "2"}


class TestDatasetCli:
    def test_gen_and_stats(self, capsys, tmp_path):
        out = tmp_path / "data"
        code, lines, _ = run_cli(
            capsys, "dataset", "gen", "--sizes", "3", "--count", "25",
            "--seed", "5", "--out", str(out),
        )
        assert code == 0
        assert (out / "train.jsonl").exists()
        assert (out / "resolved_config.json").exists()
        code, lines, _ = run_cli(capsys, "dataset", "stats", str(out / "train.jsonl"))
        assert code == 0
        assert lines[0]["n_records"] > 0


class TestFmtConvert:
    def test_pm_to_cf_to_pm_identity(self, capsys, tmp_path):
        rng = np.random.default_rng(11)
        for i in range(5):
            c = sample_topology(int(rng.integers(3, 6)), rng).with_duty(0.7)
            spec = Spec(round(float(rng.uniform(0, 1)), 6), round(float(rng.uniform(0, 1)), 6))
            src = tmp_path / f"pm{i}.txt"
            src.write_text(serialize(c, spec, Style.PM).to_text())
            assert main(["fmt", "convert", "--from", "PM", "--to", "CF", "--in", str(src)]) == 0
            cf_text = capsys.readouterr().out.strip()
            mid = tmp_path / f"cf{i}.txt"
            mid.write_text(cf_text)
            assert main(["fmt", "convert", "--from", "CF", "--to", "PM", "--in", str(mid)]) == 0
            pm_text = capsys.readouterr().out.strip()
            assert pm_text == serialize(c, spec, Style.PM).to_text()

    def test_fm_payloads_survive(self, capsys, tmp_path):
        rng = np.random.default_rng(13)
        c = sample_topology(3, rng).with_duty(0.1)
        spec = Spec(0.123456789, 0.87)
        src = tmp_path / "fm.txt"
        src.write_text(serialize(c, spec, Style.FM).to_text())
        assert main(["fmt", "convert", "--from", "FM", "--to", "FM", "--in", str(src)]) == 0
        out = capsys.readouterr().out.strip()
        circuit, got = parse(TokenStream.from_text(out), Style.FM)
        assert got == spec


class TestGenerateCommand:
    def test_untrained_checkpoint_graceful(self, capsys, tmp_path):
        cfg = ModelConfig(d_model=32, n_layers_enc=1, n_layers_dec=1, n_heads=2,
                          d_head=16, d_ff=64, dropout=0.0, seed=0)
        model = CircuitTransformer(cfg)
        ckpt = tmp_path / "ckpt.pt"
        save_checkpoint(ckpt, model, TrainConfig(style=Style.PM, task=Task.TOPOLOGY))
        code, lines, _ = run_cli(
            capsys, "generate", "--ratio", "0.5", "--eff", "0.9",
            "--ckpt", str(ckpt), "--max-new", "8", "--threads", "2",
        )
        assert code == 0
        assert lines[0]["valid"] is False


class TestParserShape:
    def test_all_subcommands_present(self):
        parser = build_parser()
        text = parser.format_help()
        for cmd in ("dataset", "sim", "fmt", "train", "finetune", "eval", "generate"):
            assert cmd in text
