"""Evaluation harness: generate, parse, re-simulate, and score.

A generated circuit counts as a success at tolerance t when its simulated
ratio AND efficiency are both within t of the requested spec. Generations
that fail to parse or simulate invalid are failures at every tolerance and
are excluded from the MSE denominators; the validity rate is reported
alongside.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch

from . import vocab as V
from .circuit import Spec, canonical_key
from .dataset import DatasetRecord
from .formulations import ParseError, Style, Task, parse_generation
from .model import CircuitTransformer, greedy_generate, make_batch
from .simulator import SimConfig, steady_state
from .training import load_checkpoint, record_to_pair

TOLERANCES = tuple(round(0.01 * k, 2) for k in range(1, 11))

# (target spec, simulated spec or None when the generation was unusable)
EvalPair = tuple[Spec, Optional[Spec]]


class EvaluationError(ValueError):
    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


@dataclass
class EvalReport:
    success_rate: dict[float, float]
    mse_voltage: Optional[float]
    mse_eff: Optional[float]
    validity_rate: float
    n: int
    failure_counts: dict[str, int] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "success_rate": {f"{t:.2f}": v for t, v in self.success_rate.items()},
            "mse_voltage": self.mse_voltage,
            "mse_eff": self.mse_eff,
            "validity_rate": self.validity_rate,
            "n": self.n,
            "failure_counts": self.failure_counts,
        }

    def write(self, path: str | Path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def success_rate(pairs: Sequence[EvalPair], t: float) -> float:
    """Fraction of pairs whose simulated ratio and efficiency both land
    within t of the target; unusable generations always count as misses."""
    if not pairs:
        raise EvaluationError("EMPTY_SET")
    slack = t + 1e-12  # keep the boundary inclusive under float noise
    hits = 0
    for target, sim in pairs:
        if sim is None:
            continue
        if abs(sim.ratio - target.ratio) <= slack and abs(sim.efficiency - target.efficiency) <= slack:
            hits += 1
    return hits / len(pairs)


def mse(pairs: Sequence[EvalPair]) -> tuple[Optional[float], Optional[float]]:
    """Mean squared error over the valid generations only; None when empty."""
    if not pairs:
        raise EvaluationError("EMPTY_SET")
    valid = [(t, s) for t, s in pairs if s is not None]
    if not valid:
        return None, None
    mv = sum((s.ratio - t.ratio) ** 2 for t, s in valid) / len(valid)
    me = sum((s.efficiency - t.efficiency) ** 2 for t, s in valid) / len(valid)
    return mv, me


def build_report(pairs: Sequence[EvalPair], failure_counts: Optional[dict[str, int]] = None) -> EvalReport:
    if not pairs:
        raise EvaluationError("EMPTY_SET")
    mv, me = mse(pairs)
    return EvalReport(
        success_rate={t: success_rate(pairs, t) for t in TOLERANCES},
        mse_voltage=mv,
        mse_eff=me,
        validity_rate=sum(1 for _, s in pairs if s is not None) / len(pairs),
        n=len(pairs),
        failure_counts=failure_counts or {},
    )


def _generation_budget(records: Sequence[DatasetRecord], style: Style, task: Task) -> int:
    """Decode-step cap: the longest reference target plus a little slack."""
    longest = max(len(record_to_pair(r, style, task).decoder_target) for r in records)
    return longest + 8


def evaluate_model(
    model: CircuitTransformer,
    records: Sequence[DatasetRecord],
    style: Style,
    task: Task,
    sim_cfg: SimConfig = SimConfig(),
    batch_size: int = 32,
    max_new: Optional[int] = None,
    train_keys: Optional[set[str]] = None,
) -> EvalReport:
    """Greedy-generate a circuit for each test spec and score by re-simulation."""
    if not records:
        raise EvaluationError("EMPTY_SET")
    if train_keys is not None:
        overlap = {canonical_key(r.circuit) for r in records} & train_keys
        if overlap:
            raise EvaluationError(
                "SPLIT_LEAKAGE", f"{len(overlap)} test topologies appear in the train split"
            )
    if max_new is None:
        max_new = _generation_budget(records, style, task)

    pairs: list[EvalPair] = []
    failures: dict[str, int] = {}
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        queries = [record_to_pair(r, style, task).encoder_input for r in chunk]
        generations = greedy_generate(model, queries, max_new=max_new)
        for record, query, gen in zip(chunk, queries, generations):
            sim_spec = None
            try:
                circuit, _ = parse_generation(query, gen, style, task)
                result = steady_state(circuit, circuit.duty, sim_cfg)
                if result.is_valid:
                    sim_spec = Spec(result.ratio, result.efficiency)
                else:
                    failures[result.reason or "INVALID"] = failures.get(result.reason or "INVALID", 0) + 1
            except ParseError as exc:
                failures[exc.code] = failures.get(exc.code, 0) + 1
            pairs.append((record.spec, sim_spec))
    return build_report(pairs, failures)


def evaluate_checkpoint(
    checkpoint_path: str | Path,
    records: Sequence[DatasetRecord],
    sim_cfg: SimConfig = SimConfig(),
    train_records: Optional[Sequence[DatasetRecord]] = None,
    batch_size: int = 32,
) -> EvalReport:
    """Load a checkpoint and evaluate it with its own recorded style/task."""
    model, meta = load_checkpoint(checkpoint_path)
    tc = meta.get("train_config")
    if not tc:
        raise EvaluationError("CONFIG_MISMATCH", "checkpoint lacks a train config")
    train_keys = (
        {canonical_key(r.circuit) for r in train_records} if train_records is not None else None
    )
    return evaluate_model(
        model,
        records,
        Style(tc["style"]),
        Task(tc["task"]),
        sim_cfg,
        batch_size=batch_size,
        train_keys=train_keys,
    )


def exact_match_fraction(
    model: CircuitTransformer,
    records: Sequence[DatasetRecord],
    style: Style,
    task: Task,
    batch_size: int = 32,
    max_new: Optional[int] = None,
) -> float:
    """Fraction of records whose greedy generation reproduces the target exactly."""
    if not records:
        raise EvaluationError("EMPTY_SET")
    if max_new is None:
        max_new = _generation_budget(records, style, task)
    hits = 0
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        pairs = [record_to_pair(r, style, task) for r in chunk]
        generations = greedy_generate(model, [p.encoder_input for p in pairs], max_new=max_new)
        hits += sum(1 for p, g in zip(pairs, generations) if g == p.decoder_target)
    return hits / len(records)


@torch.no_grad()
def forced_match_fraction(
    model: CircuitTransformer,
    records: Sequence[DatasetRecord],
    style: Style,
    task: Task,
    batch_size: int = 32,
) -> float:
    """Teacher-forced full-sequence argmax match.

    Equivalent to greedy exact match: if every position's argmax equals the
    target given the forced prefix, greedy decoding reproduces the sequence,
    and conversely. One forward pass per batch instead of one per token.
    """
    if not records:
        raise EvaluationError("EMPTY_SET")
    pad_id = V.token_ids()[V.PAD]
    model.eval()
    hits = 0
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        pairs = [record_to_pair(r, style, task) for r in chunk]
        batch = make_batch(pairs, model.cfg)
        logits = model(
            batch.enc_ids, batch.enc_payloads, batch.enc_pad_mask, batch.dec_in, batch.dec_pad_mask
        )
        pred = logits.argmax(dim=-1)
        real = batch.targets != pad_id
        seq_ok = ((pred == batch.targets) | ~real).all(dim=1)
        hits += int(seq_ok.sum())
    return hits / len(records)
