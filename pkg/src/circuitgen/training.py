"""Training and finetuning loops with checkpointing.

AdamW with linear warmup into a cosine decay that reaches zero on the last
step. Augmentation, when enabled, applies a fresh random device-order
permutation to every record on every epoch. The best-test-loss checkpoint
is kept alongside the final one.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import vocab as V
from .circuit import permute_vertices
from .dataset import DatasetRecord
from .formulations import Style, Task, TrainingPair, build_training_pair
from .model import Batch, CircuitTransformer, ModelConfig, batch_loss, make_batch

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


@dataclass(frozen=True)
class TrainConfig:
    style: Style
    task: Task
    lr: float = 3e-4
    warmup_steps: int = 300
    weight_decay: float = 1e-5
    batch_size: int = 32
    epochs: int = 60
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("lr, batch_size must be positive; epochs non-negative")

    def to_json_dict(self) -> dict:
        d = dict(self.__dict__)
        d["style"] = self.style.value
        d["task"] = self.task.value
        return d

    @staticmethod
    def from_json_dict(obj: dict) -> "TrainConfig":
        obj = dict(obj)
        obj["style"] = Style(obj["style"])
        obj["task"] = Task(obj["task"])
        return TrainConfig(**obj)


@dataclass
class TrainResult:
    checkpoint_path: Path
    last_checkpoint_path: Path
    history: list[dict]
    best_epoch: int


def record_to_pair(
    record: DatasetRecord,
    style: Style,
    task: Task,
    rng: Optional[np.random.Generator] = None,
) -> TrainingPair:
    """Serialize one record, optionally under a fresh device permutation."""
    circuit = record.circuit
    if rng is not None:
        perm = list(rng.permutation(len(circuit.devices)))
        circuit = permute_vertices(circuit, perm)
    return build_training_pair(circuit, record.spec, style, task)


def _lr_lambda(step: int, warmup: int, total: int) -> float:
    if step < warmup:
        return (step + 1) / max(warmup, 1)
    if total <= warmup:
        return 0.0
    progress = (step - warmup) / (total - warmup)
    return 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


@torch.no_grad()
def dataset_loss(
    model: CircuitTransformer,
    records: Sequence[DatasetRecord],
    style: Style,
    task: Task,
    batch_size: int = 32,
) -> float:
    """Teacher-forced loss with the exact training tokenization, no augmentation."""
    if not records:
        return math.nan
    model.eval()
    total = 0.0
    count = 0
    for i in range(0, len(records), batch_size):
        chunk = records[i : i + batch_size]
        pairs = [record_to_pair(r, style, task) for r in chunk]
        loss = batch_loss(model, make_batch(pairs, model.cfg))
        total += float(loss) * len(chunk)
        count += len(chunk)
    return total / count


def train(
    tc: TrainConfig,
    train_records: Sequence[DatasetRecord],
    test_records: Sequence[DatasetRecord],
    model_cfg: ModelConfig,
    out_dir: str | Path,
    model: Optional[CircuitTransformer] = None,
    log: bool = True,
    stop_fn: Optional[Callable[[CircuitTransformer, int], bool]] = None,
) -> TrainResult:
    """Train (or continue training) and keep the best-test-loss checkpoint.

    `stop_fn(model, epoch)` may end the run early (e.g. once a memorization
    target is reached); the schedule still spans the configured epoch count.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(tc.seed)
    if model is None:
        model = CircuitTransformer(model_cfg)
    data_rng = np.random.default_rng(tc.seed)

    optimizer = torch.optim.AdamW(
        model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay
    )
    steps_per_epoch = max(1, math.ceil(len(train_records) / tc.batch_size))
    total_steps = steps_per_epoch * tc.epochs
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda s: _lr_lambda(s, tc.warmup_steps, total_steps)
    )

    history: list[dict] = []
    best = math.inf
    best_epoch = -1
    best_path = out_dir / "best.pt"
    last_path = out_dir / "last.pt"

    with open(out_dir / "train_config.json", "w") as fh:
        json.dump({"train": tc.to_json_dict(), "model": model_cfg.to_json_dict()}, fh, indent=2)

    if tc.epochs == 0 or not train_records:
        # Degenerate runs still produce a usable checkpoint.
        save_checkpoint(best_path, model, tc, history)
        save_checkpoint(last_path, model, tc, history)
        return TrainResult(best_path, last_path, history, 0)

    for epoch in range(tc.epochs):
        model.train()
        t0 = time.time()
        epoch_loss = 0.0
        seen = 0
        for idx in _epoch_batches(len(train_records), tc.batch_size, data_rng):
            pairs = [
                record_to_pair(
                    train_records[i], tc.style, tc.task, data_rng if tc.augment else None
                )
                for i in idx
            ]
            optimizer.zero_grad()
            loss = batch_loss(model, make_batch(pairs, model.cfg))
            if not torch.isfinite(loss):
                raise TrainingError(
                    "DIVERGED",
                    f"non-finite loss at epoch {epoch}, step {seen // tc.batch_size}: {loss}",
                )
            loss.backward()
            optimizer.step()
            scheduler.step()
            epoch_loss += loss.item() * len(idx)
            seen += len(idx)

        train_loss = epoch_loss / seen
        test_loss = dataset_loss(model, test_records, tc.style, tc.task, tc.batch_size)
        history.append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "test_loss": test_loss,
                "lr": scheduler.get_last_lr()[0],
                "seconds": round(time.time() - t0, 2),
            }
        )
        if log:
            print(
                f"epoch {epoch:3d}  train {train_loss:.4f}  test {test_loss:.4f}"
                f"  ({history[-1]['seconds']}s)",
                flush=True,
            )
        score = test_loss if not math.isnan(test_loss) else train_loss
        if score < best:
            best = score
            best_epoch = epoch
            save_checkpoint(best_path, model, tc, history)
        if stop_fn is not None and stop_fn(model, epoch):
            break

    save_checkpoint(last_path, model, tc, history)
    if best_epoch < 0:
        save_checkpoint(best_path, model, tc, history)
        best_epoch = tc.epochs - 1
    with open(out_dir / "history.json", "w") as fh:
        json.dump(history, fh, indent=2)
    return TrainResult(best_path, last_path, history, best_epoch)


def finetune(
    checkpoint_path: str | Path,
    train_records: Sequence[DatasetRecord],
    test_records: Sequence[DatasetRecord],
    tc: TrainConfig,
    out_dir: str | Path,
    expected_model_cfg: Optional[ModelConfig] = None,
) -> TrainResult:
    """Continue from saved parameters under a fresh optimizer and schedule."""
    model, meta = load_checkpoint(checkpoint_path)
    if meta["vocab_hash"] != V.vocabulary_hash():
        raise TrainingError("VOCAB_MISMATCH", "checkpoint was built with a different vocabulary")
    if expected_model_cfg is not None and model.cfg != expected_model_cfg:
        raise TrainingError("CONFIG_MISMATCH", "checkpoint model shape differs from expectation")
    return train(tc, train_records, test_records, model.cfg, out_dir, model=model)


def save_checkpoint(
    path: str | Path,
    model: CircuitTransformer,
    tc: Optional[TrainConfig] = None,
    history: Optional[list[dict]] = None,
):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_json_dict(),
        "train_config": tc.to_json_dict() if tc else None,
        "vocab_hash": V.vocabulary_hash(),
        "model_state": model.state_dict(),
        "torch_rng": torch.get_rng_state(),
        "history": history or [],
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[CircuitTransformer, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise TrainingError("CONFIG_MISMATCH", "unsupported checkpoint version")
    cfg = ModelConfig.from_json_dict(payload["model_config"])
    model = CircuitTransformer(cfg)
    model.load_state_dict(payload["model_state"])
    model.eval()
    meta = {
        "vocab_hash": payload["vocab_hash"],
        "train_config": payload.get("train_config"),
        "history": payload.get("history", []),
    }
    return model, meta
