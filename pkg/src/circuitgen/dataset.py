"""Dataset synthesis: topology sampling, duty sweep, labeling, dedup, splits.

Topologies are sampled per component count, deduplicated by canonical key
before simulation, swept over the five duty options, labeled by the
steady-state simulator, pruned to valid results, and split train/test by
hashing the canonical key so all duty variants of a topology land on the
same side.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .circuit import (
    DUTY_OPTIONS,
    Circuit,
    CircuitError,
    Net,
    Spec,
    Terminal,
    Vertex,
    VertexKind,
    canonical_form,
    canonical_key,
    permute_vertices,
    validate_structure,
)
from .simulator import SimConfig, steady_state

_DEVICE_KINDS = (VertexKind.SA, VertexKind.SB, VertexKind.C, VertexKind.L)
_PORT_NAMES = ("VIN", "VOUT", "GND")


@dataclass(frozen=True)
class DatasetRecord:
    spec: Spec
    circuit: Circuit  # canonical, duty set
    n_components: int
    split: str = "train"

    def to_json_dict(self) -> dict:
        return {
            "ratio": self.spec.ratio,
            "eff": self.spec.efficiency,
            "duty": self.circuit.duty,
            "circuit": self.circuit.to_json_dict(),
            "n": self.n_components,
        }

    @staticmethod
    def from_json_dict(obj: dict, split: str = "train") -> "DatasetRecord":
        circuit = Circuit.from_json_dict(obj["circuit"])
        return DatasetRecord(Spec(obj["ratio"], obj["eff"]), circuit, obj["n"], split)


@dataclass(frozen=True)
class GenConfig:
    targets_per_size: dict[int, int]
    duty_options: tuple[float, ...] = DUTY_OPTIONS
    seed: int = 0
    test_fraction: float = 0.1
    max_sample_attempts: int = 1000
    workers: int = 1

    def __post_init__(self):
        if any(n not in (3, 4, 5, 6) for n in self.targets_per_size):
            raise ValueError("component counts must be within 3..6")
        if any(c < 0 for c in self.targets_per_size.values()):
            raise ValueError("target counts must be non-negative")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must be in (0, 1)")


def sample_topology(n: int, rng: np.random.Generator) -> Circuit:
    """Draw one valid random topology with n devices (no duty assigned).

    Device kinds are uniform with at least one Sa and one Sb; terminals are
    randomly partitioned into nets of size >= 2 until the structure
    validates. The result is canonical.
    """
    if not 3 <= n <= 6:
        raise ValueError("component count must be within 3..6")
    for _ in range(1000):
        kinds = [_DEVICE_KINDS[rng.integers(len(_DEVICE_KINDS))] for _ in range(n)]
        if VertexKind.SA not in kinds or VertexKind.SB not in kinds:
            continue
        counters: dict[VertexKind, int] = {}
        devices = []
        for kind in kinds:
            devices.append(Vertex(kind, counters.get(kind, 0)))
            counters[kind] = counters.get(kind, 0) + 1
        vertices = tuple(Vertex.parse(p) for p in _PORT_NAMES) + tuple(devices)

        terminals = [Terminal(v, p) for v in vertices for p in range(v.kind.n_pins)]
        n_terms = len(terminals)
        n_nets = int(rng.integers(2, n_terms // 2 + 1))
        order = rng.permutation(n_terms)
        groups: list[list[Terminal]] = [[] for _ in range(n_nets)]
        # Seed every net with two terminals, then scatter the rest.
        for slot, idx in enumerate(order[: 2 * n_nets]):
            groups[slot % n_nets].append(terminals[idx])
        for idx in order[2 * n_nets:]:
            groups[int(rng.integers(n_nets))].append(terminals[idx])

        circuit = Circuit(vertices, tuple(Net(tuple(g)) for g in groups))
        if validate_structure(circuit).is_valid:
            return canonical_form(circuit)
    raise CircuitError("SAMPLING_EXHAUSTED", f"no valid topology after 1000 attempts (n={n})")


def augment(record: DatasetRecord, rng: np.random.Generator) -> DatasetRecord:
    """Randomly permute the device listing order; the hypergraph is unchanged."""
    n = len(record.circuit.devices)
    perm = list(rng.permutation(n))
    return DatasetRecord(
        record.spec,
        permute_vertices(record.circuit, perm),
        record.n_components,
        record.split,
    )


@dataclass
class DatasetStats:
    per_size: dict[int, dict[str, float]] = field(default_factory=dict)
    n_topologies: int = 0
    n_simulated: int = 0
    n_valid: int = 0
    n_train: int = 0
    n_test: int = 0
    ratio_hist: dict[str, int] = field(default_factory=dict)
    eff_hist: dict[str, int] = field(default_factory=dict)

    @property
    def validity_rate(self) -> float:
        return self.n_valid / self.n_simulated if self.n_simulated else 0.0

    def to_json_dict(self) -> dict:
        return {
            "per_size": self.per_size,
            "n_topologies": self.n_topologies,
            "n_simulated": self.n_simulated,
            "n_valid": self.n_valid,
            "validity_rate": self.validity_rate,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "ratio_hist": self.ratio_hist,
            "eff_hist": self.eff_hist,
        }


def assign_split(key: str, test_fraction: float) -> str:
    """Stable topology-level split: hash the canonical key."""
    digest = hashlib.sha256(key.encode()).digest()
    bucket = int.from_bytes(digest[:8], "big") / 2**64
    return "test" if bucket < test_fraction else "train"


def _simulate_topology(args):
    circuit_json, duty_options, cfg = args
    circuit = Circuit.from_json_dict(circuit_json)
    out = []
    for duty in duty_options:
        result = steady_state(circuit.with_duty(duty), duty, cfg)
        if result.is_valid:
            out.append((duty, result.ratio, result.efficiency))
    return out


def generate_dataset(
    gen_cfg: GenConfig,
    out_dir: str | Path,
    sim_cfg: SimConfig = SimConfig(),
) -> DatasetStats:
    """Run the full pipeline and write train.jsonl / test.jsonl / stats.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(gen_cfg.seed)

    topologies: dict[str, tuple[Circuit, int]] = {}
    stats = DatasetStats()
    for size in sorted(gen_cfg.targets_per_size):
        target = gen_cfg.targets_per_size[size]
        found_before = len(topologies)
        attempts = 0
        since_new = 0
        # Small sizes exhaust their design space; give up after a dry stretch.
        while len(topologies) - found_before < target and since_new < gen_cfg.max_sample_attempts:
            attempts += 1
            circuit = sample_topology(size, rng)
            key = canonical_key(circuit)
            if key not in topologies:
                topologies[key] = (circuit, size)
                since_new = 0
            else:
                since_new += 1
        stats.per_size[size] = {"topologies": len(topologies) - found_before, "attempts": attempts}

    stats.n_topologies = len(topologies)

    items = sorted(topologies.items())  # deterministic order by canonical key
    sim_args = [(c.to_json_dict(), gen_cfg.duty_options, sim_cfg) for _, (c, _) in items]
    if gen_cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=gen_cfg.workers) as pool:
            sim_out = list(pool.map(_simulate_topology, sim_args, chunksize=16))
    else:
        sim_out = [_simulate_topology(a) for a in sim_args]

    records: list[DatasetRecord] = []
    for (key, (circuit, size)), labeled in zip(items, sim_out):
        stats.n_simulated += len(gen_cfg.duty_options)
        split = assign_split(key, gen_cfg.test_fraction)
        for duty, ratio, eff in labeled:
            stats.n_valid += 1
            records.append(
                DatasetRecord(Spec(ratio, eff), circuit.with_duty(duty), size, split)
            )

    records.sort(key=lambda r: (canonical_key(r.circuit), r.circuit.duty))
    train = [r for r in records if r.split == "train"]
    test = [r for r in records if r.split == "test"]
    stats.n_train, stats.n_test = len(train), len(test)
    for rec in records:
        _bump_hist(stats.ratio_hist, rec.spec.ratio)
        _bump_hist(stats.eff_hist, rec.spec.efficiency)

    try:
        write_jsonl(out_dir / "train.jsonl", train)
        write_jsonl(out_dir / "test.jsonl", test)
        with open(out_dir / "stats.json", "w") as fh:
            json.dump(stats.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError:
        for name in ("train.jsonl", "test.jsonl", "stats.json"):
            path = out_dir / name
            if path.exists():
                path.unlink()
        raise
    return stats


def _bump_hist(hist: dict[str, int], value: float, lo: float = -2.0, hi: float = 2.0):
    clipped = min(max(value, lo), hi)
    edge = math.floor(clipped * 10) / 10
    label = f"{edge:+.1f}"
    hist[label] = hist.get(label, 0) + 1


def write_jsonl(path: str | Path, records: Iterable[DatasetRecord]):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json_dict(), sort_keys=False) + "\n")


def read_jsonl(path: str | Path, split: Optional[str] = None) -> list[DatasetRecord]:
    split = split or ("test" if "test" in Path(path).name else "train")
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(DatasetRecord.from_json_dict(json.loads(line), split))
    return records


def dataset_stats(path: str | Path) -> dict:
    """Summary counts for an existing JSONL file."""
    records = read_jsonl(path)
    per_size: dict[int, int] = {}
    ratio_hist: dict[str, int] = {}
    eff_hist: dict[str, int] = {}
    keys = set()
    for rec in records:
        per_size[rec.n_components] = per_size.get(rec.n_components, 0) + 1
        _bump_hist(ratio_hist, rec.spec.ratio)
        _bump_hist(eff_hist, rec.spec.efficiency)
        keys.add(canonical_key(rec.circuit))
    return {
        "n_records": len(records),
        "n_topologies": len(keys),
        "per_size": per_size,
        "ratio_hist": ratio_hist,
        "eff_hist": eff_hist,
    }
