import json
import math
from pathlib import Path

import numpy as np
import pytest
import torch

from circuitgen.circuit import Spec, canonical_key
from circuitgen.dataset import DatasetRecord, GenConfig, generate_dataset, read_jsonl, sample_topology
from circuitgen.evaluation import (
    EvaluationError,
    build_report,
    evaluate_model,
    exact_match_fraction,
    forced_match_fraction,
    mse,
    success_rate,
)
from circuitgen.formulations import Style, Task
from circuitgen.model import CircuitTransformer, ModelConfig
from circuitgen.training import (
    TrainConfig,
    TrainingError,
    dataset_loss,
    finetune,
    load_checkpoint,
    record_to_pair,
    save_checkpoint,
    train,
)

torch.set_num_threads(2)

TINY = ModelConfig(
    d_model=32, n_layers_enc=1, n_layers_dec=1, n_heads=2, d_head=16,
    d_ff=64, dropout=0.0, seed=7,
)


def tiny_records(n=24, seed=0, size=3):
    rng = np.random.default_rng(seed)
    records = []
    while len(records) < n:
        c = sample_topology(size, rng).with_duty(float(rng.choice([0.1, 0.3, 0.5, 0.7, 0.9])))
        spec = Spec(round(float(rng.uniform(0, 1)), 6), round(float(rng.uniform(0.3, 1)), 6))
        records.append(DatasetRecord(spec, c, size))
    return records


class TestSuccessRateAndMse:
    def test_paper_tolerance_example(self):
        pairs = [(Spec(0.9, 0.8), Spec(0.85, 0.78))]
        for t in (0.05, 0.06, 0.1):
            assert success_rate(pairs, t) == 1.0
        for t in (0.01, 0.04):
            assert success_rate(pairs, t) == 0.0

    def test_both_conditions_required(self):
        pairs = [(Spec(0.9, 0.8), Spec(0.9, 0.5))]
        assert success_rate(pairs, 0.1) == 0.0

    def test_mse_arithmetic(self):
        pairs = [(Spec(0.5, 0.9), Spec(0.6, 0.9)), (Spec(0.8, 0.9), Spec(0.8, 0.9))]
        mv, me = mse(pairs)
        assert mv == pytest.approx(0.005)
        assert me == pytest.approx(0.0)

    def test_failures_hit_rate_not_mse(self):
        pairs = [(Spec(0.5, 0.9), None), (Spec(0.5, 0.9), Spec(0.5, 0.9))]
        assert success_rate(pairs, 0.1) == 0.5
        mv, _ = mse(pairs)
        assert mv == 0.0
        report = build_report(pairs)
        assert report.validity_rate == 0.5

    def test_all_failed_mse_undefined(self):
        pairs = [(Spec(0.5, 0.9), None)]
        assert mse(pairs) == (None, None)
        report = build_report(pairs)
        assert report.mse_voltage is None

    def test_empty_set(self):
        with pytest.raises(EvaluationError) as err:
            success_rate([], 0.1)
        assert err.value.code == "EMPTY_SET"
        with pytest.raises(EvaluationError):
            mse([])

    def test_monotone_in_tolerance(self):
        rng = np.random.default_rng(2)
        pairs = []
        for _ in range(50):
            target = Spec(float(rng.uniform(0, 1)), float(rng.uniform(0, 1)))
            sim = None
            if rng.random() < 0.8:
                sim = Spec(target.ratio + float(rng.normal(0, 0.1)),
                           target.efficiency + float(rng.normal(0, 0.1)))
            pairs.append((target, sim))
        report = build_report(pairs)
        rates = [report.success_rate[t] for t in sorted(report.success_rate)]
        assert all(a <= b for a, b in zip(rates, rates[1:]))


class TestTrainLoop:
    def test_schedule_decays_to_zero(self):
        from circuitgen.training import _lr_lambda

        total, warmup = 100, 10
        assert _lr_lambda(0, warmup, total) == pytest.approx(0.1)
        assert _lr_lambda(9, warmup, total) == pytest.approx(1.0)
        assert _lr_lambda(99, warmup, total) < 0.001
        assert _lr_lambda(55, warmup, total) == pytest.approx(0.5, abs=0.02)

    def test_short_run_trains_and_checkpoints(self, tmp_path):
        records = tiny_records(16)
        tc = TrainConfig(style=Style.PM, task=Task.EDGE, epochs=2, batch_size=8,
                         seed=0, warmup_steps=2, augment=True)
        result = train(tc, records, records[:4], TINY, tmp_path, log=False)
        assert result.checkpoint_path.exists()
        assert len(result.history) == 2
        assert all(math.isfinite(h["train_loss"]) for h in result.history)
        assert (tmp_path / "history.json").exists()

    def test_deterministic_given_seed(self, tmp_path):
        records = tiny_records(12)
        tc = TrainConfig(style=Style.PM, task=Task.EDGE, epochs=2, batch_size=8,
                         seed=3, warmup_steps=2)
        r1 = train(tc, records, records[:4], TINY, tmp_path / "a", log=False)
        r2 = train(tc, records, records[:4], TINY, tmp_path / "b", log=False)
        strip = lambda hist: [
            {k: v for k, v in h.items() if k != "seconds"} for h in hist
        ]
        assert strip(r1.history) == strip(r2.history)
        m1, _ = load_checkpoint(r1.checkpoint_path)
        m2, _ = load_checkpoint(r2.checkpoint_path)
        for p1, p2 in zip(m1.parameters(), m2.parameters()):
            assert torch.equal(p1, p2)

    def test_augment_changes_batches_not_count(self, tmp_path):
        records = tiny_records(12)
        base = TrainConfig(style=Style.PM, task=Task.EDGE, epochs=1, batch_size=8,
                           seed=3, warmup_steps=2, augment=False)
        aug = TrainConfig(style=Style.PM, task=Task.EDGE, epochs=1, batch_size=8,
                          seed=3, warmup_steps=2, augment=True)
        r1 = train(base, records, [], TINY, tmp_path / "x", log=False)
        r2 = train(aug, records, [], TINY, tmp_path / "y", log=False)
        assert len(r1.history) == len(r2.history) == 1
        assert r1.history[0]["train_loss"] != r2.history[0]["train_loss"]

    def test_augmented_record_pairs_differ(self):
        records = tiny_records(1, size=5)
        rng = np.random.default_rng(1)
        base = record_to_pair(records[0], Style.PM, Task.EDGE)
        augmented = {record_to_pair(records[0], Style.PM, Task.EDGE, rng).encoder_input.tokens
                     for _ in range(20)}
        assert len(augmented) > 1
        del base


class TestCheckpointing:
    def test_roundtrip_bit_identical_eval(self, tmp_path):
        records = tiny_records(8)
        model = CircuitTransformer(TINY)
        path = tmp_path / "ckpt.pt"
        tc = TrainConfig(style=Style.PM, task=Task.EDGE, epochs=1)
        save_checkpoint(path, model, tc)
        loaded, meta = load_checkpoint(path)
        assert meta["vocab_hash"]
        a = dataset_loss(model, records, Style.PM, Task.EDGE)
        b = dataset_loss(loaded, records, Style.PM, Task.EDGE)
        assert a == b

    def test_finetune_on_empty_set_keeps_params(self, tmp_path):
        model = CircuitTransformer(TINY)
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, model, TrainConfig(style=Style.PM, task=Task.EDGE))
        tc = TrainConfig(style=Style.PM, task=Task.EDGE, epochs=3)
        result = finetune(path, [], [], tc, tmp_path / "ft")
        loaded, _ = load_checkpoint(result.checkpoint_path)
        for p1, p2 in zip(model.parameters(), loaded.parameters()):
            assert torch.equal(p1, p2)

    def test_vocab_mismatch_detected(self, tmp_path):
        model = CircuitTransformer(TINY)
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, model, TrainConfig(style=Style.PM, task=Task.EDGE))
        payload = torch.load(path, weights_only=False)
        payload["vocab_hash"] = "not-the-real-hash"
        torch.save(payload, path)
        with pytest.raises(TrainingError) as err:
            finetune(path, [], [], TrainConfig(style=Style.PM, task=Task.EDGE), tmp_path / "ft")
        assert err.value.code == "VOCAB_MISMATCH"

    def test_config_mismatch_detected(self, tmp_path):
        model = CircuitTransformer(TINY)
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, model, TrainConfig(style=Style.PM, task=Task.EDGE))
        other = ModelConfig(d_model=64, n_layers_enc=1, n_layers_dec=1, n_heads=2,
                            d_head=32, d_ff=64, dropout=0.0, seed=0)
        with pytest.raises(TrainingError) as err:
            finetune(path, [], [], TrainConfig(style=Style.PM, task=Task.EDGE),
                     tmp_path / "ft", expected_model_cfg=other)
        assert err.value.code == "CONFIG_MISMATCH"


class TestEvaluateModel:
    def test_untrained_model_all_failures(self):
        records = tiny_records(6)
        model = CircuitTransformer(TINY).eval()
        report = evaluate_model(model, records, Style.PM, Task.EDGE)
        assert report.n == 6
        assert report.validity_rate == 0.0
        assert all(v == 0.0 for v in report.success_rate.values())
        assert sum(report.failure_counts.values()) == 6

    def test_split_leakage_detected(self):
        records = tiny_records(4)
        model = CircuitTransformer(TINY).eval()
        keys = {canonical_key(r.circuit) for r in records}
        with pytest.raises(EvaluationError) as err:
            evaluate_model(model, records, Style.PM, Task.EDGE, train_keys=keys)
        assert err.value.code == "SPLIT_LEAKAGE"

    def test_forced_match_equals_greedy_match(self):
        records = tiny_records(10)
        model = CircuitTransformer(TINY).eval()
        torch.manual_seed(1)
        torch.nn.init.normal_(model.lm_head.weight, std=0.02)
        f = forced_match_fraction(model, records, Style.PM, Task.EDGE)
        g = exact_match_fraction(model, records, Style.PM, Task.EDGE)
        assert f == g

    def test_loss_batching_matches_training_tokenization(self):
        records = tiny_records(9)
        model = CircuitTransformer(TINY).eval()
        from circuitgen.model import batch_loss, make_batch

        pairs = [record_to_pair(r, Style.PM, Task.EDGE) for r in records]
        manual = batch_loss(model, make_batch(pairs, TINY)).item()
        via_loop = dataset_loss(model, records, Style.PM, Task.EDGE, batch_size=len(records))
        assert manual == pytest.approx(via_loop, rel=1e-6)
