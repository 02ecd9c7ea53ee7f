"""Desk-scale calibration: dataset size, training epochs, eval quality.

Development aid, not part of the package deliverable.
"""

import json
import sys
import time

import torch

torch.set_num_threads(2)

from circuitgen.dataset import GenConfig, generate_dataset, read_jsonl
from circuitgen.evaluation import evaluate_model, forced_match_fraction
from circuitgen.formulations import Style, Task
from circuitgen.model import ModelConfig
from circuitgen.training import TrainConfig, load_checkpoint, train

OUT = "/tmp/calib_data"

t0 = time.time()
stats = generate_dataset(GenConfig(targets_per_size={3: 300, 4: 700}, seed=7), OUT)
print(f"dataset: {json.dumps(stats.to_json_dict()['per_size'])} -> "
      f"{stats.n_train} train / {stats.n_test} test, validity {stats.validity_rate:.2f} "
      f"({time.time()-t0:.0f}s)", flush=True)

train_recs = read_jsonl(OUT + "/train.jsonl")
test_recs = read_jsonl(OUT + "/test.jsonl")

mcfg = ModelConfig(d_model=128, n_layers_enc=2, n_layers_dec=2, n_heads=4,
                   d_head=32, d_ff=512, float_input=True, seed=0)
tc = TrainConfig(style=Style.FM, task=Task.EDGE, epochs=40, batch_size=32, seed=0)
t0 = time.time()
res = train(tc, train_recs, test_recs, mcfg, "/tmp/calib_fm")
print(f"trained 40 epochs in {(time.time()-t0)/60:.1f} min", flush=True)

model, _ = load_checkpoint(res.checkpoint_path)
t0 = time.time()
report = evaluate_model(model, test_recs, Style.FM, Task.EDGE)
print(f"eval ({time.time()-t0:.0f}s): validity {report.validity_rate:.3f} "
      f"sr@0.05 {report.success_rate[0.05]:.3f} sr@0.1 {report.success_rate[0.1]:.3f} "
      f"mse_v {report.mse_voltage} failures {report.failure_counts}", flush=True)
