"""Second calibration: rescaled float embedder, bigger model, longer run."""

import json
import sys
import time

import torch

torch.set_num_threads(2)

from circuitgen.dataset import read_jsonl
from circuitgen.evaluation import evaluate_model, forced_match_fraction
from circuitgen.formulations import Style, Task
from circuitgen.model import ModelConfig
from circuitgen.training import TrainConfig, load_checkpoint, train

OUT = "/tmp/calib_data"
train_recs = read_jsonl(OUT + "/train.jsonl")
test_recs = read_jsonl(OUT + "/test.jsonl")
print(f"{len(train_recs)} train / {len(test_recs)} test", flush=True)

style = Style(sys.argv[1]) if len(sys.argv) > 1 else Style.FM
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 50
mcfg = ModelConfig(d_model=192, n_layers_enc=3, n_layers_dec=3, n_heads=6,
                   d_head=32, d_ff=768, float_input=style == Style.FM, seed=0)
tc = TrainConfig(style=style, task=Task.EDGE, epochs=epochs, batch_size=32, seed=0)
t0 = time.time()
res = train(tc, train_recs, test_recs, mcfg, f"/tmp/calib2_{style.value.lower()}")
print(f"trained {epochs} epochs in {(time.time()-t0)/60:.1f} min", flush=True)

model, _ = load_checkpoint(res.checkpoint_path)
report = evaluate_model(model, test_recs, style, Task.EDGE)
print(f"eval: validity {report.validity_rate:.3f} "
      f"sr@0.05 {report.success_rate[0.05]:.3f} sr@0.1 {report.success_rate[0.1]:.3f} "
      f"mse_v {report.mse_voltage} failures {report.failure_counts}", flush=True)
