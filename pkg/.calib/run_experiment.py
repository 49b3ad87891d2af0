"""Calibration run for the full training experiment (not part of the package)."""
import json
import os
import sys
import time

os.environ.setdefault("OMP_NUM_THREADS", "8")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "8")

import numpy as np

from boxseg.model import ModelConfig, init_params
from boxseg.train import TrainConfig, train, split_dataset
from boxseg.metrics import evaluate_run
from boxseg.synthdata import SynthSpec, generate_dataset, flatten_cases

n_cases = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 30
lr = float(sys.argv[3]) if len(sys.argv) > 3 else 1e-4

t0 = time.perf_counter()
cases = generate_dataset(SynthSpec(style="mixed", image_size=64, seed=0), n_cases)
samples = flatten_cases(cases)
print(f"{n_cases} cases -> {len(samples)} samples ({time.perf_counter()-t0:.1f}s)", flush=True)

config = ModelConfig()
tc = TrainConfig(learning_rate=lr, epochs=epochs, seed=0)
t0 = time.perf_counter()
params, records = train(samples, config, tc)
train_s = time.perf_counter() - t0
print(f"train: {train_s/60:.1f} min", flush=True)
for rec in records:
    print(json.dumps(rec), flush=True)

groups = [s.group_id for s in samples]
_, _, val_idx = split_dataset(groups, tc.fractions, tc.seed)
_, summary = evaluate_run(samples, val_idx, params, config, tau=2.0)
print("VAL trained:", json.dumps(summary["overall"]), flush=True)

_, base = evaluate_run(samples, val_idx, init_params(config), config, tau=2.0)
print("VAL untrained:", json.dumps(base["overall"]), flush=True)

if len(sys.argv) > 4:
    from boxseg.iohub import save_checkpoint
    digest = save_checkpoint(sys.argv[4], params, config)
    print("checkpoint:", sys.argv[4], digest, flush=True)
