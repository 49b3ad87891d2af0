"""Dump (or compare) exact forward outputs from the desk checkpoint.

Usage: python3 .calib/golden_forward.py dump|check
"""
import sys

import numpy as np

from boxseg.iohub import load_checkpoint
from boxseg.train import predict_batch
from boxseg.synthdata import SynthSpec, generate_case

params, config, _ = load_checkpoint(".calib/desk.bsc")

rng = np.random.default_rng(123)
images = []
boxes = []
for i in range(6):
    sample = generate_case(SynthSpec(image_size=config.image_size, style="ct-like", seed=9), 900 + i)
    images.append(sample.image)
    ys, xs = np.nonzero(sample.masks[0])
    boxes.append([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1])
images = np.stack(images)
boxes = np.asarray(boxes, dtype=np.float64)

probs, conf = predict_batch(images, boxes, params, config)

if sys.argv[1] == "dump":
    np.save(".calib/golden_probs.npy", probs)
    np.save(".calib/golden_conf.npy", conf)
    print("dumped", probs.shape, conf.shape, probs.sum())
else:
    ref_p = np.load(".calib/golden_probs.npy")
    ref_c = np.load(".calib/golden_conf.npy")
    same_p = np.array_equal(probs, ref_p)
    same_c = np.array_equal(conf, ref_c)
    print("probs bit-identical:", same_p)
    print("conf  bit-identical:", same_c)
    if not (same_p and same_c):
        print("max |dp| =", np.abs(probs.astype(np.float64) - ref_p).max())
        sys.exit(1)
