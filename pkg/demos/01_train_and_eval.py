"""Train a small box-prompted segmenter on synthetic scenes, then score it.

Runs in a minute or two on one CPU core. Saves demos/out/quickstart.bsc,
which demos 02 and 03 reuse, so run this one first.
"""

import pathlib
import time

import numpy as np

from boxseg.iohub import save_checkpoint
from boxseg.metrics import evaluate_run, wilcoxon_signed_rank
from boxseg.model import ModelConfig
from boxseg.synthdata import SynthSpec, flatten_cases, generate_dataset
from boxseg.train import TrainConfig, predict_batch, simulate_box, split_dataset, train

OUT = pathlib.Path(__file__).parent / "out"


def main() -> None:
    spec = SynthSpec(style="mixed", image_size=32, seed=42)
    cases = generate_dataset(spec, 240)
    samples = flatten_cases(cases)
    print(f"dataset: {len(cases)} cases, {len(samples)} object samples, 32x32 px")

    model_config = ModelConfig(image_size=32, seed=42)
    train_config = TrainConfig(epochs=12, seed=42)

    started = time.perf_counter()
    params, log = train(
        samples,
        model_config,
        train_config,
        progress=lambda r: print(
            f"  epoch {r['epoch']:2d}  loss {r['mean_loss']:.4f}"
            f"  tune DSC {r['tune_dsc_median']:.3f}  ({r['seconds']:.1f}s)"
        ),
    )
    print(f"trained in {time.perf_counter() - started:.1f}s")

    _, _, val_idx = split_dataset(
        [s.group_id for s in samples], train_config.fractions, train_config.seed
    )
    records, summary = evaluate_run(samples, val_idx, params, model_config, tau=2.0)
    overall = summary["tasks"]["all"]
    print(
        f"held-out ({len(records)} cases): median DSC {overall['dsc']['p50']:.3f}, "
        f"median NSD {overall['nsd']['p50']:.3f}"
    )

    # same cases, boxes jittered outward by up to 3 px: prompt robustness
    rng = np.random.default_rng(7)
    sloppy = []
    for start in range(0, val_idx.size, 64):
        chunk = val_idx[start : start + 64]
        images = np.stack([samples[i].image for i in chunk])
        boxes = np.stack(
            [simulate_box(samples[i].mask, 3, rng).as_array() for i in chunk]
        )
        probs, _ = predict_batch(images, boxes, params, model_config)
        for row, i in enumerate(chunk):
            inter = np.logical_and(samples[i].mask, probs[row] > 0.5).sum()
            total = samples[i].mask.sum() + (probs[row] > 0.5).sum()
            sloppy.append(2.0 * inter / total if total else 1.0)
    tight = [r.dsc for r in records]
    result = wilcoxon_signed_rank(tight, sloppy)
    print(
        f"tight vs sloppy boxes: medians {np.median(tight):.3f} vs "
        f"{np.median(sloppy):.3f}, signed-rank p = {result.p_value:.3f}"
    )

    OUT.mkdir(exist_ok=True)
    path = OUT / "quickstart.bsc"
    digest = save_checkpoint(str(path), params, model_config)
    print(f"saved {path} (sha256 {digest[:12]}...)")


if __name__ == "__main__":
    main()
