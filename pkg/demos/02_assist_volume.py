"""Segment a whole lesion volume from markers on every fifth slice.

The annotator draws two crossing axis lines on a few slices; boxes for the
slices in between are interpolated and every slice in the span goes through
the model. Needs demos/out/quickstart.bsc from demo 01.
"""

import pathlib
import sys

import numpy as np

from boxseg.annotate import assist_segment, export_session, markers_from_mask
from boxseg.imgproc import normalize_volume
from boxseg.iohub import load_checkpoint
from boxseg.metrics import dsc
from boxseg.synthdata import SynthSpec, generate_tumor_volume

OUT = pathlib.Path(__file__).parent / "out"


def main() -> None:
    checkpoint = OUT / "quickstart.bsc"
    if not checkpoint.exists():
        sys.exit("run demos/01_train_and_eval.py first (it saves the checkpoint)")
    params, config, _ = load_checkpoint(str(checkpoint))

    spec = SynthSpec(style="ct-like", image_size=config.image_size, seed=5)
    volume, gt = generate_tumor_volume(spec, depth=20)
    normalized = normalize_volume(volume)
    occupied = [k for k in range(gt.shape[0]) if gt[k].any()]
    print(f"volume: {gt.shape[0]} slices, lesion on {len(occupied)} of them")

    marked = sorted(set(occupied[::5]) | {occupied[-1]})
    markers = [markers_from_mask(gt[k], k) for k in marked]
    print(f"markers drawn on slices {marked} ({len(marked)} of {len(occupied)})")

    session = assist_segment(normalized, markers, params, config, "demo-volume")
    print(
        f"model segmented {len(session.model_masks)} slices in "
        f"{session.phase_time('inference') * 1000:.0f}ms"
    )

    marked_scores = [dsc(gt[k], session.model_masks[k]) for k in marked]
    interp = [k for k in session.model_masks if k not in marked]
    interp_scores = [dsc(gt[k], session.model_masks[k]) for k in interp]
    print(
        f"DSC vs ground truth: marked slices median {np.median(marked_scores):.3f}, "
        f"interpolated slices median {np.median(interp_scores):.3f}"
    )

    export_dir = OUT / "assist_export"
    manifest = export_session(session, str(export_dir))
    span = manifest["model_slices"]
    print(f"exported masks + manifest to {export_dir} (slices {span[0]}..{span[-1]})")


if __name__ == "__main__":
    main()
