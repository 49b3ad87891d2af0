"""Sparse-marker annotation assist.

A human (or the harness standing in for one) drops long/short axis markers on
a few slices. Step 1 turns each marker into an axis-aligned box, step 2
linearly interpolates boxes onto the unlabeled slices in between, and step 3
runs box-prompted segmentation on every slice in the marked span. Sessions
accumulate masks, optional manual refinements, and a per-phase timing log
(marking, inference, refinement).
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import MarkerError, SessionError, ShapeMismatchError
from .imgproc import Volume, round_half_away
from .model import BoundingBox, ModelConfig, ParameterSet

MIN_BOX_SIDE = 3

Point = tuple[float, float]


@dataclass(frozen=True)
class LinearMarker:
    """Long and short axis segments drawn on one slice, endpoints as (x, y)."""

    slice_index: int
    long_axis: tuple[Point, Point]
    short_axis: tuple[Point, Point]

    def endpoints(self) -> list[Point]:
        return [*self.long_axis, *self.short_axis]

    def validate(self, width: int, height: int) -> None:
        for x, y in self.endpoints():
            if not (0 <= x < width and 0 <= y < height):
                raise MarkerError(
                    f"endpoint ({x}, {y}) outside {width}x{height} slice "
                    f"{self.slice_index}"
                )
        if set(self.long_axis) == set(self.short_axis):
            raise MarkerError("long and short axes must be distinct segments")


def _expand_to_min_side(lo: int, hi: int, limit: int) -> tuple[int, int]:
    if hi - lo >= MIN_BOX_SIDE:
        return lo, hi
    center = (lo + hi) // 2
    lo = max(0, center - MIN_BOX_SIDE // 2)
    hi = min(limit, lo + MIN_BOX_SIDE)
    lo = max(0, hi - MIN_BOX_SIDE)
    return lo, hi


def rect_from_marker(marker: LinearMarker, width: int, height: int) -> BoundingBox:
    """Smallest axis-aligned box covering all four marker endpoints.

    Degenerate (flat) boxes are expanded symmetrically to a minimum side of
    3 pixels, staying inside the slice.
    """
    marker.validate(width, height)
    xs = [p[0] for p in marker.endpoints()]
    ys = [p[1] for p in marker.endpoints()]
    # floor/ceil, not nearest: the box must fully cover fractional endpoints
    x_min = int(math.floor(min(xs)))
    x_max = int(math.ceil(max(xs)))
    y_min = int(math.floor(min(ys)))
    y_max = int(math.ceil(max(ys)))
    x_min, x_max = _expand_to_min_side(x_min, x_max, width)
    y_min, y_max = _expand_to_min_side(y_min, y_max, height)
    box = BoundingBox(x_min, y_min, x_max, y_max)
    box.validate(width, height)
    return box


def interpolate_boxes(
    labeled: dict[int, BoundingBox], slice_range: tuple[int, int]
) -> dict[int, BoundingBox]:
    """Fill [start, stop) with boxes: labeled slices pass through unchanged,
    gaps interpolate each coordinate linearly in the slice index (rounded
    half away from zero), and slices past the outermost labels copy the
    nearest labeled box."""
    if not labeled:
        raise MarkerError("cannot interpolate from an empty label map")
    keys = sorted(labeled)
    start, stop = slice_range
    out: dict[int, BoundingBox] = {}
    for k in range(start, stop):
        if k in labeled:
            out[k] = labeled[k]
        elif k <= keys[0]:
            out[k] = labeled[keys[0]]
        elif k >= keys[-1]:
            out[k] = labeled[keys[-1]]
        else:
            hi_pos = next(i for i, key in enumerate(keys) if key > k)
            a, b = keys[hi_pos - 1], keys[hi_pos]
            t = (k - a) / (b - a)
            ca = labeled[a].as_array()
            cb = labeled[b].as_array()
            coords = round_half_away(ca + t * (cb - ca)).astype(int)
            out[k] = BoundingBox(*coords.tolist())
    return out


@dataclass
class AnnotationSession:
    volume_id: str
    slice_shape: tuple[int, int]  # (height, width)
    markers: dict[int, LinearMarker] = field(default_factory=dict)
    boxes: dict[int, BoundingBox] = field(default_factory=dict)
    model_masks: dict[int, np.ndarray] = field(default_factory=dict)
    refined_masks: dict[int, np.ndarray] = field(default_factory=dict)
    timing: list[dict] = field(default_factory=list)

    def log_phase(self, phase: str, duration: float) -> None:
        if phase not in ("marking", "inference", "refinement"):
            raise SessionError(f"unknown timing phase {phase!r}")
        if duration < 0:
            raise SessionError("durations must be >= 0")
        self.timing.append({"phase": phase, "duration": float(duration)})

    def total_time(self) -> float:
        return float(sum(entry["duration"] for entry in self.timing))

    def phase_time(self, phase: str) -> float:
        return float(
            sum(entry["duration"] for entry in self.timing if entry["phase"] == phase)
        )


def assist_segment(
    volume: Volume,
    markers: list[LinearMarker],
    params: ParameterSet,
    config: ModelConfig,
    volume_id: str = "volume",
) -> AnnotationSession:
    """Steps 1-3 over the marked span; returns a session with per-slice masks.

    The volume must already be normalized to [0, 255] and its slices must
    match the model's input size. Runs with no human in the loop; only the
    inference phase is timed here.
    """
    from .train import predict_batch

    if not markers:
        raise MarkerError("need at least one marker")
    depth, height, width = volume.data.shape
    if (height, width) != (config.image_size, config.image_size):
        raise ShapeMismatchError(
            f"slices are {height}x{width}, model expects "
            f"{config.image_size}x{config.image_size}"
        )
    session = AnnotationSession(volume_id=volume_id, slice_shape=(height, width))
    labeled: dict[int, BoundingBox] = {}
    for marker in markers:
        if not (0 <= marker.slice_index < depth):
            raise MarkerError(f"marker slice {marker.slice_index} outside volume depth {depth}")
        if marker.slice_index in labeled:
            raise MarkerError(f"duplicate marker for slice {marker.slice_index}")
        labeled[marker.slice_index] = rect_from_marker(marker, width, height)
        session.markers[marker.slice_index] = marker

    lo, hi = min(labeled), max(labeled)
    session.boxes = interpolate_boxes(labeled, (lo, hi + 1))

    started = time.monotonic()
    slices = sorted(session.boxes)
    images = np.stack(
        [np.repeat(volume.data[k][:, :, None], 3, axis=2) for k in slices]
    )
    boxes = np.stack([session.boxes[k].as_array() for k in slices])
    for start in range(0, len(slices), 64):
        probs, _ = predict_batch(
            images[start : start + 64], boxes[start : start + 64], params, config
        )
        for row, k in enumerate(slices[start : start + 64]):
            session.model_masks[k] = (probs[row] > 0.5).astype(np.uint8)
    session.log_phase("inference", time.monotonic() - started)
    return session


def record_refinement(
    session: AnnotationSession,
    slice_index: int,
    refined_mask: np.ndarray,
    duration: float,
) -> AnnotationSession:
    """Store a manual correction; only segmented slices can be refined."""
    if slice_index not in session.model_masks:
        raise SessionError(f"slice {slice_index} has no model mask to refine")
    refined = np.asarray(refined_mask)
    if refined.shape != session.slice_shape:
        raise ShapeMismatchError(
            f"refined mask {refined.shape} does not match slices {session.slice_shape}"
        )
    session.refined_masks[slice_index] = (refined != 0).astype(np.uint8)
    session.log_phase("refinement", duration)
    return session


def time_saving(assisted_total: float, manual_total: float) -> float:
    """Fractional time saved by assistance relative to fully manual work."""
    if manual_total <= 0:
        raise ValueError("manual total must be positive")
    return 1.0 - assisted_total / manual_total


def export_session(session: AnnotationSession, directory: str) -> dict:
    """JSON manifest plus mask volumes (model and refined) in container format.

    Returns the manifest. Mask volumes cover the contiguous segmented span;
    the manifest records which slices are real model outputs or refinements.
    """
    from .iohub import write_volume

    os.makedirs(directory, exist_ok=True)
    height, width = session.slice_shape
    manifest = {
        "volume_id": session.volume_id,
        "slice_shape": [height, width],
        "markers": {
            str(k): {
                "long_axis": [list(p) for p in m.long_axis],
                "short_axis": [list(p) for p in m.short_axis],
            }
            for k, m in sorted(session.markers.items())
        },
        "boxes": {
            str(k): [b.x_min, b.y_min, b.x_max, b.y_max]
            for k, b in sorted(session.boxes.items())
        },
        "timing": session.timing,
        "total_time": session.total_time(),
    }
    for name, masks in (("model", session.model_masks), ("refined", session.refined_masks)):
        if not masks:
            manifest[f"{name}_slices"] = []
            continue
        slices = sorted(masks)
        stack = np.zeros((len(slices), height, width), dtype=np.uint8)
        for row, k in enumerate(slices):
            stack[row] = masks[k]
        path = os.path.join(directory, f"{name}_masks.miv")
        write_volume(path, stack)
        manifest[f"{name}_slices"] = slices
        manifest[f"{name}_masks"] = os.path.basename(path)
    with open(os.path.join(directory, "session.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def markers_from_mask(
    mask: np.ndarray, slice_index: int
) -> LinearMarker:
    """Synthesize the long/short axis marker a human would draw on a mask.

    Long axis: the farthest-apart pair of boundary pixels. Short axis: the
    extreme pair along the perpendicular direction. Used by harnesses to
    exercise the assist pipeline without an actual annotator.
    """
    from .metrics import boundary

    points = np.argwhere(boundary(mask))  # (n, 2) as (y, x)
    if points.shape[0] == 0:
        raise MarkerError(f"slice {slice_index} has no foreground to mark")
    if points.shape[0] == 1:
        y, x = (float(v) for v in points[0])
        width = mask.shape[1]
        x2 = x + 1 if x + 1 < width else x - 1
        return LinearMarker(
            slice_index,
            ((x, y), (x, y)),
            ((x, y), (x2, y)),
        )
    deltas = points[:, None, :] - points[None, :, :]
    dist2 = (deltas ** 2).sum(axis=2)
    i, j = np.unravel_index(np.argmax(dist2), dist2.shape)
    p_long = points[i].astype(np.float64)
    q_long = points[j].astype(np.float64)
    direction = q_long - p_long
    norm = np.hypot(*direction)
    perp = np.array([-direction[1], direction[0]]) / norm
    projections = points @ perp
    p_short = points[np.argmin(projections)].astype(np.float64)
    q_short = points[np.argmax(projections)].astype(np.float64)
    return LinearMarker(
        slice_index,
        ((float(p_long[1]), float(p_long[0])), (float(q_long[1]), float(q_long[0]))),
        ((float(p_short[1]), float(p_short[0])), (float(q_short[1]), float(q_short[0]))),
    )
