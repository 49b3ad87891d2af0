"""Intensity normalization, resizing, channel replication and patch tiling.

All functions are pure: they never mutate their inputs and return freshly
allocated arrays, so they are safe to call concurrently.

Conventions fixed here and relied on by the rest of the package:

* normalized intensities live in [0, 255] as float32, rounded
  half-away-from-zero to integer-valued floats;
* percentiles use inclusive linear interpolation over the sorted values
  (numpy's default "linear" method);
* image resizing is Catmull-Rom bicubic (a = -0.5) with pixel centers at
  half-integer coordinates and corner-aligned scaling; mask resizing is
  nearest-neighbor under the same coordinate convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ModalityMismatchError, ShapeMismatchError, SliceIndexError


class Modality(str, Enum):
    CT = "ct"
    MR = "mr"
    XRAY = "xray"
    ULTRASOUND = "ultrasound"
    MAMMOGRAPHY = "mammography"
    OCT = "oct"
    RGB = "rgb"


#: Modalities normalized by percentile clipping (everything gray except CT).
PERCENTILE_MODALITIES = frozenset(
    {Modality.MR, Modality.XRAY, Modality.ULTRASOUND, Modality.MAMMOGRAPHY, Modality.OCT}
)


@dataclass
class WindowSpec:
    """CT intensity window: width and level in Hounsfield units."""

    width: float
    level: float

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError(f"window width must be positive, got {self.width}")


#: Common clinical windows (soft tissue, lung, brain).
SOFT_TISSUE_WINDOW = WindowSpec(width=400, level=40)
LUNG_WINDOW = WindowSpec(width=1500, level=-160)
BRAIN_WINDOW = WindowSpec(width=80, level=40)


@dataclass
class ImagePlane:
    """A 2D image, row-major, channel-last, float32, 1 or 3 channels."""

    data: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ShapeMismatchError(f"plane must be (h, w, 1|3), got {arr.shape}")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class Volume:
    """A 3D scalar volume, slice-major (depth, height, width), float32."""

    data: np.ndarray
    modality: Modality
    window: WindowSpec | None = None
    spacing: tuple[float, float, float] | None = None  # informational only
    degenerate: bool = False

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ShapeMismatchError(f"volume must be (depth, h, w), got {arr.shape}")
        self.data = arr
        if self.modality is Modality.CT and self.window is None:
            self.window = SOFT_TISSUE_WINDOW

    @property
    def depth(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, halves away from zero (banker's rounding off)."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def normalize_ct(volume: Volume, window: WindowSpec) -> Volume:
    """Window HU values into [0, 255]: linear inside [L-W/2, L+W/2], clamped outside."""
    if volume.modality is not Modality.CT:
        raise ModalityMismatchError(f"normalize_ct requires CT, got {volume.modality.value}")
    lo = window.level - window.width / 2.0
    t = np.clip((volume.data.astype(np.float64) - lo) / window.width, 0.0, 1.0)
    out = round_half_away(t * 255.0).astype(np.float32)
    return Volume(out, Modality.CT, window=window, spacing=volume.spacing)


def normalize_percentile(volume: Volume) -> Volume:
    """Clip to the [0.5th, 99.5th] percentile range of the whole volume, rescale to [0, 255].

    A constant volume has zero dynamic range: the result is all zeros with the
    degenerate flag set, so batch pipelines keep running.
    """
    if volume.modality not in PERCENTILE_MODALITIES:
        raise ModalityMismatchError(
            f"percentile normalization applies to {sorted(m.value for m in PERCENTILE_MODALITIES)}, "
            f"got {volume.modality.value}"
        )
    data = volume.data.astype(np.float64)
    lo, hi = np.percentile(data, [0.5, 99.5])
    if hi == lo:
        out = np.zeros_like(volume.data)
        return Volume(out, volume.modality, spacing=volume.spacing, degenerate=True)
    t = (np.clip(data, lo, hi) - lo) / (hi - lo)
    out = round_half_away(t * 255.0).astype(np.float32)
    return Volume(out, volume.modality, spacing=volume.spacing)


def normalize_rgb(image: ImagePlane) -> ImagePlane:
    """Joint max-min rescale of a 3-channel image to [0, 255].

    Images already inside [0, 255] pass through unchanged; constant images
    come back as zeros with the degenerate flag set.
    """
    if image.channels != 3:
        raise ShapeMismatchError(f"rgb normalization requires 3 channels, got {image.channels}")
    lo = float(image.data.min())
    hi = float(image.data.max())
    if hi == lo:
        return ImagePlane(np.zeros_like(image.data), degenerate=True)
    if lo >= 0.0 and hi <= 255.0:
        return ImagePlane(image.data.copy())
    t = (image.data.astype(np.float64) - lo) / (hi - lo)
    return ImagePlane(round_half_away(t * 255.0).astype(np.float32))


def normalize_volume(volume: Volume) -> Volume:
    """Dispatch to the per-modality normalization rule.

    RGB volumes are not a thing (RGB data is 2D); CT uses the attached window.
    """
    if volume.modality is Modality.CT:
        return normalize_ct(volume, volume.window or SOFT_TISSUE_WINDOW)
    if volume.modality in PERCENTILE_MODALITIES:
        return normalize_percentile(volume)
    raise ModalityMismatchError(f"no volume normalization rule for {volume.modality.value}")


def _catmull_rom(t: np.ndarray) -> np.ndarray:
    """Catmull-Rom cubic kernel (a = -0.5), evaluated at |t| <= 2."""
    a = -0.5
    t = np.abs(t)
    out = np.zeros_like(t)
    near = t <= 1.0
    far = (t > 1.0) & (t < 2.0)
    tn = t[near]
    tf = t[far]
    out[near] = (a + 2.0) * tn**3 - (a + 3.0) * tn**2 + 1.0
    out[far] = a * tf**3 - 5.0 * a * tf**2 + 8.0 * a * tf - 4.0 * a
    return out


def _bicubic_weights(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) resampling matrix for one axis, border replicated."""
    scale = n_in / n_out
    w = np.zeros((n_out, n_in), dtype=np.float64)
    for o in range(n_out):
        x = (o + 0.5) * scale - 0.5
        i0 = math.floor(x)
        taps = np.arange(i0 - 1, i0 + 3)
        weights = _catmull_rom(x - taps.astype(np.float64))
        taps = np.clip(taps, 0, n_in - 1)
        for tap, wt in zip(taps, weights):
            w[o, tap] += wt
    return w


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    scale = n_in / n_out
    idx = np.floor((np.arange(n_out) + 0.5) * scale).astype(np.int64)
    return np.clip(idx, 0, n_in - 1)


def resize(plane, target_w: int, target_h: int, kind: str):
    """Resize an image (bicubic, clamped to [0, 255]) or a mask (nearest).

    ``plane`` is an ImagePlane for kind="image" or a 2D {0,1} ndarray for
    kind="mask"; the return type matches the input. Identity targets return a
    bit-identical copy.
    """
    if target_w < 1 or target_h < 1:
        raise ValueError(f"target dims must be >= 1, got {target_w}x{target_h}")
    if kind == "image":
        if not isinstance(plane, ImagePlane):
            raise TypeError("kind='image' expects an ImagePlane")
        if (plane.width, plane.height) == (target_w, target_h):
            return ImagePlane(plane.data.copy())
        rows = _bicubic_weights(plane.height, target_h)
        cols = _bicubic_weights(plane.width, target_w)
        out = np.einsum("oh,hwc->owc", rows, plane.data.astype(np.float64))
        out = np.einsum("pw,owc->opc", cols, out)
        out = np.clip(out, 0.0, 255.0).astype(np.float32)
        return ImagePlane(out)
    if kind == "mask":
        mask = np.asarray(plane)
        if mask.ndim != 2:
            raise ShapeMismatchError(f"mask must be 2D, got {mask.shape}")
        if mask.shape == (target_h, target_w):
            return mask.copy()
        r = _nearest_index(mask.shape[0], target_h)
        c = _nearest_index(mask.shape[1], target_w)
        return mask[np.ix_(r, c)].copy()
    raise ValueError(f"kind must be 'image' or 'mask', got {kind!r}")


@dataclass
class PatchGrid:
    """Non-overlapping model-size tiles of a plane, row-major, zero padded."""

    patches: list[ImagePlane]
    grid_rows: int
    grid_cols: int
    source_height: int
    source_width: int
    patch_size: int = field(default=0)


def prepare_plane(
    source: Volume | ImagePlane,
    modality: Modality | None = None,
    slice_index: int | None = None,
    model_size: int = 64,
) -> PatchGrid:
    """Turn a normalized slice or image into model-ready 3-channel tiles.

    Grayscale input is replicated to 3 channels. Input larger than
    ``model_size`` is tiled into ceil-division many non-overlapping tiles with
    zero padding at the right/bottom; smaller input is zero padded up to one
    tile. Input already at ``model_size`` passes through as a single patch.
    """
    if isinstance(source, Volume):
        if slice_index is None:
            raise SliceIndexError("slice_index is required for volume input")
        if not 0 <= slice_index < source.depth:
            raise SliceIndexError(
                f"slice {slice_index} out of range for depth {source.depth}"
            )
        arr = source.data[slice_index][:, :, None]
        modality = modality or source.modality
    else:
        arr = source.data
        if modality is Modality.RGB and arr.shape[2] != 3:
            raise ModalityMismatchError("RGB modality implies 3 channels")
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)

    h, w = arr.shape[:2]
    rows = max(1, math.ceil(h / model_size))
    cols = max(1, math.ceil(w / model_size))
    padded = np.zeros((rows * model_size, cols * model_size, 3), dtype=np.float32)
    padded[:h, :w] = arr
    patches = [
        ImagePlane(
            padded[
                r * model_size : (r + 1) * model_size,
                c * model_size : (c + 1) * model_size,
            ].copy()
        )
        for r in range(rows)
        for c in range(cols)
    ]
    return PatchGrid(patches, rows, cols, h, w, model_size)


def reassemble_patches(grid: PatchGrid) -> np.ndarray:
    """Undo prepare_plane's tiling: stitch patches and crop the zero padding."""
    ms = grid.patch_size
    full = np.zeros((grid.grid_rows * ms, grid.grid_cols * ms, 3), dtype=np.float32)
    for i, patch in enumerate(grid.patches):
        r, c = divmod(i, grid.grid_cols)
        full[r * ms : (r + 1) * ms, c * ms : (c + 1) * ms] = patch.data
    return full[: grid.source_height, : grid.source_width]
