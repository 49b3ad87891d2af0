"""Seed-driven synthetic images, masks, and tumor volumes.

These are openly artificial stand-ins: bright smooth objects (ellipses and
Fourier-perturbed blobs) over flat backgrounds, styled loosely after CT
(additive noise), ultrasound (multiplicative speckle plus blur), and RGB
(colored, lightly textured). Masks are exact analytic insets evaluated at
pixel centers before any blur or noise touches the image, so ground truth is
never an approximation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError
from .imgproc import Modality, Volume, WindowSpec

STYLES = ("ct-like", "us-like", "rgb-like")


@dataclass(frozen=True)
class SynthSpec:
    style: str = "mixed"  # one of STYLES or "mixed"
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 2
    blur_sigma: float = 1.0
    contrast_gap: float = 80.0
    noise_sigma: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.style != "mixed" and self.style not in STYLES:
            raise ConfigError(f"style must be 'mixed' or one of {STYLES}, got {self.style!r}")
        if not (1 <= self.min_objects <= self.max_objects <= 3):
            raise ConfigError("object count range must satisfy 1 <= min <= max <= 3")
        if self.contrast_gap <= 0:
            raise ConfigError("contrast gap must be positive")
        if self.image_size < 24:
            raise ConfigError("image_size below 24 cannot fit the minimum object area")


@dataclass
class Sample:
    """One training/evaluation case: a single object on a rendered plane."""

    image: np.ndarray  # (S, S, 3) float32 in [0, 255]
    mask: np.ndarray  # (S, S) uint8
    group_id: str
    case_id: str
    task: str  # style name


@dataclass
class SynthCase:
    """One rendered scene; multi-object scenes carry one mask per object."""

    image: np.ndarray
    masks: list[np.ndarray] = field(default_factory=list)
    group_id: str = ""
    case_id: str = ""
    style: str = ""
    pre_noise_gap: float = 0.0


def _case_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng((seed, index))


def _object_masks(rng: np.random.Generator, size: int, count: int) -> list[np.ndarray]:
    """Disjoint analytic shapes, each at least 0.5% of the image in area."""
    min_area = 0.005 * size * size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # whole-scene retries with shrinking radii: one early oversized object can
    # strand the rest, so per-object retries alone cannot fill small images
    for scene_round in range(8):
        shrink = 0.85**scene_round
        masks: list[np.ndarray] = []
        centers: list[tuple[float, float, float]] = []  # (cy, cx, reach)
        for _ in range(count):
            for attempt in range(100):
                r_max = max(size * rng.uniform(0.10, 0.22) * shrink, 2.2)
                margin = r_max + 2.0
                cy = rng.uniform(margin, size - margin)
                cx = rng.uniform(margin, size - margin)
                if any(
                    np.hypot(cy - oy, cx - ox) < r_max + reach + 3.0
                    for oy, ox, reach in centers
                ):
                    continue
                if rng.random() < 0.5:
                    a = r_max
                    b = r_max * rng.uniform(0.55, 1.0)
                    theta = rng.uniform(0.0, np.pi)
                    u = np.cos(theta) * (xx - cx) + np.sin(theta) * (yy - cy)
                    v = -np.sin(theta) * (xx - cx) + np.cos(theta) * (yy - cy)
                    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
                else:
                    base = r_max * rng.uniform(0.75, 0.9)
                    amps = rng.uniform(0.0, 0.15, size=3)
                    phases = rng.uniform(0.0, 2 * np.pi, size=3)
                    phi = np.arctan2(yy - cy, xx - cx)
                    rho = np.hypot(yy - cy, xx - cx)
                    wobble = sum(
                        a_k * np.cos((k + 1) * phi + p_k)
                        for k, (a_k, p_k) in enumerate(zip(amps, phases))
                    )
                    inside = rho <= base * (1.0 + wobble)
                mask = inside.astype(np.uint8)
                if mask.sum() >= min_area:
                    masks.append(mask)
                    centers.append((cy, cx, r_max))
                    break
            else:
                break
        if len(masks) == count:
            return masks
    raise ConfigError(f"could not place {count} objects in a {size}x{size} image")


def _soft_alpha(mask: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return mask.astype(np.float64)
    return gaussian_filter(mask.astype(np.float64), sigma)


def render_clean(
    spec: SynthSpec, style: str, rng: np.random.Generator
) -> tuple[np.ndarray, list[np.ndarray], float]:
    """Noise-free scene. Returns (clean image, per-object masks, intensity gap).

    The gap is the difference in channel-mean intensity between foreground and
    background of the pre-noise render; by construction it is at least the
    spec's contrast_gap.
    """
    size = spec.image_size
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    masks = _object_masks(rng, size, count)
    gap = spec.contrast_gap + rng.uniform(0.0, 25.0)

    union = np.zeros((size, size), dtype=bool)
    for mask in masks:
        union |= mask.astype(bool)
    alphas = [_soft_alpha(mask, spec.blur_sigma) for mask in masks]

    if style == "rgb-like":
        background = rng.uniform(20.0, 110.0, size=3)
        offsets = [gap + rng.uniform(0.0, 18.0, size=3) for _ in masks]
        yy, xx = np.mgrid[0:size, 0:size]
        texture = 4.0 * np.sin(2 * np.pi * xx / rng.uniform(6, 14)) * np.sin(
            2 * np.pi * yy / rng.uniform(6, 14)
        )

        def compose(boost: float) -> np.ndarray:
            clean = np.ones((size, size, 3)) * background
            for alpha, offset in zip(alphas, offsets):
                fg = np.clip(background + offset * boost, 0.0, 255.0)
                a = alpha[:, :, None]
                clean = clean * (1.0 - a) + fg * a
            clean[union] += texture[union, None]
            return clean

    else:
        base = rng.uniform(30.0, 90.0) if style == "ct-like" else rng.uniform(15.0, 50.0)
        offsets = [gap + rng.uniform(0.0, 20.0) for _ in masks]

        def compose(boost: float) -> np.ndarray:
            clean2d = np.full((size, size), base)
            for alpha, offset in zip(alphas, offsets):
                fg = min(base + offset * boost, 250.0)
                clean2d = clean2d * (1.0 - alpha) + fg * alpha
            return np.repeat(clean2d[:, :, None], 3, axis=2)

    # boundary blur bleeds object intensity outward, so the realized mean gap
    # lands below the drawn offset; re-scale the offsets until the measured
    # gap clears the spec floor (composition is affine in the offsets, so one
    # or two rounds suffice away from the clip ceiling)
    boost = 1.0
    for _ in range(4):
        clean = compose(boost)
        realized_gap = float(clean[union].mean() - clean[~union].mean())
        if realized_gap >= spec.contrast_gap:
            return clean, masks, realized_gap
        boost *= (spec.contrast_gap + 2.0) / max(realized_gap, 1.0)
    raise ConfigError(
        f"cannot realize contrast gap {spec.contrast_gap} inside the intensity range"
    )


def _apply_noise(
    clean: np.ndarray, style: str, spec: SynthSpec, rng: np.random.Generator
) -> np.ndarray:
    if style == "ct-like":
        noisy = clean + rng.normal(0.0, spec.noise_sigma, size=clean.shape)
    elif style == "us-like":
        speckle = 1.0 + rng.normal(0.0, 0.2, size=clean.shape)
        noisy = gaussian_filter(clean * speckle, sigma=(1.0, 1.0, 0.0))
    else:
        noisy = clean + rng.normal(0.0, spec.noise_sigma, size=clean.shape)
    return np.clip(noisy, 0.0, 255.0).astype(np.float32)


def generate_case(spec: SynthSpec, index: int) -> SynthCase:
    rng = _case_rng(spec.seed, index)
    style = STYLES[index % len(STYLES)] if spec.style == "mixed" else spec.style
    clean, masks, gap = render_clean(spec, style, rng)
    image = _apply_noise(clean, style, spec, rng)
    return SynthCase(
        image=image,
        masks=masks,
        case_id=f"case{index:05d}",
        style=style,
        pre_noise_gap=gap,
    )


def generate_dataset(spec: SynthSpec, n: int, groups: int | None = None) -> list[SynthCase]:
    """n deterministic scenes with group ids suitable for grouped splitting.

    Scenes are dealt round-robin across styles when style is "mixed" and into
    ``groups`` buckets (default: about one group per 40 scenes, at least 10)
    that never mix styles, standing in for scan-level grouping.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    if groups is None:
        groups = max(10, round(n / 40))
    cases = []
    for index in range(n):
        case = generate_case(spec, index)
        bucket = index % groups
        case.group_id = f"{case.style}-grp{bucket:03d}"
        cases.append(case)
    return cases


def flatten_cases(cases: list[SynthCase]) -> list[Sample]:
    """One Sample per (scene, object): the unit the trainer and scorer consume."""
    samples = []
    for case in cases:
        for obj_index, mask in enumerate(case.masks):
            samples.append(
                Sample(
                    image=case.image,
                    mask=mask,
                    group_id=case.group_id,
                    case_id=f"{case.case_id}-obj{obj_index}",
                    task=case.style,
                )
            )
    return samples


def dataset_digest(samples: list[Sample]) -> str:
    """Order-sensitive content hash used by determinism checks."""
    h = hashlib.sha256()
    for sample in samples:
        h.update(sample.image.tobytes())
        h.update(sample.mask.tobytes())
        h.update(sample.case_id.encode())
        h.update(sample.group_id.encode())
    return h.hexdigest()


def save_dataset(cases: list[SynthCase], directory: str) -> dict:
    """Write scenes as container files plus a JSON index; returns the index."""
    import json
    import os

    from .iohub import write_volume

    os.makedirs(directory, exist_ok=True)
    index = {"cases": []}
    for case in cases:
        image_name = f"{case.case_id}.miv"
        write_volume(os.path.join(directory, image_name), case.image.astype(np.float32))
        mask_names = []
        for obj_index, mask in enumerate(case.masks):
            mask_name = f"{case.case_id}_obj{obj_index}.miv"
            write_volume(os.path.join(directory, mask_name), mask.astype(np.uint8))
            mask_names.append(mask_name)
        index["cases"].append(
            {
                "case_id": case.case_id,
                "style": case.style,
                "group_id": case.group_id,
                "image": image_name,
                "masks": mask_names,
                "pre_noise_gap": case.pre_noise_gap,
            }
        )
    with open(os.path.join(directory, "index.json"), "w") as fh:
        json.dump(index, fh, indent=2)
    return index


def load_dataset(directory: str) -> list[SynthCase]:
    """Read back a save_dataset directory."""
    import json
    import os

    from .iohub import read_volume

    with open(os.path.join(directory, "index.json")) as fh:
        index = json.load(fh)
    cases = []
    for entry in index["cases"]:
        image = read_volume(os.path.join(directory, entry["image"])).data
        masks = [
            read_volume(os.path.join(directory, name)).data for name in entry["masks"]
        ]
        cases.append(
            SynthCase(
                image=image.astype(np.float32),
                masks=[m.astype(np.uint8) for m in masks],
                group_id=entry["group_id"],
                case_id=entry["case_id"],
                style=entry["style"],
                pre_noise_gap=float(entry.get("pre_noise_gap", 0.0)),
            )
        )
    return cases


# ---------------------------------------------------------------------------
# Tumor volumes for the annotation-assist harness
# ---------------------------------------------------------------------------

TUMOR_HU = 120.0
BODY_HU = 0.0


def generate_tumor_volume(
    spec: SynthSpec, depth: int
) -> tuple[Volume, np.ndarray]:
    """CT-flavored volume with one smooth tumor; returns (volume, 3D mask).

    The per-slice radius follows a raised-cosine profile and the center
    drifts slowly, so adjacent slices' tight boxes differ by a few pixels at
    most. Intensities are HU-like and map through the soft-tissue window.
    """
    if depth < 5:
        raise ConfigError("tumor volumes need depth >= 5")
    rng = _case_rng(spec.seed, depth * 1009)
    size = spec.image_size
    # the raised-cosine slope peaks at r_max * pi / depth per slice; capping
    # r_max by the depth keeps adjacent tight boxes within the 4 px budget
    r_max = min(size * rng.uniform(0.16, 0.21), 0.9 * depth)
    cy0 = rng.uniform(size * 0.35, size * 0.65)
    cx0 = rng.uniform(size * 0.35, size * 0.65)
    drift = rng.uniform(-0.6, 0.6, size=2)
    squash = rng.uniform(0.8, 1.0)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((depth, size, size), dtype=np.uint8)
    hu = np.full((depth, size, size), BODY_HU)
    for z in range(depth):
        # raised cosine: zero at the volume faces, peak mid-stack
        radius = r_max * 0.5 * (1.0 - np.cos(2.0 * np.pi * (z + 0.5) / depth))
        if radius < 1.0:
            continue
        cy = cy0 + drift[0] * (z - depth / 2)
        cx = cx0 + drift[1] * (z - depth / 2)
        inside = ((yy - cy) / radius) ** 2 + ((xx - cx) / (radius * squash)) ** 2 <= 1.0
        mask[z] = inside.astype(np.uint8)
        alpha = _soft_alpha(mask[z], spec.blur_sigma)
        hu[z] = BODY_HU * (1.0 - alpha) + TUMOR_HU * alpha
    hu += rng.normal(0.0, 4.0, size=hu.shape)
    volume = Volume(
        hu.astype(np.float32),
        Modality.CT,
        window=WindowSpec(400.0, 40.0),
        spacing=(2.0, 1.0, 1.0),
    )
    return volume, mask
