"""Bit-exact file formats: MIV1 volume container, checkpoints, RLE masks, PNG.

Everything numerical goes through MIV1 (a magic + JSON header + raw
little-endian payload container); PNG is only for 2D display surfaces.
Files are written atomically (temp file + rename), so concurrent readers
never observe a partial file. Decoders validate before allocating and raise
only the structured errors from :mod:`boxseg.errors` on malformed input.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import (
    ChecksumError,
    CheckpointVersionError,
    HeaderConsistencyError,
    MagicMismatchError,
    MissingParameterError,
    RleError,
    TruncatedPayloadError,
)
from .imgproc import ImagePlane, Modality, Volume, WindowSpec, round_half_away

VOLUME_MAGIC = b"MIV1"
CHECKPOINT_MAGIC = b"BSC1"
CHECKPOINT_VERSION = 1

_DTYPES = {"u8": np.uint8, "f32": np.float32}


def _atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class VolumeContainer:
    """Decoded MIV1 file: raw array plus the self-describing header fields."""

    data: np.ndarray
    dtype: str
    spacing: tuple[float, ...] | None = None
    modality: str | None = None
    window: dict | None = None


def write_volume(
    path: str,
    data: np.ndarray,
    *,
    spacing=None,
    modality: str | None = None,
    window: dict | None = None,
) -> None:
    """Write an array (u8 or f32) as an MIV1 container."""
    arr = np.ascontiguousarray(data)
    if arr.dtype.byteorder == ">":  # big-endian arrays normalized on write
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    if arr.dtype == np.uint8:
        dtype = "u8"
    elif arr.dtype == np.float32:
        dtype = "f32"
    else:
        raise ValueError(f"MIV1 stores u8 or f32, got {arr.dtype}")
    header = {"dims": list(arr.shape), "dtype": dtype}
    if spacing is not None:
        header["spacing"] = list(spacing)
    if modality is not None:
        header["modality"] = modality
    if window is not None:
        header["window"] = window
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = VOLUME_MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + arr.tobytes()
    _atomic_write(path, payload)


def volume_to_container_args(volume: Volume) -> dict:
    window = None
    if volume.window is not None:
        window = {"width": volume.window.width, "level": volume.window.level}
    return {
        "spacing": volume.spacing,
        "modality": volume.modality.value,
        "window": window,
    }


def read_volume(path: str) -> VolumeContainer:
    with open(path, "rb") as fh:
        blob = fh.read()
    return decode_volume(blob)


def decode_volume(blob: bytes) -> VolumeContainer:
    if len(blob) < 8:
        raise TruncatedPayloadError(f"file too short for MIV1 preamble ({len(blob)} bytes)")
    if blob[:4] != VOLUME_MAGIC:
        raise MagicMismatchError(f"expected magic {VOLUME_MAGIC!r}, got {blob[:4]!r}")
    (header_len,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + header_len:
        raise TruncatedPayloadError("declared header extends past end of file")
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderConsistencyError(f"header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise HeaderConsistencyError("header must be a JSON object")
    dims = header.get("dims")
    dtype = header.get("dtype")
    if (
        not isinstance(dims, list)
        or not dims
        or not all(isinstance(d, int) and d > 0 for d in dims)
    ):
        raise HeaderConsistencyError(f"dims must be a list of positive ints, got {dims!r}")
    if dtype not in _DTYPES:
        raise HeaderConsistencyError(f"dtype must be one of {sorted(_DTYPES)}, got {dtype!r}")
    expected = math.prod(dims) * np.dtype(_DTYPES[dtype]).itemsize
    payload = blob[8 + header_len :]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"payload has {len(payload)} bytes, dims require {expected}"
        )
    if len(payload) > expected:
        raise HeaderConsistencyError(
            f"payload has {len(payload)} bytes, dims require {expected}"
        )
    data = np.frombuffer(payload, dtype=np.dtype(_DTYPES[dtype]).newbyteorder("<"))
    data = data.astype(_DTYPES[dtype]).reshape(dims)
    spacing = header.get("spacing")
    if spacing is not None:
        if not isinstance(spacing, list) or not all(
            isinstance(s, (int, float)) and not isinstance(s, bool) for s in spacing
        ):
            raise HeaderConsistencyError(
                f"spacing must be a list of numbers, got {spacing!r}"
            )
        spacing = tuple(spacing)
    return VolumeContainer(
        data=data,
        dtype=dtype,
        spacing=spacing,
        modality=header.get("modality"),
        window=header.get("window"),
    )


def container_to_volume(container: VolumeContainer) -> Volume:
    """Interpret a 3D f32 container as an imgproc Volume."""
    if container.data.ndim != 3:
        raise HeaderConsistencyError(f"expected 3 dims for a volume, got {container.data.ndim}")
    try:
        modality = Modality(container.modality) if container.modality else Modality.MR
    except ValueError as exc:
        raise HeaderConsistencyError(f"unknown modality {container.modality!r}") from exc
    window = None
    if container.window is not None:
        if not isinstance(container.window, dict) or not {"width", "level"} <= set(container.window):
            raise HeaderConsistencyError(f"malformed window {container.window!r}")
        try:
            window = WindowSpec(float(container.window["width"]), float(container.window["level"]))
        except (TypeError, ValueError) as exc:
            raise HeaderConsistencyError(f"malformed window {container.window!r}") from exc
    return Volume(
        container.data.astype(np.float32),
        modality,
        window=window,
        spacing=container.spacing,
    )


# ---------------------------------------------------------------------------
# Run-length encoded masks (wire format for the HTTP service)
# ---------------------------------------------------------------------------


@dataclass
class RleMask:
    """Alternating run lengths over the row-major flattening, zero run first."""

    dims: tuple[int, ...]
    counts: list[int] = field(default_factory=list)


def rle_encode(mask: np.ndarray) -> RleMask:
    mask = np.asarray(mask)
    flat = (mask.reshape(-1) != 0).astype(np.int8)
    if flat.size == 0:
        return RleMask(dims=tuple(mask.shape), counts=[0])
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0] == 1:  # encoding always starts with the zero run
        counts = [0] + counts
    return RleMask(dims=tuple(mask.shape), counts=[int(c) for c in counts])


def rle_decode(rle: RleMask) -> np.ndarray:
    dims = tuple(rle.dims)
    counts = list(rle.counts)
    if not dims or any(not isinstance(d, int) or d <= 0 for d in dims):
        raise RleError(f"dims must be positive ints, got {dims!r}")
    if not counts:
        raise RleError("counts must be non-empty")
    if any(not isinstance(c, int) or c < 0 for c in counts):
        raise RleError("counts must be non-negative ints")
    if counts[0] < 0 or any(c < 1 for c in counts[1:]):
        raise RleError("only the leading zero run may be empty")
    total = sum(counts)
    expected = math.prod(dims)
    if total != expected:
        raise RleError(f"counts sum to {total}, dims require {expected}")
    values = np.zeros(len(counts), dtype=np.uint8)
    values[1::2] = 1
    return np.repeat(values, counts).reshape(dims)


def rle_to_json(rle: RleMask) -> dict:
    return {"dims": list(rle.dims), "counts": list(rle.counts)}


def rle_from_json(obj: dict) -> RleMask:
    if not isinstance(obj, dict) or "dims" not in obj or "counts" not in obj:
        raise RleError(f"RLE JSON needs dims and counts, got {obj!r}")
    dims = obj["dims"]
    counts = obj["counts"]
    if not isinstance(dims, list) or not isinstance(counts, list):
        raise RleError("dims and counts must be lists")
    try:
        return RleMask(dims=tuple(int(d) for d in dims), counts=[int(c) for c in counts])
    except (TypeError, ValueError) as exc:
        raise RleError(f"dims and counts must hold integers: {exc}") from exc


# ---------------------------------------------------------------------------
# Model checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str, params, config) -> str:
    """Persist a ParameterSet + ModelConfig; returns the blob's sha256 hex digest.

    Layout: magic, u32 manifest length, JSON manifest (format version, config,
    name -> {shape, offset, length} table, blob hash), then a single
    little-endian float32 blob holding every array in sorted name order.
    """
    names = sorted(params.arrays)
    table = {}
    chunks = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(params.arrays[name], dtype="<f4")
        raw = arr.tobytes()
        table[name] = {"shape": list(arr.shape), "offset": offset, "length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    digest = hashlib.sha256(blob).hexdigest()
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "params": table,
        "blob_sha256": digest,
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    payload = CHECKPOINT_MAGIC + struct.pack("<I", len(manifest_bytes)) + manifest_bytes + blob
    _atomic_write(path, payload)
    return digest


def load_checkpoint(path: str):
    """Read a checkpoint back; returns (ParameterSet, ModelConfig, blob sha256)."""
    from .model import ModelConfig, ParameterSet, parameter_shapes

    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise TruncatedPayloadError(f"file too short for checkpoint preamble ({len(blob)} bytes)")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise MagicMismatchError(f"expected magic {CHECKPOINT_MAGIC!r}, got {blob[:4]!r}")
    (manifest_len,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + manifest_len:
        raise TruncatedPayloadError("declared manifest extends past end of file")
    try:
        manifest = json.loads(blob[8 : 8 + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderConsistencyError(f"manifest is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(manifest, dict):
        raise HeaderConsistencyError("manifest must be a JSON object")
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"unsupported format_version {manifest.get('format_version')!r}"
        )
    for key in ("config", "params", "blob_sha256"):
        if key not in manifest:
            raise HeaderConsistencyError(f"manifest is missing {key!r}")
    try:
        config = ModelConfig.from_dict(manifest["config"])
    except (TypeError, ValueError, KeyError) as exc:
        raise HeaderConsistencyError(f"malformed config: {exc}") from exc

    raw = blob[8 + manifest_len :]
    digest = hashlib.sha256(raw).hexdigest()
    if digest != manifest["blob_sha256"]:
        raise ChecksumError(
            f"blob sha256 {digest} does not match manifest {manifest['blob_sha256']}"
        )

    table = manifest["params"]
    if not isinstance(table, dict):
        raise HeaderConsistencyError("parameter table must be a JSON object")
    expected = parameter_shapes(config)
    for name in expected:
        if name not in table:
            raise MissingParameterError(name)
    for name in table:
        if name not in expected:
            raise HeaderConsistencyError(f"unexpected parameter {name!r} in manifest")

    spans = []
    arrays = {}
    for name, entry in table.items():
        if not isinstance(entry, dict) or not {"shape", "offset", "length"} <= set(entry):
            raise HeaderConsistencyError(f"malformed table entry for {name!r}")
        shape = entry["shape"]
        offset = entry["offset"]
        length = entry["length"]
        if (
            not isinstance(shape, list)
            or not all(isinstance(d, int) and d >= 0 for d in shape)
            or not isinstance(offset, int)
            or not isinstance(length, int)
            or offset < 0
            or length < 0
        ):
            raise HeaderConsistencyError(f"malformed table entry for {name!r}")
        if tuple(shape) != expected[name]:
            raise HeaderConsistencyError(
                f"parameter {name!r} has shape {shape}, config requires {list(expected[name])}"
            )
        if length != math.prod(shape) * 4:
            raise HeaderConsistencyError(f"parameter {name!r} length does not match its shape")
        if offset + length > len(raw):
            raise TruncatedPayloadError(f"parameter {name!r} extends past end of blob")
        spans.append((offset, offset + length))
        arr = np.frombuffer(raw[offset : offset + length], dtype="<f4").astype(np.float32)
        arrays[name] = arr.reshape(shape)
    spans.sort()
    cursor = 0
    for start, end in spans:
        if start != cursor:
            raise HeaderConsistencyError("parameter spans overlap or leave gaps in the blob")
        cursor = end
    if cursor != len(raw):
        raise HeaderConsistencyError("parameter spans do not cover the blob exactly")

    return ParameterSet(arrays), config, digest


# ---------------------------------------------------------------------------
# PNG for 2D display surfaces
# ---------------------------------------------------------------------------


def write_png(path: str, plane: ImagePlane | np.ndarray) -> None:
    """Write an 8-bit grayscale or RGB PNG from [0, 255] data."""
    data = plane.data if isinstance(plane, ImagePlane) else np.asarray(plane)
    if data.ndim == 2:
        data = data[:, :, None]
    arr = round_half_away(np.clip(data.astype(np.float64), 0, 255)).astype(np.uint8)
    if arr.shape[2] == 1:
        img = Image.fromarray(arr[:, :, 0], mode="L")
    elif arr.shape[2] == 3:
        img = Image.fromarray(arr, mode="RGB")
    else:
        raise ValueError(f"PNG planes need 1 or 3 channels, got {arr.shape[2]}")
    buf = _encode_png(img)
    _atomic_write(path, buf)


def png_bytes(plane: ImagePlane | np.ndarray) -> bytes:
    data = plane.data if isinstance(plane, ImagePlane) else np.asarray(plane)
    if data.ndim == 2:
        data = data[:, :, None]
    arr = round_half_away(np.clip(data.astype(np.float64), 0, 255)).astype(np.uint8)
    mode = "L" if arr.shape[2] == 1 else "RGB"
    img = Image.fromarray(arr[:, :, 0] if mode == "L" else arr, mode=mode)
    return _encode_png(img)


def _encode_png(img: Image.Image) -> bytes:
    import io

    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def read_png(path: str) -> ImagePlane:
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB" if img.mode in ("RGBA", "P", "CMYK") else "L")
    arr = np.asarray(img, dtype=np.float32)
    return ImagePlane(arr)
