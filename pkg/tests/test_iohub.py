"""File format tests: MIV volumes, RLE masks, checkpoints, PNG planes.

Roundtrips must be bit-exact and every malformed input must surface as a
structured error, never as garbage data or an unhandled exception.
"""

import hashlib
import json
import struct

import numpy as np
import pytest

from boxseg.errors import (
    ChecksumError,
    CheckpointVersionError,
    FormatError,
    HeaderConsistencyError,
    MagicMismatchError,
    MissingParameterError,
    RleError,
    TruncatedPayloadError,
)
from boxseg.imgproc import ImagePlane, Modality, Volume, WindowSpec
from boxseg.iohub import (
    RleMask,
    container_to_volume,
    decode_volume,
    load_checkpoint,
    png_bytes,
    read_png,
    read_volume,
    rle_decode,
    rle_encode,
    rle_from_json,
    rle_to_json,
    save_checkpoint,
    volume_to_container_args,
    write_png,
    write_volume,
)
from boxseg.model import ModelConfig, init_params, predict
from boxseg.train import MICRO_CONFIG, tight_box


# ---------------------------------------------------------------------------
# MIV volume container
# ---------------------------------------------------------------------------


def test_f32_volume_roundtrips_bit_exactly(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.standard_normal((3, 5, 4)).astype(np.float32)
    path = str(tmp_path / "vol.miv")
    write_volume(path, data, spacing=(1.0, 0.5, 0.5), modality="ct",
                 window={"width": 400, "level": 40})
    back = read_volume(path)
    assert back.dtype == "f32"
    assert back.data.dtype == np.float32
    np.testing.assert_array_equal(back.data, data)
    assert back.data.tobytes() == data.tobytes()
    assert back.spacing == (1.0, 0.5, 0.5)
    assert back.modality == "ct"
    assert back.window == {"width": 400, "level": 40}


def test_u8_volume_roundtrips_bit_exactly(tmp_path):
    rng = np.random.default_rng(1)
    data = rng.integers(0, 256, size=(2, 6, 6), dtype=np.uint8)
    path = str(tmp_path / "vol.miv")
    write_volume(path, data)
    back = read_volume(path)
    assert back.dtype == "u8"
    np.testing.assert_array_equal(back.data, data)


def test_other_dtypes_are_rejected_at_write_time(tmp_path):
    with pytest.raises(ValueError):
        write_volume(str(tmp_path / "v.miv"), np.zeros((2, 2), dtype=np.float64))


def test_big_endian_input_normalizes_to_little_endian_file(tmp_path):
    data = np.arange(8, dtype=">f4").reshape(2, 4)
    path = str(tmp_path / "v.miv")
    write_volume(path, data)
    back = read_volume(path)
    np.testing.assert_array_equal(back.data, data.astype(np.float32))


def build_container(dims=(2, 2), dtype="u8", payload=None, header_extra=None,
                    magic=b"MIV1", header_override=None):
    header = {"dims": list(dims), "dtype": dtype}
    if header_extra:
        header.update(header_extra)
    hb = json.dumps(header).encode() if header_override is None else header_override
    if payload is None:
        n = 1
        for d in dims:
            n *= d
        payload = bytes(n * (1 if dtype == "u8" else 4))
    return magic + struct.pack("<I", len(hb)) + hb + payload


def test_magic_mismatch_is_its_own_error():
    with pytest.raises(MagicMismatchError):
        decode_volume(build_container(magic=b"MIV2"))


def test_short_file_reports_truncation():
    with pytest.raises(TruncatedPayloadError):
        decode_volume(b"MIV")
    with pytest.raises(TruncatedPayloadError):
        decode_volume(b"")


def test_header_length_past_eof_reports_truncation():
    blob = b"MIV1" + struct.pack("<I", 10_000) + b"{}"
    with pytest.raises(TruncatedPayloadError):
        decode_volume(blob)


def test_short_payload_reports_truncation():
    blob = build_container(dims=(4, 4), payload=b"\x00" * 3)
    with pytest.raises(TruncatedPayloadError):
        decode_volume(blob)


def test_excess_payload_is_a_consistency_error():
    blob = build_container(dims=(2, 2), payload=b"\x00" * 9)
    with pytest.raises(HeaderConsistencyError):
        decode_volume(blob)


def test_non_json_header_is_a_consistency_error():
    blob = build_container(header_override=b"\xff\xfe not json")
    with pytest.raises(HeaderConsistencyError):
        decode_volume(blob)


@pytest.mark.parametrize(
    "header",
    [
        {"dims": [0, 4], "dtype": "u8"},
        {"dims": [-1], "dtype": "u8"},
        {"dims": "nope", "dtype": "u8"},
        {"dims": [2, 2], "dtype": "i64"},
        {"dtype": "u8"},
        {"dims": [2, 2]},
    ],
)
def test_malformed_headers_are_consistency_errors(header):
    hb = json.dumps(header).encode()
    blob = b"MIV1" + struct.pack("<I", len(hb)) + hb + bytes(64)
    with pytest.raises(HeaderConsistencyError):
        decode_volume(blob)


def test_every_decode_error_is_a_format_error():
    for exc in (MagicMismatchError, TruncatedPayloadError, HeaderConsistencyError,
                ChecksumError, CheckpointVersionError, RleError):
        assert issubclass(exc, FormatError)


def test_container_volume_bridge_carries_metadata(tmp_path):
    vol = Volume(
        np.zeros((2, 3, 3), dtype=np.float32),
        Modality.CT,
        window=WindowSpec(400, 40),
        spacing=(2.0, 1.0, 1.0),
    )
    path = str(tmp_path / "v.miv")
    write_volume(path, vol.data, **volume_to_container_args(vol))
    back = container_to_volume(read_volume(path))
    assert back.modality is Modality.CT
    assert back.window.width == 400 and back.window.level == 40
    assert back.spacing == (2.0, 1.0, 1.0)


def test_container_to_volume_rejects_non_3d_and_bad_modality():
    from boxseg.iohub import VolumeContainer

    with pytest.raises(HeaderConsistencyError):
        container_to_volume(VolumeContainer(np.zeros((2, 2), np.float32), "f32"))
    with pytest.raises(HeaderConsistencyError):
        container_to_volume(
            VolumeContainer(np.zeros((1, 2, 2), np.float32), "f32", modality="petscan")
        )


# ---------------------------------------------------------------------------
# RLE masks
# ---------------------------------------------------------------------------


def test_rle_counts_start_with_zero_run():
    rle = rle_encode(np.array([0, 0, 1, 1, 0], dtype=np.uint8))
    assert rle.counts == [2, 2, 1]
    assert rle.dims == (5,)


def test_rle_all_ones_gets_empty_leading_run():
    rle = rle_encode(np.ones(4, dtype=np.uint8))
    assert rle.counts == [0, 4]


def test_rle_all_zeros():
    rle = rle_encode(np.zeros((2, 3), dtype=np.uint8))
    assert rle.counts == [6]
    np.testing.assert_array_equal(rle_decode(rle), np.zeros((2, 3), dtype=np.uint8))


def test_rle_decode_inverts_encode_on_random_masks():
    rng = np.random.default_rng(42)
    for trial in range(1000):
        shape = tuple(rng.integers(1, 12, size=rng.integers(1, 4)))
        mask = (rng.uniform(size=shape) > rng.uniform(0.05, 0.95)).astype(np.uint8)
        back = rle_decode(rle_encode(mask))
        np.testing.assert_array_equal(back, mask)


def test_rle_rejects_count_sum_mismatch():
    with pytest.raises(RleError):
        rle_decode(RleMask(dims=(4,), counts=[2, 1]))


def test_rle_rejects_zero_interior_runs():
    with pytest.raises(RleError):
        rle_decode(RleMask(dims=(4,), counts=[2, 0, 2]))


def test_rle_rejects_bad_dims_and_counts():
    with pytest.raises(RleError):
        rle_decode(RleMask(dims=(), counts=[1]))
    with pytest.raises(RleError):
        rle_decode(RleMask(dims=(0,), counts=[0]))
    with pytest.raises(RleError):
        rle_decode(RleMask(dims=(3,), counts=[]))
    with pytest.raises(RleError):
        rle_decode(RleMask(dims=(3,), counts=[-1, 4]))


def test_rle_json_bridge_roundtrips():
    mask = np.array([[1, 1, 0], [0, 1, 0]], dtype=np.uint8)
    rle = rle_encode(mask)
    wire = json.dumps(rle_to_json(rle))
    back = rle_from_json(json.loads(wire))
    np.testing.assert_array_equal(rle_decode(back), mask)


def test_rle_json_rejects_missing_fields():
    with pytest.raises(RleError):
        rle_from_json({"dims": [2]})
    with pytest.raises(RleError):
        rle_from_json({"dims": 4, "counts": [4]})


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def micro_checkpoint(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("ckpt") / "model.bsc")
    params = init_params(MICRO_CONFIG)
    digest = save_checkpoint(path, params, MICRO_CONFIG)
    return path, params, digest


def test_checkpoint_roundtrips_every_array_bit_exactly(micro_checkpoint):
    path, params, digest = micro_checkpoint
    loaded, config, loaded_digest = load_checkpoint(path)
    assert loaded_digest == digest
    assert config == MICRO_CONFIG
    assert set(loaded.arrays) == set(params.arrays)
    for name, arr in params.arrays.items():
        np.testing.assert_array_equal(loaded.arrays[name], arr)
        assert loaded.arrays[name].tobytes() == arr.tobytes()


def test_checkpoint_digest_is_sha256_of_blob(micro_checkpoint):
    path, _, digest = micro_checkpoint
    blob = open(path, "rb").read()
    (manifest_len,) = struct.unpack("<I", blob[4:8])
    manifest = json.loads(blob[8 : 8 + manifest_len])
    raw = blob[8 + manifest_len :]
    assert hashlib.sha256(raw).hexdigest() == digest == manifest["blob_sha256"]


def test_loaded_checkpoint_predicts_identically(micro_checkpoint):
    path, params, _ = micro_checkpoint
    loaded, config, _ = load_checkpoint(path)
    rng = np.random.default_rng(9)
    image = ImagePlane(rng.uniform(0, 255, size=(16, 16, 3)).astype(np.float32))
    gt = np.zeros((16, 16))
    gt[5:10, 6:12] = 1
    box = tight_box(gt)
    a = predict(image, box, params, MICRO_CONFIG)
    b = predict(image, box, loaded, config)
    np.testing.assert_array_equal(a.probability, b.probability)
    assert a.confidence == b.confidence


def test_flipped_blob_byte_fails_the_checksum(micro_checkpoint, tmp_path):
    path, _, _ = micro_checkpoint
    blob = bytearray(open(path, "rb").read())
    blob[-1] ^= 0xFF
    bad = tmp_path / "bad.bsc"
    bad.write_bytes(blob)
    with pytest.raises(ChecksumError):
        load_checkpoint(str(bad))


def corrupt_manifest(path, tmp_path, mutate):
    blob = open(path, "rb").read()
    (manifest_len,) = struct.unpack("<I", blob[4:8])
    manifest = json.loads(blob[8 : 8 + manifest_len])
    raw = blob[8 + manifest_len :]
    manifest, raw = mutate(manifest, raw)
    mb = json.dumps(manifest, sort_keys=True).encode()
    out = tmp_path / "mutated.bsc"
    out.write_bytes(b"BSC1" + struct.pack("<I", len(mb)) + mb + raw)
    return str(out)


def test_version_bump_is_rejected(micro_checkpoint, tmp_path):
    path, _, _ = micro_checkpoint

    def mutate(manifest, raw):
        manifest["format_version"] = 2
        return manifest, raw

    with pytest.raises(CheckpointVersionError):
        load_checkpoint(corrupt_manifest(path, tmp_path, mutate))


def test_missing_parameter_is_named_in_the_error(micro_checkpoint, tmp_path):
    path, _, _ = micro_checkpoint

    def mutate(manifest, raw):
        entry = manifest["params"].pop("decoder.output_token")
        # keep blob coverage plausible so the missing name is what trips
        manifest["blob_sha256"] = hashlib.sha256(raw).hexdigest()
        del entry
        return manifest, raw

    with pytest.raises(MissingParameterError) as err:
        load_checkpoint(corrupt_manifest(path, tmp_path, mutate))
    assert "decoder.output_token" in str(err.value)


def test_unexpected_parameter_is_rejected(micro_checkpoint, tmp_path):
    path, _, _ = micro_checkpoint

    def mutate(manifest, raw):
        manifest["params"]["extra.weight"] = {"shape": [1], "offset": 0, "length": 4}
        return manifest, raw

    with pytest.raises(HeaderConsistencyError):
        load_checkpoint(corrupt_manifest(path, tmp_path, mutate))


def test_shape_mismatch_against_config_is_rejected(micro_checkpoint, tmp_path):
    path, _, _ = micro_checkpoint

    def mutate(manifest, raw):
        manifest["params"]["decoder.output_token"]["shape"] = [3]
        return manifest, raw

    with pytest.raises(HeaderConsistencyError):
        load_checkpoint(corrupt_manifest(path, tmp_path, mutate))


def test_span_gaps_are_rejected(micro_checkpoint, tmp_path):
    path, _, _ = micro_checkpoint

    def mutate(manifest, raw):
        raw = raw + b"\x00\x00\x00\x00"  # orphan bytes no span covers
        manifest["blob_sha256"] = hashlib.sha256(raw).hexdigest()
        return manifest, raw

    with pytest.raises(HeaderConsistencyError):
        load_checkpoint(corrupt_manifest(path, tmp_path, mutate))


def test_checkpoint_magic_and_truncation(tmp_path):
    p = tmp_path / "x.bsc"
    p.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(MagicMismatchError):
        load_checkpoint(str(p))
    p.write_bytes(b"BS")
    with pytest.raises(TruncatedPayloadError):
        load_checkpoint(str(p))


def test_checkpoint_write_is_atomic_replace(tmp_path):
    # overwriting must leave either the old or the new file, never a partial
    path = str(tmp_path / "model.bsc")
    params = init_params(MICRO_CONFIG)
    save_checkpoint(path, params, MICRO_CONFIG)
    first = open(path, "rb").read()
    save_checkpoint(path, params, MICRO_CONFIG)
    second = open(path, "rb").read()
    assert first == second
    assert [f.name for f in tmp_path.iterdir()] == ["model.bsc"]  # no temp litter


# ---------------------------------------------------------------------------
# PNG planes
# ---------------------------------------------------------------------------


def test_gray_png_roundtrips(tmp_path):
    rng = np.random.default_rng(17)
    plane = ImagePlane(rng.integers(0, 256, size=(9, 7)).astype(np.float32))
    path = str(tmp_path / "g.png")
    write_png(path, plane)
    back = read_png(path)
    assert back.channels == 1
    np.testing.assert_array_equal(back.data, plane.data)


def test_rgb_png_roundtrips(tmp_path):
    rng = np.random.default_rng(18)
    plane = ImagePlane(rng.integers(0, 256, size=(5, 8, 3)).astype(np.float32))
    path = str(tmp_path / "c.png")
    write_png(path, plane)
    back = read_png(path)
    assert back.channels == 3
    np.testing.assert_array_equal(back.data, plane.data)


def test_png_bytes_matches_file_output(tmp_path):
    plane = ImagePlane(np.arange(12, dtype=np.float32).reshape(3, 4))
    path = str(tmp_path / "p.png")
    write_png(path, plane)
    assert open(path, "rb").read() == png_bytes(plane)
