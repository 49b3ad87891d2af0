"""Annotation-assist pipeline tests."""

import json

import numpy as np
import pytest

from boxseg.annotate import (
    AnnotationSession,
    LinearMarker,
    assist_segment,
    export_session,
    interpolate_boxes,
    markers_from_mask,
    record_refinement,
    rect_from_marker,
    time_saving,
)
from boxseg.errors import MarkerError, SessionError, ShapeMismatchError
from boxseg.imgproc import Modality, Volume
from boxseg.iohub import read_volume
from boxseg.metrics import dsc
from boxseg.model import BoundingBox, init_params
from boxseg.train import MICRO_CONFIG


def marker(idx, long_axis, short_axis):
    return LinearMarker(idx, tuple(map(tuple, long_axis)), tuple(map(tuple, short_axis)))


# ---------------------------------------------------------------------------
# markers to rectangles
# ---------------------------------------------------------------------------


def test_rect_covers_all_endpoints_worked_example():
    m = marker(0, [(5, 10), (25, 30)], [(10, 25), (20, 15)])
    box = rect_from_marker(m, 64, 64)
    assert (box.x_min, box.y_min, box.x_max, box.y_max) == (5, 10, 25, 30)


def test_rect_expands_flat_markers_to_min_side():
    m = marker(0, [(10, 20), (30, 20)], [(15, 20), (25, 20)])  # zero height
    box = rect_from_marker(m, 64, 64)
    assert box.x_min == 10 and box.x_max == 30
    assert box.y_max - box.y_min == 3
    assert box.y_min <= 20 <= box.y_max


def test_rect_expansion_respects_borders():
    m = marker(0, [(0, 0), (5, 0)], [(1, 0), (4, 0)])  # flat on the top edge
    box = rect_from_marker(m, 64, 64)
    assert box.y_min == 0 and box.y_max == 3


def test_rect_always_contains_endpoints():
    rng = np.random.default_rng(0)
    for _ in range(100):
        pts = rng.uniform(0, 63.9, size=(4, 2))
        m = marker(0, pts[:2].tolist(), pts[2:].tolist())
        box = rect_from_marker(m, 64, 64)
        for x, y in m.endpoints():
            assert box.x_min <= x <= box.x_max
            assert box.y_min <= y <= box.y_max


def test_marker_validation():
    with pytest.raises(MarkerError):
        rect_from_marker(marker(0, [(70, 5), (5, 5)], [(1, 1), (2, 2)]), 64, 64)
    with pytest.raises(MarkerError):
        rect_from_marker(marker(0, [(-1, 5), (5, 5)], [(1, 1), (2, 2)]), 64, 64)
    with pytest.raises(MarkerError):
        m = marker(0, [(1, 1), (2, 2)], [(1, 1), (2, 2)])  # same segment twice
        rect_from_marker(m, 64, 64)


# ---------------------------------------------------------------------------
# box interpolation
# ---------------------------------------------------------------------------


def test_interpolation_worked_example():
    labeled = {
        0: BoundingBox(10, 10, 20, 20),
        4: BoundingBox(18, 10, 28, 24),
    }
    out = interpolate_boxes(labeled, (0, 5))
    assert out[2] == BoundingBox(14, 10, 24, 22)
    assert out[0] == labeled[0] and out[4] == labeled[4]
    assert out[1] == BoundingBox(12, 10, 22, 21)
    assert out[3] == BoundingBox(16, 10, 26, 23)


def test_interpolation_single_label_copies_everywhere():
    labeled = {3: BoundingBox(5, 6, 15, 18)}
    out = interpolate_boxes(labeled, (0, 8))
    assert all(out[k] == labeled[3] for k in range(8))


def test_interpolation_extrapolates_by_nearest_copy():
    labeled = {2: BoundingBox(4, 4, 10, 10), 5: BoundingBox(10, 4, 16, 10)}
    out = interpolate_boxes(labeled, (0, 9))
    assert out[0] == out[1] == labeled[2]
    assert out[6] == out[7] == out[8] == labeled[5]


def test_interpolation_is_monotone_per_coordinate():
    rng = np.random.default_rng(1)
    for _ in range(25):
        a = sorted(rng.integers(0, 30, size=2))
        b = sorted(rng.integers(0, 30, size=2))
        box_a = BoundingBox(a[0], b[0], a[1] + 2, b[1] + 2)
        c = sorted(rng.integers(0, 30, size=2))
        d = sorted(rng.integers(0, 30, size=2))
        box_b = BoundingBox(c[0], d[0], c[1] + 2, d[1] + 2)
        gap = int(rng.integers(2, 9))
        out = interpolate_boxes({0: box_a, gap: box_b}, (0, gap + 1))
        for coord in ("x_min", "y_min", "x_max", "y_max"):
            series = [getattr(out[k], coord) for k in range(gap + 1)]
            lo, hi = getattr(box_a, coord), getattr(box_b, coord)
            step = 1 if hi >= lo else -1
            assert series == sorted(series, reverse=step < 0)
            assert min(series) >= min(lo, hi) and max(series) <= max(lo, hi)


def test_interpolation_rejects_empty_map():
    with pytest.raises(MarkerError):
        interpolate_boxes({}, (0, 4))


# ---------------------------------------------------------------------------
# session bookkeeping
# ---------------------------------------------------------------------------


def test_timing_is_additive():
    session = AnnotationSession("vol", (16, 16))
    session.log_phase("marking", 12.5)
    session.log_phase("inference", 2.0)
    session.log_phase("refinement", 5.5)
    session.log_phase("refinement", 1.0)
    assert session.total_time() == pytest.approx(21.0)
    assert session.phase_time("refinement") == pytest.approx(6.5)
    assert session.phase_time("marking") == pytest.approx(12.5)
    with pytest.raises(SessionError):
        session.log_phase("thinking", 1.0)
    with pytest.raises(SessionError):
        session.log_phase("marking", -0.1)


def test_time_saving_definition():
    assert time_saving(17.63, 100.0) == pytest.approx(0.8237)
    with pytest.raises(ValueError):
        time_saving(5.0, 0.0)


# ---------------------------------------------------------------------------
# full assist pipeline
# ---------------------------------------------------------------------------


def _flat_volume(depth=6, size=16):
    rng = np.random.default_rng(2)
    data = rng.uniform(0, 255, size=(depth, size, size)).astype(np.float32)
    return Volume(data, Modality.MR)


def _diag_marker(idx):
    return marker(idx, [(3, 3), (12, 12)], [(3, 12), (12, 3)])


def test_assist_covers_marked_span():
    volume = _flat_volume()
    params = init_params(MICRO_CONFIG)
    session = assist_segment(volume, [_diag_marker(1), _diag_marker(4)], params, MICRO_CONFIG)
    assert sorted(session.boxes) == [1, 2, 3, 4]
    assert sorted(session.model_masks) == [1, 2, 3, 4]
    for mask in session.model_masks.values():
        assert mask.shape == (16, 16)
        assert mask.dtype == np.uint8
    assert session.phase_time("inference") > 0.0
    assert sorted(session.markers) == [1, 4]


def test_assist_single_marker_single_slice():
    volume = _flat_volume()
    params = init_params(MICRO_CONFIG)
    session = assist_segment(volume, [_diag_marker(3)], params, MICRO_CONFIG)
    assert sorted(session.model_masks) == [3]


def test_assist_is_deterministic():
    volume = _flat_volume()
    params = init_params(MICRO_CONFIG)
    a = assist_segment(volume, [_diag_marker(0), _diag_marker(5)], params, MICRO_CONFIG)
    b = assist_segment(volume, [_diag_marker(0), _diag_marker(5)], params, MICRO_CONFIG)
    for k in a.model_masks:
        np.testing.assert_array_equal(a.model_masks[k], b.model_masks[k])


def test_assist_validation_errors():
    volume = _flat_volume()
    params = init_params(MICRO_CONFIG)
    with pytest.raises(MarkerError):
        assist_segment(volume, [], params, MICRO_CONFIG)
    with pytest.raises(MarkerError):
        assist_segment(volume, [_diag_marker(11)], params, MICRO_CONFIG)
    with pytest.raises(MarkerError):
        assist_segment(volume, [_diag_marker(2), _diag_marker(2)], params, MICRO_CONFIG)
    wrong = Volume(np.zeros((4, 32, 32), dtype=np.float32), Modality.MR)
    with pytest.raises(ShapeMismatchError):
        assist_segment(wrong, [_diag_marker(0)], params, MICRO_CONFIG)


def test_refinement_requires_model_mask():
    volume = _flat_volume()
    params = init_params(MICRO_CONFIG)
    session = assist_segment(volume, [_diag_marker(2)], params, MICRO_CONFIG)
    refined = session.model_masks[2].copy()
    refined[0, 0] ^= 1
    record_refinement(session, 2, refined, duration=3.0)
    np.testing.assert_array_equal(session.refined_masks[2], refined)
    assert session.phase_time("refinement") == pytest.approx(3.0)
    with pytest.raises(SessionError):
        record_refinement(session, 0, refined, duration=1.0)
    with pytest.raises(ShapeMismatchError):
        record_refinement(session, 2, np.zeros((8, 8)), duration=1.0)


def test_identical_refinement_scores_one():
    volume = _flat_volume()
    params = init_params(MICRO_CONFIG)
    session = assist_segment(volume, [_diag_marker(2)], params, MICRO_CONFIG)
    record_refinement(session, 2, session.model_masks[2], duration=0.5)
    assert dsc(session.model_masks[2], session.refined_masks[2]) == 1.0


def test_export_roundtrip(tmp_path):
    volume = _flat_volume()
    params = init_params(MICRO_CONFIG)
    session = assist_segment(volume, [_diag_marker(1), _diag_marker(4)], params, MICRO_CONFIG)
    record_refinement(session, 2, session.model_masks[2], duration=1.5)
    manifest = export_session(session, str(tmp_path))

    on_disk = json.loads((tmp_path / "session.json").read_text())
    assert on_disk == manifest
    assert manifest["model_slices"] == [1, 2, 3, 4]
    assert manifest["refined_slices"] == [2]
    assert manifest["total_time"] == pytest.approx(session.total_time())
    assert set(manifest["boxes"]) == {"1", "2", "3", "4"}

    model_stack = read_volume(str(tmp_path / manifest["model_masks"])).data
    assert model_stack.shape == (4, 16, 16)
    for row, k in enumerate(manifest["model_slices"]):
        np.testing.assert_array_equal(model_stack[row], session.model_masks[k])


# ---------------------------------------------------------------------------
# synthesized markers (harness stand-in for a human annotator)
# ---------------------------------------------------------------------------


def test_markers_from_mask_spans_the_blob():
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[8:20, 10:25] = 1
    m = markers_from_mask(mask, slice_index=7)
    assert m.slice_index == 7
    box = rect_from_marker(m, 32, 32)
    assert box.x_min <= 10 and box.x_max >= 24
    assert box.y_min <= 8 and box.y_max >= 19
    (x1, y1), (x2, y2) = m.long_axis
    long_len = np.hypot(x2 - x1, y2 - y1)
    (x3, y3), (x4, y4) = m.short_axis
    short_len = np.hypot(x4 - x3, y4 - y3)
    assert long_len >= short_len


def test_markers_from_mask_single_pixel():
    mask = np.zeros((16, 16), dtype=np.uint8)
    mask[5, 5] = 1
    m = markers_from_mask(mask, 0)
    m.validate(16, 16)
    with pytest.raises(MarkerError):
        markers_from_mask(np.zeros((16, 16), dtype=np.uint8), 0)
