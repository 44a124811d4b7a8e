import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from storefront.geometry import (Box, CropPlanConfig, CropScale, CropSpec, Detection, InvalidBoxError,
                                 NoIntersectionError, CropPlanError, crop_to_pano, crop_to_pano_array,
                                 detection_from_json, detection_to_json, edge_filter, grid_counts, jaccard,
                                 jaccard_matrix, jaccard_wrapped, nms, pano_to_crop, plan_crops, read_boxes,
                                 read_detections, sort_detections, split_at_seam, write_boxes, write_detections)

from conftest import det, random_box, random_boxes


def raster_jaccard(a: Box, b: Box, res: int = 1000) -> float:
    """Pixel-count overlap on a res x res grid of cell centres."""
    c = (np.arange(res) + 0.5) / res
    def mask(bx):
        mx = (c >= bx.x_min) & (c < bx.x_max)
        my = (c >= bx.y_min) & (c < bx.y_max)
        return my[:, None] & mx[None, :]
    ma, mb = mask(a), mask(b)
    union = np.count_nonzero(ma | mb)
    return np.count_nonzero(ma & mb) / union if union else 0.0


box_st = st.tuples(st.floats(0, 0.9), st.floats(0, 0.9), st.floats(0.01, 0.5), st.floats(0.01, 0.5)).map(
    lambda t: Box(t[0], t[1], t[0] + t[2], t[1] + t[3]))


# -- Box and jaccard ---------------------------------------------------------

def test_box_rejects_degenerate_and_nonfinite():
    with pytest.raises(InvalidBoxError):
        Box(0.5, 0.1, 0.5, 0.2)
    with pytest.raises(InvalidBoxError):
        Box(0.1, 0.3, 0.2, 0.2)
    with pytest.raises(InvalidBoxError):
        Box(0.0, 0.0, float("nan"), 1.0)


def test_jaccard_examples():
    a = Box(0, 0, 0.5, 0.5)
    assert jaccard(a, a) == 1.0
    assert jaccard(Box(0, 0, 0.1, 0.1), Box(0.5, 0.5, 0.6, 0.6)) == 0.0
    oracle = raster_jaccard(Box(0, 0, 0.2, 0.2), Box(0.1, 0.1, 0.3, 0.3))
    assert oracle == pytest.approx(1 / 7, abs=1e-3)
    assert jaccard(Box(0, 0, 0.2, 0.2), Box(0.1, 0.1, 0.3, 0.3)) == pytest.approx(oracle, abs=2e-3)
    assert jaccard(Box(0, 0, 0.2, 0.2), Box(0.1, 0.1, 0.3, 0.3)) == pytest.approx(1 / 7, abs=1e-12)


def test_jaccard_matches_raster_oracle_on_random_pairs(rng):
    # corners on the 1/1000 lattice so the pixel count is exact
    def lattice_box(centre=None):
        while True:
            if centre is None:
                x = np.sort(rng.integers(0, 1001, 2))
                y = np.sort(rng.integers(0, 1001, 2))
            else:
                x = np.sort(np.clip(centre[0] + rng.integers(-150, 151, 2), 0, 1000))
                y = np.sort(np.clip(centre[1] + rng.integers(-150, 151, 2), 0, 1000))
            if x[1] > x[0] and y[1] > y[0]:
                return Box(x[0] / 1000, y[0] / 1000, x[1] / 1000, y[1] / 1000)

    worst, overlapping = 0.0, 0
    for _ in range(1000):
        a = lattice_box()
        centre = (round((a.x_min + a.x_max) * 500), round((a.y_min + a.y_max) * 500))
        b = lattice_box(centre) if rng.random() < 0.5 else lattice_box()
        overlapping += jaccard(a, b) > 0
        worst = max(worst, abs(jaccard(a, b) - raster_jaccard(a, b)))
    assert overlapping > 300
    assert worst <= 2e-3


@given(box_st, box_st)
def test_jaccard_symmetric_and_bounded(a, b):
    v = jaccard(a, b)
    assert v == pytest.approx(jaccard(b, a), abs=1e-15)
    assert 0.0 <= v <= 1.0
    if v == 1.0:
        assert a.as_tuple() == pytest.approx(b.as_tuple(), abs=1e-12)


@given(st.lists(box_st, min_size=1, max_size=6), st.lists(box_st, min_size=1, max_size=6), st.booleans())
def test_jaccard_matrix_matches_scalar(a, b, wrap):
    m = jaccard_matrix(a, b, wrap=wrap)
    f = jaccard_wrapped if wrap else jaccard
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            assert m[i, j] == pytest.approx(f(x, y), abs=1e-12)


def test_wrapped_jaccard_sees_across_seam():
    a = Box(0.95, 0.2, 1.05, 0.4)   # straddles the seam
    b = Box(0.0, 0.2, 0.05, 0.4)
    assert jaccard(a, b) == 0.0
    assert jaccard_wrapped(a, b) == pytest.approx(0.5)


# -- NMS -----------------------------------------------------------------------

def brute_force_greedy(dets, thr):
    """Keep/drop decided by explicit loops over score order."""
    order = sorted(range(len(dets)), key=lambda k: (-dets[k].final_score, dets[k].box.as_tuple()))
    kept = []
    for k in order:
        ok = True
        for m in kept:
            if jaccard_wrapped(dets[k].box, dets[m].box) > thr:
                ok = False
        if ok:
            kept.append(k)
    return [dets[k] for k in kept]


def test_nms_examples():
    a = det((0.1, 0.1, 0.3, 0.3), 0.9)
    assert nms([a], 0.2) == [a]
    b = det((0.1, 0.1, 0.3, 0.3), 0.8)
    assert nms([b, a], 0.2) == [a]


def test_nms_three_box_example():
    A = det((0.0, 0.0, 0.3, 0.3), 0.9)
    # B: overlap 0.5 with A
    B = det((0.1, 0.0, 0.4, 0.3), 0.8)
    assert jaccard(A.box, B.box) == pytest.approx(0.5)
    C = det((0.22, 0.15, 0.52, 0.45), 0.7)
    assert jaccard(A.box, C.box) == pytest.approx(0.0714, abs=1e-3)
    assert jaccard(B.box, C.box) == pytest.approx(0.1765, abs=1e-3)
    out = nms([C, B, A], 0.2)
    assert out == [A, C]
    assert out == brute_force_greedy([A, B, C], 0.2)


def test_nms_matches_brute_force(rng):
    for _ in range(200):
        dets = [det(b, float(rng.uniform(0.01, 1))) for b in random_boxes(rng, int(rng.integers(0, 12)))]
        assert nms(dets, 0.2) == brute_force_greedy(dets, 0.2)


@given(st.lists(st.tuples(box_st, st.floats(0.01, 1.0)), max_size=10), st.floats(0.0, 0.9))
def test_nms_properties(items, thr):
    dets = [Detection(b, s) for b, s in items]
    out = nms(dets, thr)
    assert all(d in dets for d in out)
    for i in range(len(out)):
        for j in range(i + 1, len(out)):
            assert jaccard_wrapped(out[i].box, out[j].box) <= thr
    assert nms(out, thr) == out
    if dets:
        assert out[0] == sort_detections(dets)[0]
    assert [d.final_score for d in out] == sorted((d.final_score for d in out), reverse=True)


def test_nms_tie_break_is_deterministic():
    a = det((0.2, 0.2, 0.4, 0.4), 0.5)
    b = det((0.1, 0.2, 0.3, 0.4), 0.5)
    assert nms([a, b], 0.2) == nms([b, a], 0.2) == [b]


# -- crop planning ---------------------------------------------------------------

def raster_coverage(crops, W, H, band, res=4):
    """Every sample point of the band covered by some crop (x wraps)."""
    xs = (np.arange(int(W / res)) + 0.5) / (W / res)
    ys = np.linspace(band[0] + 1e-9, band[1] - 1e-9, 50)
    covered = np.zeros((len(ys), len(xs)), dtype=bool)
    for c in crops:
        inx = ((xs - c.x_offset) % 1.0) <= c.width + 1e-12
        iny = (ys >= c.y_offset - 1e-12) & (ys <= c.y_offset + c.height + 1e-12)
        covered |= iny[:, None] & inx[None, :]
    return covered.all()


def test_default_plan_has_87_crops():
    crops = plan_crops(13312, 6656)
    assert len(crops) == 87
    per_scale = [sum(c.scale_index == s for c in crops) for s in range(3)]
    assert per_scale == [3, 24, 60]


def test_plan_ordering_and_ids():
    crops = plan_crops(13312, 6656, panorama_id="x")
    keys = [(c.scale_index, c.row, c.col) for c in crops]
    assert keys == sorted(keys)
    assert len({c.crop_id for c in crops}) == 87


@pytest.mark.parametrize("W,H", [(13312, 6656), (1664, 832), (1000, 400)])
def test_plan_covers_band_and_overlaps(W, H):
    cfg = CropPlanConfig()
    crops = plan_crops(W, H, cfg)
    for s, scale in enumerate(cfg.scales):
        mine = [c for c in crops if c.scale_index == s]
        assert raster_coverage(mine, W, H, (scale.band_top, scale.band_bottom))
        # adjacent overlap along both axes, as a fraction of the crop side
        cols = sorted({c.x_offset for c in mine})
        rows = sorted({c.y_offset for c in mine})
        w, h = mine[0].width, mine[0].height
        if len(cols) > 1:
            steps = np.diff(cols + [cols[0] + 1.0])
            assert np.all((w - steps) / w >= cfg.min_overlap - 1e-9)
        if len(rows) > 1:
            assert np.all((h - np.diff(rows)) / h >= cfg.min_overlap - 1e-9)


def test_plan_count_matches_closed_form_and_raster():
    cfg = CropPlanConfig(scales=(CropScale(0.5, 0.0, 1.0),), min_overlap=0.2)
    W, H = 2000, 1000
    crops = plan_crops(W, H, cfg)
    rows, cols = grid_counts(0.5 * H, H, W, 0.2)
    assert len(crops) == rows * cols
    assert (rows, cols) == (math.ceil(0.5 / 0.4) + 1, math.ceil(2000 / 400))
    assert raster_coverage(crops, W, H, (0.0, 1.0))


def test_square_panorama_full_side_single_crop():
    crops = plan_crops(500, 500, CropPlanConfig(scales=(CropScale(1.0),)))
    assert len(crops) == 1
    c = crops[0]
    assert (c.x_offset, c.y_offset, c.width, c.height) == (0.0, 0.0, 1.0, 1.0)


def test_plan_errors():
    with pytest.raises(CropPlanError):
        plan_crops(100, 50, CropPlanConfig(scales=(CropScale(1.5),)))
    with pytest.raises(CropPlanError):
        plan_crops(0, 50)
    with pytest.raises(CropPlanError):
        plan_crops(100, 50, CropPlanConfig(scales=()))


def test_first_scales_monotone():
    counts = [len(plan_crops(13312, 6656, CropPlanConfig().first_scales(k))) for k in (1, 2, 3)]
    assert counts == [3, 27, 87]


# -- transforms ------------------------------------------------------------------

def test_transform_examples():
    whole = CropSpec("p", 0.0, 0.0, 1.0, 1.0, 0)
    b = Box(0.1, 0.2, 0.3, 0.4)
    assert pano_to_crop(b, whole).as_tuple() == pytest.approx(b.as_tuple(), abs=1e-15)
    crop = CropSpec("p", 0.5, 0.5, 0.5, 0.5, 0)
    assert pano_to_crop(Box(0.5, 0.5, 0.6, 0.6), crop).as_tuple() == pytest.approx((0, 0, 0.2, 0.2), abs=1e-12)
    with pytest.raises(NoIntersectionError):
        pano_to_crop(Box(0.0, 0.0, 0.1, 0.1), crop)


def test_round_trip_random_including_seam(rng):
    crops = plan_crops(1664, 832)
    assert any(c.wraps_seam for c in crops)
    worst = 0.0
    for _ in range(1000):
        c = crops[int(rng.integers(len(crops)))]
        inner = random_box(rng, min_size=0.01)
        pano = crop_to_pano(inner, c)
        back = pano_to_crop(pano, c)
        worst = max(worst, float(np.max(np.abs(np.array(back.as_tuple()) - inner.as_tuple()))))
        arr = crop_to_pano_array(np.array([inner.as_tuple()]), c)[0]
        assert arr == pytest.approx(pano.as_tuple(), abs=1e-15)
    assert worst <= 1e-12


def test_seam_crop_maps_modulo():
    c = CropSpec("p", 0.9, 0.0, 0.2, 0.5, 0, wraps_seam=True)
    p = crop_to_pano(Box(0.6, 0.0, 0.9, 1.0), c)   # lies past the seam
    assert p.x_min == pytest.approx(0.02)
    assert p.x_max == pytest.approx(0.08)
    s = crop_to_pano(Box(0.4, 0.0, 0.6, 1.0), c)   # straddles it
    assert s.x_min == pytest.approx(0.98) and s.x_max == pytest.approx(1.02)
    parts = split_at_seam(s)
    flat = [v for p in parts for v in p.as_tuple()]
    assert flat == pytest.approx([0.98, 0.0, 1.0, 0.5, 0.0, 0.0, 0.02, 0.5])


# -- edge filter -------------------------------------------------------------------

def test_edge_filter_examples():
    interior = CropSpec("p", 0.3, 0.3, 0.2, 0.2, 1)
    assert edge_filter(Box(0.2, 0.2, 0.5, 0.5), interior)
    assert not edge_filter(Box(0.2, 0.2, 0.95, 0.5), interior)
    assert not edge_filter(Box(0.2, 0.05, 0.5, 0.5), interior)
    top = CropSpec("p", 0.3, 0.0, 0.2, 0.2, 1)
    assert edge_filter(Box(0.2, 0.05, 0.5, 0.5), top)
    bottom = CropSpec("p", 0.3, 0.8, 0.2, 0.2, 1)
    assert edge_filter(Box(0.2, 0.5, 0.5, 0.99), bottom)
    # left/right never exempt, not even at x = 0
    left = CropSpec("p", 0.0, 0.0, 0.5, 1.0, 0)
    assert not edge_filter(Box(0.02, 0.2, 0.5, 0.5), left)


# -- JSON lines ----------------------------------------------------------------------

def test_detection_json_round_trip(tmp_path):
    d = Detection(Box(0.123456789012, 0.2, 0.5, 0.7), 0.9, 0.5, "p/s0r0c1", "p")
    line = detection_to_json(d)
    assert '"x_min": 0.123456789' in line
    back = detection_from_json(line)
    assert back.final_score == pytest.approx(0.45)
    write_detections(tmp_path / "d.jsonl", [d, d])
    assert len(read_detections(tmp_path / "d.jsonl")) == 2
    write_boxes(tmp_path / "g.jsonl", [Box(0.1, 0.1, 0.2, 0.2)], pano_id="p")
    assert read_boxes(tmp_path / "g.jsonl") == [Box(0.1, 0.1, 0.2, 0.2)]
    with pytest.raises(ValueError):
        detection_from_json('{"x_min": 0}')


def test_detection_final_score():
    d = det((0.1, 0.1, 0.2, 0.2), 0.8)
    assert d.final_score == 0.8
    assert d.with_post_score(0.5).final_score == pytest.approx(0.4)
