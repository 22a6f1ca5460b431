import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from telcos.geometry import points_in_convex, polygon_area
from telcos.groundtruth import Script
from telcos.postproc import (
    COLORS,
    DetectedWord,
    assign_script,
    boxes_from_scores,
    draw_overlay,
    expand_quad,
    load_detections,
    route_words,
    save_detections,
    unclip_ratio,
    words_from_script_map,
)


def _blob(shape, cy, cx, sy, sx):
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]] + 0.5
    return np.exp(-(((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2) / 2)


def test_empty_maps():
    z = np.zeros((16, 16))
    assert boxes_from_scores(z, z) == []


def test_blob_quad_contains_level_set():
    region = _blob((32, 32), 15.0, 12.0, 3.0, 5.0)
    (comp,) = boxes_from_scores(region, np.zeros_like(region), 0.5, 0.5)
    # level set exp(-r^2/2) = 0.5  ->  ellipse with semi-axes s * sqrt(2 ln 2)
    k = np.sqrt(2 * np.log(2))
    t = np.linspace(0, 2 * np.pi, 64)
    pts = np.c_[12.0 + 5.0 * k * np.cos(t), 15.0 + 3.0 * k * np.sin(t)] * 2
    assert points_in_convex(comp.quad, pts).all()
    assert comp.confidence == pytest.approx(region.max())


def test_affinity_bridge_merges():
    region = _blob((24, 48), 12, 12, 2.5, 2.5) + _blob((24, 48), 12, 30, 2.5, 2.5)
    bridge = np.zeros_like(region)
    bridge[10:14, 12:31] = 0.8
    assert len(boxes_from_scores(region, bridge)) == 1
    assert len(boxes_from_scores(region, np.zeros_like(region))) == 2


def _reference_components(mask):
    h, w = mask.shape
    idx = np.arange(h * w).reshape(h, w)
    rows, cols = [], []
    for dy, dx in ((0, 1), (1, 0), (1, 1), (1, -1)):
        a = mask[max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)]
        b = mask[max(0, dy) :, max(0, dx) : w + min(0, dx) if dx < 0 else None][: a.shape[0], : a.shape[1]]
        ia = idx[max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)]
        ib = idx[max(0, dy) :, max(0, dx) : w + min(0, dx) if dx < 0 else None][: a.shape[0], : a.shape[1]]
        both = a & b
        rows += ia[both].tolist()
        cols += ib[both].tolist()
    g = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(h * w, h * w))
    n, labels = connected_components(g, directed=False)
    return len(set(labels[mask.ravel()]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.2, 0.8))
def test_component_count_and_containment(seed, thr):
    rng = np.random.default_rng(seed)
    region = rng.random((12, 14)) ** 3
    aff = rng.random((12, 14)) ** 4
    comps = boxes_from_scores(region, aff, thr, 0.7)
    mask = (region >= thr) | (aff >= 0.7)
    assert len(comps) == _reference_components(mask)
    for c in comps:
        r, col = c.pixels[:, 0], c.pixels[:, 1]
        corners = np.concatenate([np.c_[col, r], np.c_[col + 1, r + 1], np.c_[col + 1, r], np.c_[col, r + 1]]) * 2.0
        assert (np.abs(polygon_area(c.quad)) > 0)
        # small tolerance for floating point at rectangle edges
        grown = expand_quad(c.quad, 1e-6)
        assert points_in_convex(grown, corners).all()


def _class_map(cls):
    probs = np.zeros((4,) + cls.shape)
    np.put_along_axis(probs, cls[None], 1.0, axis=0)
    return probs


def test_assign_script_votes():
    cls = np.full((10, 10), Script.LATIN)
    quad = np.array([[0, 0], [20, 0], [20, 20], [0, 20]], float)
    assert assign_script(_class_map(cls), quad) == (Script.LATIN, 1.0, False)
    cls[6:] = Script.CJK
    assert assign_script(_class_map(cls), quad) == (Script.LATIN, pytest.approx(0.6), False)
    cls[:] = Script.NONE
    assert assign_script(_class_map(cls), quad) == (Script.OTHER, 0.0, True)


def test_assign_script_ignores_none_and_outside():
    cls = np.full((10, 10), Script.NONE)
    cls[2:4, 2:6] = Script.OTHER
    cls[8:, 8:] = Script.CJK  # outside the quad
    quad = np.array([[0, 0], [14, 0], [14, 10], [0, 10]], float)
    assert assign_script(_class_map(cls), quad) == (Script.OTHER, 1.0, False)
    with pytest.raises(ValueError):
        assign_script(_class_map(cls), np.zeros((4, 2)))


def _det(script, x=0.0):
    return DetectedWord([[x, 0], [x + 4, 0], [x + 4, 2], [x, 2]], script, 0.9)


def test_routing():
    assert route_words([]) == {"latin": [], "cjk": [], "other": []}
    words = [_det(Script.LATIN, i) for i in range(90)] + [_det(Script.OTHER, 100 + i) for i in range(10)]
    rng = np.random.default_rng(0)
    words = [words[i] for i in rng.permutation(100)]
    r = route_words(words)
    assert len(r["other"]) == 10 and sum(len(v) for v in r.values()) == 100
    # stable: buckets keep input order
    assert [w.quad[0, 0] for w in r["other"]] == [w.quad[0, 0] for w in words if w.script == Script.OTHER]


def test_detected_word_rejects_none():
    with pytest.raises(ValueError):
        _det(Script.NONE)


def test_unclip_ratio_closed_form():
    kept = 2 * 0.25 * np.sqrt(2 * np.log(1 / 0.4))
    assert unclip_ratio() == pytest.approx((1 / kept - 1) / 2)
    assert unclip_ratio() == pytest.approx(0.2387, abs=1e-4)


def test_expand_quad():
    q = np.array([[0, 0], [4, 0], [4, 2], [0, 2]], float)
    assert np.allclose(expand_quad(q, 1.0), [[-1, -1], [5, -1], [5, 3], [-1, 3]])


def test_words_from_script_map_recovers_box():
    cls = np.full((32, 32), Script.NONE)
    cls[10:16, 4:20] = Script.CJK
    cls[25, 25] = Script.LATIN  # below min_pixels
    words = words_from_script_map(_class_map(cls), min_pixels=4, unclip=0.0)
    assert len(words) == 1 and words[0].script == Script.CJK
    xs, ys = words[0].quad[:, 0], words[0].quad[:, 1]
    assert (xs.min(), xs.max(), ys.min(), ys.max()) == pytest.approx((8, 40, 20, 32))


def test_detection_json_round_trip(tmp_path):
    words = [_det(Script.LATIN), _det(Script.CJK, 10)]
    save_detections(tmp_path / "d.json", words)
    back = load_detections(tmp_path / "d.json")
    assert [w.script for w in back] == [Script.LATIN, Script.CJK]
    assert np.allclose(back[1].quad, words[1].quad)


def test_overlay_colors():
    img = np.zeros((12, 20, 3), np.uint8)
    out = draw_overlay(img, [_det(Script.LATIN, 1), DetectedWord([[10, 4], [16, 4], [16, 9], [10, 9]], Script.OTHER, 1.0)])
    assert tuple(out[0, 2]) == COLORS[Script.LATIN]
    assert tuple(out[4, 12]) == COLORS[Script.OTHER]
    assert not img.any()
