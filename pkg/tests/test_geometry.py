import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import MultiPoint, Polygon

from telcos.geometry import (
    apply_homography,
    clip_convex,
    convex_hull,
    convex_iou,
    homography,
    min_area_rect,
    order_quad,
    points_in_convex,
    polygon_area,
)

coords = st.floats(-50, 50, allow_nan=False, width=32)
point_sets = st.lists(st.tuples(coords, coords), min_size=3, max_size=12)


def _rect(x0, y0, x1, y1):
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)


def test_area_sign_screen_order():
    assert polygon_area(_rect(0, 0, 2, 3)) == 6.0
    assert polygon_area(_rect(0, 0, 2, 3)[::-1]) == -6.0


@settings(max_examples=60, deadline=None)
@given(point_sets)
def test_hull_matches_shapely(pts):
    ref = MultiPoint(pts).convex_hull
    hull = convex_hull(pts)
    assert abs(abs(polygon_area(hull)) - ref.area) < 1e-6 * max(1.0, ref.area)


@settings(max_examples=60, deadline=None)
@given(point_sets)
def test_min_area_rect_matches_shapely(pts):
    ref = MultiPoint(pts).convex_hull
    if ref.area < 1e-3:
        return
    rect = min_area_rect(pts)
    oracle = MultiPoint(pts).minimum_rotated_rectangle.area
    assert abs(polygon_area(rect) - oracle) < 1e-6 * max(1.0, oracle)
    assert Polygon(rect).buffer(1e-6).contains(MultiPoint(pts))


def test_min_area_rect_rotated_square():
    t = np.deg2rad(30)
    r = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    sq = _rect(-1, -1, 1, 1) @ r.T + 5
    rect = min_area_rect(sq)
    assert polygon_area(rect) == pytest.approx(4.0)
    assert np.allclose(sorted(map(tuple, rect.round(9))), sorted(map(tuple, sq.round(9))))


@settings(max_examples=100, deadline=None)
@given(point_sets, point_sets)
def test_convex_iou_matches_shapely(a, b):
    pa, pb = MultiPoint(a).convex_hull, MultiPoint(b).convex_hull
    if pa.area < 1e-2 or pb.area < 1e-2:
        return
    qa, qb = convex_hull(a), convex_hull(b)
    ref = pa.intersection(pb).area / pa.union(pb).area
    assert convex_iou(qa, qb) == pytest.approx(ref, abs=1e-7)
    assert convex_iou(qb, qa) == pytest.approx(ref, abs=1e-7)


def test_iou_examples():
    a = _rect(0, 0, 2, 2)
    assert convex_iou(a, a) == 1.0
    assert convex_iou(a, _rect(1, 0, 3, 2)) == pytest.approx(1 / 3)
    assert convex_iou(a, _rect(5, 5, 6, 6)) == 0.0
    assert len(clip_convex(a, _rect(5, 5, 6, 6))) == 0


def test_homography_maps_corners():
    src = _rect(0, 0, 1, 1)
    dst = np.array([[2, 1], [5, 0], [6, 4], [1, 3]], dtype=float)
    h = homography(src, dst)
    assert np.allclose(apply_homography(h, src), dst)
    assert np.allclose(apply_homography(np.linalg.inv(h), dst), src)


def test_points_in_convex():
    inside = points_in_convex(_rect(0, 0, 2, 2), [[1, 1], [2, 2], [3, 1], [-0.1, 0]])
    assert inside.tolist() == [True, True, False, False]


def test_order_quad():
    q = np.array([[1, 1], [0, 0], [0, 1], [1, 0]], dtype=float)
    assert np.array_equal(order_quad(q), _rect(0, 0, 1, 1))
