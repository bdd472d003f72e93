import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densecap3d.errors import ArgumentError, PlacementError, ValidationError, VisibilityError
from densecap3d.geometry import (Box3, CameraPose, Intrinsics, box_iou, estimate_viewpoint, knn_graph, nms,
                                 orientation_bin, project_box)
from oracles import iou_exact, nms_by_subsets

grid = st.integers(-16, 16).map(lambda v: v / 8)
size = st.integers(1, 24).map(lambda v: v / 8)
boxes = st.builds(lambda c, l: Box3(c, l), st.tuples(grid, grid, grid), st.tuples(size, size, size))


def test_overlapping_cubes_iou_one_third():
    a = Box3((0, 0, 0), (2, 2, 2))
    b = Box3((1, 0, 0), (2, 2, 2))
    assert box_iou(a, b) == pytest.approx(1 / 3, abs=1e-12)


def test_identical_and_disjoint():
    a = Box3((0.3, -1, 2), (0.5, 1, 2))
    assert box_iou(a, a) == 1.0
    assert box_iou(a, Box3((5, 5, 5), (1, 1, 1))) == 0.0


def test_touching_faces_have_zero_overlap():
    assert box_iou(Box3((0, 0, 0), (1, 1, 1)), Box3((1, 0, 0), (1, 1, 1))) == 0.0


def test_box_rejects_nonpositive_lengths():
    with pytest.raises(ValidationError):
        Box3((0, 0, 0), (1, -1, 1))


@settings(max_examples=300, deadline=None)
@given(boxes, boxes)
def test_iou_matches_rational_reference(a, b):
    ref = float(iou_exact((a.center, a.lengths), (b.center, b.lengths)))
    assert abs(box_iou(a, b) - ref) <= 1e-9
    assert box_iou(a, b) == box_iou(b, a)
    assert 0.0 <= box_iou(a, b) <= 1.0


# -- nms ----------------------------------------------------------------------

def test_nms_examples():
    a = Box3((0, 0, 0), (1, 1, 1))
    assert nms([a], [0.3], 0.5) == [0]
    assert nms([a, a], [0.9, 0.8], 0.5) == [0]
    assert nms([a, a], [0.8, 0.9], 0.5) == [1]
    assert nms([a, Box3((4, 0, 0), (1, 1, 1))], [0.1, 0.2], 0.5) == [1, 0]
    assert nms([], [], 0.5) == []


def test_nms_equal_scores_lower_index_first():
    a = Box3((0, 0, 0), (1, 1, 1))
    assert nms([a, a, a], [0.5, 0.5, 0.5], 0.25) == [0]


@pytest.mark.parametrize("thr", [-0.01, 1.01])
def test_nms_threshold_range(thr):
    with pytest.raises(ArgumentError):
        nms([Box3((0, 0, 0), (1, 1, 1))], [1.0], thr)


def test_nms_length_mismatch():
    with pytest.raises(ArgumentError):
        nms([Box3((0, 0, 0), (1, 1, 1))], [1.0, 0.5], 0.5)


@settings(max_examples=150, deadline=None)
@given(st.lists(boxes, min_size=1, max_size=7).flatmap(
    lambda bs: st.tuples(st.just(bs), st.lists(st.integers(0, 4).map(lambda s: s / 4),
                                               min_size=len(bs), max_size=len(bs)))),
       st.sampled_from([0.0, 0.1, 0.25, 0.5, 1.0]))
def test_nms_matches_subset_reference(case, thr):
    bs, scores = case
    kept = nms(bs, scores, thr)
    assert kept == nms_by_subsets([(b.center, b.lengths) for b in bs], scores, thr)
    assert [scores[i] for i in kept] == sorted((scores[i] for i in kept), reverse=True)
    for x in kept:
        for y in kept:
            if x != y:
                assert box_iou(bs[x], bs[y]) < thr


# -- knn ------------------------------------------------------------------------

def edge_set(edges):
    return {tuple(map(int, e)) for e in edges}


def test_knn_examples():
    assert edge_set(knn_graph([[0, 0, 0], [1, 0, 0]], 1)) == {(0, 1), (1, 0)}
    assert edge_set(knn_graph([[0, 0, 0], [1, 0, 0], [3, 0, 0]], 1)) == {(0, 1), (1, 0), (2, 1)}


def test_knn_complete_when_k_large():
    pts = np.random.default_rng(0).normal(size=(5, 3))
    assert edge_set(knn_graph(pts, 10)) == {(i, j) for i in range(5) for j in range(5) if i != j}


def test_knn_distance_tie_goes_to_lower_index():
    assert edge_set(knn_graph([[0, 0, 0], [1, 0, 0], [-1, 0, 0]], 1)) >= {(0, 1)}


def test_knn_single_node_and_errors():
    assert knn_graph([[0, 0, 0]], 3).shape == (0, 2)
    with pytest.raises(ArgumentError):
        knn_graph(np.zeros((0, 3)), 1)
    with pytest.raises(ArgumentError):
        knn_graph([[0, 0, 0]], 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(1, 15), st.integers(0, 10_000))
def test_knn_out_degree(m, k, seed):
    pts = np.random.default_rng(seed).uniform(-5, 5, size=(m, 3))
    edges = knn_graph(pts, k)
    deg = np.bincount(edges[:, 0], minlength=m) if len(edges) else np.zeros(m, int)
    assert (deg == min(k, m - 1)).all()
    assert not any(i == j for i, j in edges)


# -- orientation bins ----------------------------------------------------------------

@pytest.mark.parametrize("angle, cls", [(0.0, 0), (29.999, 0), (30.0, 1), (45.0, 1), (150.0, 5), (179.9, 5)])
def test_orientation_bins(angle, cls):
    assert orientation_bin(angle) == cls


@pytest.mark.parametrize("angle", [-0.1, 180.0, 200.0])
def test_orientation_out_of_range(angle):
    with pytest.raises(ArgumentError):
        orientation_bin(angle)


@given(st.floats(0.0, 180.0, exclude_max=True))
def test_orientation_partition(angle):
    cls = orientation_bin(angle)
    assert 30 * cls <= angle < 30 * (cls + 1)


# -- cameras ----------------------------------------------------------------------

ROOM = Box3((0, 0, 1.5), (10, 10, 3))


@pytest.mark.parametrize("seed", range(10))
def test_viewpoint_radius_and_height(seed):
    target = Box3((0.5, -1.0, 0.4), (0.5, 0.5, 0.8))
    cam = estimate_viewpoint(target, ROOM, seed)
    dx, dy = cam.origin[0] - 0.5, cam.origin[1] + 1.0
    assert math.hypot(dx, dy) == pytest.approx(0.99, abs=1e-12)
    assert cam.origin[2] == 1.70
    assert cam.look_at == target.center
    assert estimate_viewpoint(target, ROOM, seed) == cam


def test_viewpoint_first_attempt_in_large_room():
    target = Box3((0, 0, 0.5), (1, 1, 1))
    estimate_viewpoint(target, ROOM, seed=3, max_attempts=1)


def test_viewpoint_tiny_bounds_fail():
    target = Box3((0, 0, 0.5), (0.2, 0.2, 0.2))
    with pytest.raises(PlacementError):
        estimate_viewpoint(target, Box3((0, 0, 1), (0.5, 0.5, 2)), seed=0)


def test_viewpoint_target_outside_bounds():
    with pytest.raises(ArgumentError):
        estimate_viewpoint(Box3((20, 0, 0.5), (1, 1, 1)), ROOM, seed=0)


def test_camera_origin_equals_look_at():
    with pytest.raises(ValidationError):
        CameraPose((1, 1, 1), (1, 1, 1))


WIDE = Intrinsics(fx=500.0, fy=500.0, cx=500.0, cy=500.0, width=1000, height=1000)


def test_on_axis_box_centered_at_principal_point():
    cam = CameraPose((0, 0, 1.7), (2, 0, 1.7))
    rect = project_box(Box3((2, 0, 1.7), (0.3, 0.3, 0.3)), cam)
    assert rect.center == pytest.approx((319.5, 239.5), abs=1e-9)


def test_oblique_view_keeps_principal_point_inside():
    # Perspective skews the rectangle off center once the view is tilted.
    cam = CameraPose((0, 0, 1.7), (2, 1, 0.5))
    rect = project_box(Box3((2, 1, 0.5), (0.3, 0.3, 0.3)), cam)
    assert rect.u_min < 319.5 < rect.u_max and rect.v_min < 239.5 < rect.v_max


def test_box_behind_camera():
    cam = CameraPose((0, 0, 0), (1, 0, 0))
    with pytest.raises(VisibilityError):
        project_box(Box3((-2, 0, 0), (1, 1, 1)), cam)


def test_unit_cube_two_meters_ahead():
    # The nearest face sits at depth 1.5, so its corners set the extent: 500 * 0.5 / 1.5.
    cam = CameraPose((0, 0, 0), (2, 0, 0), WIDE)
    rect = project_box(Box3((2, 0, 0), (1, 1, 1)), cam)
    assert (rect.u_max - rect.u_min) / 2 == pytest.approx(500 * 0.5 / 1.5, rel=1e-12)


def test_thin_slab_two_meters_ahead_gives_center_depth_extent():
    cam = CameraPose((0, 0, 0), (2, 0, 0), WIDE)
    rect = project_box(Box3((2, 0, 0), (1e-9, 1, 1)), cam)
    assert (rect.u_max - rect.u_min) / 2 == pytest.approx(125.0, rel=1e-6)


def test_projection_clamped_to_image():
    cam = CameraPose((0, 0, 0), (1, 0, 0))
    rect = project_box(Box3((1, 0, 0), (0.2, 20, 20)), cam)
    assert (rect.u_min, rect.v_min, rect.u_max, rect.v_max) == (0.0, 0.0, 640.0, 480.0)
