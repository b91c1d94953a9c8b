import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fitmatch.geometry import (
    DegenerateGeometryError,
    Feature,
    Homography,
    INFEASIBLE,
    Point2,
    PointAtInfinityError,
    ScoreParams,
    appearance_penalty,
    apply_homography,
    feature_set,
    fit_homography,
    matching_score,
    neighbor_graph,
    symmetric_transfer_error,
    transfer_error_table,
)


def unit_vec(angle: float, dim: int = 4) -> np.ndarray:
    v = np.zeros(dim)
    v[0] = math.cos(angle)
    v[1] = math.sin(angle)
    return v


def random_homography(rng) -> Homography:
    while True:
        m = np.eye(3) + rng.normal(scale=0.3, size=(3, 3))
        m[2, :2] *= 1e-3  # keep the projective part mild
        try:
            h = Homography(m)
        except ValueError:
            continue
        if np.linalg.cond(h.m) < 1e4:
            return h


class TestApplyHomography:
    def test_identity(self):
        p = apply_homography(Homography.identity(), Point2(3, 4))
        assert (p.x, p.y) == (3, 4)

    def test_translation(self):
        p = apply_homography(Homography.translation(1, 0), Point2(0, 0))
        assert (p.x, p.y) == pytest.approx((1, 0))

    def test_projective_division(self):
        # (1,1,1) -> (1,1,2) -> dehomogenize -> (0.5, 0.5), by hand
        h = Homography(np.diag([1.0, 1.0, 2.0]))
        p = apply_homography(h, Point2(1, 1))
        assert (p.x, p.y) == pytest.approx((0.5, 0.5))

    def test_point_at_infinity(self):
        m = np.array([[1.0, 0, 0], [0, 1, 0], [0, -1, 1]])  # w = 1 - y
        with pytest.raises(PointAtInfinityError):
            apply_homography(Homography(m), Point2(0, 1))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-100, 100), st.floats(-100, 100))
    def test_inverse_round_trip(self, seed, x, y):
        rng = np.random.default_rng(seed)
        h = random_homography(rng)
        p = Point2(x, y)
        try:
            q = apply_homography(h, p)
            back = apply_homography(h.inverse(), q)
        except PointAtInfinityError:
            return
        assert math.hypot(back.x - p.x, back.y - p.y) < 1e-9 * max(1.0, abs(x), abs(y))


class TestSymmetricTransferError:
    def test_zero_residual(self):
        assert symmetric_transfer_error(Homography.identity(), Point2(1, 1), Point2(1, 1)) == 0

    def test_scale_two(self):
        # forward ||(2,2)-(3,2)|| = 1, backward ||(1.5,1)-(1,1)|| = 0.5
        h = Homography.scaling(2.0)
        assert symmetric_transfer_error(h, Point2(1, 1), Point2(3, 2)) == pytest.approx(1.5)

    def test_exact_correspondence(self):
        h = Homography.translation(1, 0)
        assert symmetric_transfer_error(h, Point2(0, 0), Point2(1, 0)) == pytest.approx(0.0, abs=1e-12)

    def test_symmetry_under_swap(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            h = random_homography(rng)
            p = Point2(*rng.uniform(-10, 10, 2))
            q = Point2(*rng.uniform(-10, 10, 2))
            a = symmetric_transfer_error(h, p, q)
            b = symmetric_transfer_error(h.inverse(), q, p)
            assert a == pytest.approx(b, rel=1e-9)


class TestAppearancePenalty:
    def test_equal_descriptors(self):
        a = unit_vec(0.0)
        assert appearance_penalty(a, a, ScoreParams()) == 0.0

    def test_orthogonal_is_infeasible(self):
        assert appearance_penalty(unit_vec(0.0), unit_vec(math.pi / 2), ScoreParams()) == INFEASIBLE

    def test_under_threshold(self):
        assert appearance_penalty(unit_vec(0.0), unit_vec(math.pi / 6), ScoreParams()) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            appearance_penalty(unit_vec(0.0, 4), unit_vec(0.0, 8), ScoreParams())


class TestMatchingScore:
    def test_exact_match(self):
        h = Homography.translation(2, 0)
        p = Feature(0, Point2(0, 0), unit_vec(0.1))
        q = Feature(0, Point2(2, 0), unit_vec(0.1))
        assert matching_score(h, p, q, ScoreParams()) == pytest.approx(0.0, abs=1e-12)

    def test_composes_geometry_and_appearance(self):
        h = Homography.scaling(2.0)
        p = Feature(0, Point2(1, 1), unit_vec(0.0))
        q = Feature(0, Point2(3, 2), unit_vec(math.pi / 6))
        assert matching_score(h, p, q, ScoreParams()) == pytest.approx(1.5)

    def test_infeasible_dominates(self):
        h = Homography.identity()
        p = Feature(0, Point2(0, 0), unit_vec(0.0))
        q = Feature(0, Point2(0, 0), unit_vec(math.pi / 2))
        assert matching_score(h, p, q, ScoreParams()) == INFEASIBLE

    def test_nonnegative_when_feasible(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            h = random_homography(rng)
            p = Feature(0, Point2(*rng.uniform(-5, 5, 2)), unit_vec(rng.uniform(0, 0.2)))
            q = Feature(0, Point2(*rng.uniform(-5, 5, 2)), unit_vec(rng.uniform(0, 0.2)))
            s = matching_score(h, p, q, ScoreParams())
            assert s >= 0.0


class TestFitHomography:
    def test_recovers_translation(self):
        h_true = Homography.translation(2, 0)
        corners = [Point2(0, 0), Point2(1, 0), Point2(1, 1), Point2(0, 1)]
        pairs = [(p, apply_homography(h_true, p)) for p in corners]
        h = fit_homography(pairs)
        assert np.allclose(h.m, h_true.m, atol=1e-9)
        for p, q in pairs:
            assert symmetric_transfer_error(h, p, q) < 1e-9

    def test_collinear_raises(self):
        pairs = [
            (Point2(0, 0), Point2(0, 0)),
            (Point2(1, 1), Point2(1, 1)),
            (Point2(2, 2), Point2(2, 2)),
            (Point2(3, 0), Point2(3, 0)),
        ]
        with pytest.raises(DegenerateGeometryError):
            fit_homography(pairs)

    def test_too_few_pairs(self):
        with pytest.raises(DegenerateGeometryError):
            fit_homography([(Point2(0, 0), Point2(0, 0))] * 3)

    def test_recovers_random_homography(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            h_true = random_homography(rng)
            pts = [Point2(*xy) for xy in rng.uniform(-10, 10, size=(20, 2))]
            pairs = [(p, apply_homography(h_true, p)) for p in pts]
            h = fit_homography(pairs)
            assert np.linalg.norm(h.m - h_true.m) < 1e-7

    def test_similarity_invariance(self):
        # pre/post similarity transforms change the estimate covariantly, so
        # transformed inputs must fit with the same (near-zero) residual
        rng = np.random.default_rng(5)
        h_true = random_homography(rng)
        pts = [Point2(*xy) for xy in rng.uniform(-10, 10, size=(12, 2))]
        pairs = [(p, apply_homography(h_true, p)) for p in pts]
        s = Homography(np.array([[2.0, 0, 3], [0, 2.0, -1], [0, 0, 1]]))
        moved = [(apply_homography(s, p), q) for p, q in pairs]
        h = fit_homography(moved)
        for p, q in moved:
            assert symmetric_transfer_error(h, p, q) < 1e-7


class TestNeighborGraph:
    def test_triangle(self):
        edges = neighbor_graph([Point2(0, 0), Point2(1, 0), Point2(0, 1)])
        assert edges == {(0, 1), (0, 2), (1, 2)}

    def test_square_has_five_edges(self):
        # 4 sides + exactly one diagonal in any triangulation of a square
        edges = neighbor_graph([Point2(0, 0), Point2(1, 0), Point2(1, 1), Point2(0, 1)])
        assert len(edges) == 5
        for side in [(0, 1), (1, 2), (2, 3), (0, 3)]:
            assert side in edges

    def test_collinear_fallback_contains_chain(self):
        edges = neighbor_graph([Point2(0, 0), Point2(1, 0), Point2(2, 0)])
        assert {(0, 1), (1, 2)} <= edges

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            neighbor_graph([Point2(0, 0)])


class TestHomographyNormalization:
    def test_same_map_same_matrix(self):
        m = np.array([[1.0, 2, 3], [0, 1, 4], [0, 0, 2]])
        assert Homography(m) == Homography(-3.7 * m)

    def test_frobenius_unit(self):
        h = Homography(np.diag([5.0, 5.0, 5.0]))
        assert np.linalg.norm(h.m) == pytest.approx(1.0)
        assert h.m.max() > 0

    def test_singular_rejected(self):
        with pytest.raises(ValueError):
            Homography(np.array([[1.0, 0, 0], [0, 1, 0], [1, 1, 0]]))


def test_transfer_error_table_matches_scalar():
    rng = np.random.default_rng(9)
    h = random_homography(rng)
    left = rng.uniform(-5, 5, size=(6, 2))
    right = rng.uniform(-5, 5, size=(7, 2))
    table = transfer_error_table(h, left, right)
    for i in range(6):
        for j in range(7):
            want = symmetric_transfer_error(h, Point2(*left[i]), Point2(*right[j]))
            assert table[i, j] == pytest.approx(want, rel=1e-12)


def test_feature_set_validates_ids():
    from fitmatch.geometry import FeatureSet

    with pytest.raises(ValueError):
        FeatureSet("left", (Feature(1, Point2(0, 0), unit_vec(0.0)),))


def test_feature_set_builder():
    fs = feature_set("left", [(0, 0), (1, 2)], [unit_vec(0.0), unit_vec(0.1)])
    assert len(fs) == 2 and fs.real_count == 2
    assert fs[1].pos == Point2(1, 2)
