import itertools
import math

import numpy as np
import pytest

from fitmatch.gap import OUTLIER, JointMatching
from fitmatch.geometry import (
    Feature,
    FeatureSet,
    Homography,
    Point2,
    ScoreParams,
    apply_homography,
    neighbor_graph,
    unit_descriptor,
)
from fitmatch.labeling import (
    EnergyParams,
    ProposalPool,
    fit_step_e1,
    fit_step_e2,
    reestimate,
    sample_proposals,
    solve_binary_submodular,
    unary_cost_table,
)

SCORE = ScoreParams(outlier_cost=2.0)


def base_dir(i, dim=6):
    v = np.zeros(dim)
    v[0] = math.cos(0.01 * i)
    v[1] = math.sin(0.01 * i)
    return unit_descriptor(v)


def scene_from_model(h: Homography, n, rng, spread=20.0):
    """Left points, their exact images, matching descriptors."""
    lpts = rng.uniform(-spread, spread, size=(n, 2))
    feats_l = []
    feats_r = []
    for i, (x, y) in enumerate(lpts):
        p = Point2(float(x), float(y))
        q = apply_homography(h, p)
        d = base_dir(i)
        feats_l.append(Feature(i, p, d))
        feats_r.append(Feature(i, q, d))
    left = FeatureSet("left", tuple(feats_l))
    right = FeatureSet("right", tuple(feats_r))
    return left, right


def identity_matching(n, label=OUTLIER, objective=0):
    return JointMatching(triples=tuple((i, i, label) for i in range(n)), objective=objective)


class TestSampleProposals:
    def test_recovers_single_model(self):
        rng = np.random.default_rng(0)
        h = Homography(np.array([[1.1, 0.02, 3.0], [-0.01, 0.95, -2.0], [1e-4, 0, 1]]))
        left, right = scene_from_model(h, 30, rng)
        pool = sample_proposals(left, right, [(i, i) for i in range(30)], 5, rng)
        for model in pool.models:
            assert np.linalg.norm(model.m - h.m) < 1e-7

    def test_zero_count_rejected(self):
        rng = np.random.default_rng(0)
        left, right = scene_from_model(Homography.identity(), 10, rng)
        with pytest.raises(ValueError):
            sample_proposals(left, right, [(i, i) for i in range(10)], 0, rng)

    def test_deterministic_for_fixed_seed(self):
        h = Homography.translation(4, 1)
        left, right = scene_from_model(h, 20, np.random.default_rng(3))
        pairs = [(i, i) for i in range(20)]
        a = sample_proposals(left, right, pairs, 4, np.random.default_rng(77))
        b = sample_proposals(left, right, pairs, 4, np.random.default_rng(77))
        assert all(x == y for x, y in zip(a.models, b.models))

    def test_too_few_matches(self):
        rng = np.random.default_rng(1)
        left, right = scene_from_model(Homography.identity(), 5, rng)
        with pytest.raises(ValueError):
            sample_proposals(left, right, [(0, 0), (1, 1), (2, 2)], 2, rng)


class TestUnaryCostTable:
    def test_true_model_column_is_zero(self):
        rng = np.random.default_rng(5)
        h = Homography.translation(2, 3)
        left, right = scene_from_model(h, 8, rng)
        table = unary_cost_table(left, right, {i: i for i in range(8)}, [h], SCORE)
        assert np.all(table[:, 0] == 0)
        assert np.all(table[:, 1] == SCORE.outlier_ticks)

    def test_wrong_partner_costs_more(self):
        rng = np.random.default_rng(6)
        h = Homography.identity()
        left, right = scene_from_model(h, 4, rng)
        shifted = {i: (i + 1) % 4 for i in range(4)}
        table = unary_cost_table(left, right, shifted, [h], SCORE)
        assert np.all(table[:, 0] > 0)


class TestFitStepE1:
    def test_single_true_model(self):
        rng = np.random.default_rng(2)
        h = Homography.translation(5, -1)
        left, right = scene_from_model(h, 20, rng)
        m = identity_matching(20, objective=20 * SCORE.outlier_ticks)
        params = EnergyParams.from_units(0.1, 0.0, SCORE)
        f, pool = fit_step_e1(m, ProposalPool((h,)), params, left, right)
        assert all(f[p] == 0 for p in range(20))

    def test_huge_beta_forces_outliers(self):
        rng = np.random.default_rng(3)
        h = Homography.identity()
        left, right = scene_from_model(h, 6, rng)
        m = identity_matching(6, objective=6 * SCORE.outlier_ticks)
        params = EnergyParams.from_units(100.0, 0.0, SCORE)  # beta > 6 * T
        f, _ = fit_step_e1(m, ProposalPool((h,)), params, left, right)
        assert all(f[p] == OUTLIER for p in range(6))

    def test_two_plane_scene_uses_two_labels(self):
        rng = np.random.default_rng(4)
        h1 = Homography.translation(10, 0)
        h2 = Homography.translation(-10, 5)
        l1, r1 = scene_from_model(h1, 10, rng)
        l2, r2 = scene_from_model(h2, 10, rng)
        feats_l = list(l1.features) + [
            Feature(10 + f.id, f.pos, f.desc) for f in l2.features
        ]
        feats_r = list(r1.features) + [
            Feature(10 + f.id, f.pos, f.desc) for f in r2.features
        ]
        left = FeatureSet("left", tuple(feats_l))
        right = FeatureSet("right", tuple(feats_r))
        m = identity_matching(20, objective=20 * SCORE.outlier_ticks)
        params = EnergyParams.from_units(0.5, 0.0, SCORE)
        f, _ = fit_step_e1(m, ProposalPool((h1, h2)), params, left, right)
        assert {f[p] for p in range(10)} == {0}
        assert {f[p] for p in range(10, 20)} == {1}
        # the returned labeling hits the zero-residual optimum on every point
        unary = unary_cost_table(left, right, {i: i for i in range(20)}, [h1, h2], SCORE)
        assert all(unary[p, f[p]] == 0 for p in range(20))


class TestBinarySubmodular:
    def test_matches_enumeration(self):
        rng = np.random.default_rng(11)
        for trial in range(50):
            n = int(rng.integers(2, 9))
            cost0 = rng.integers(0, 50, size=n)
            cost1 = rng.integers(0, 50, size=n)
            pairwise = []
            for i in range(n):
                for j in range(i + 1, n):
                    if rng.random() < 0.4:
                        a, d = int(rng.integers(0, 10)), int(rng.integers(0, 10))
                        slack = int(rng.integers(0, 10))
                        b = int(rng.integers(0, 10))
                        c = a + d + slack - b
                        if c < 0:
                            b, c = b + c, 0
                        pairwise.append((i, j, (a, b, c, d)))
            y, energy = solve_binary_submodular(cost0, cost1, pairwise)
            best = min(
                int(sum(cost1[i] if yy[i] else cost0[i] for i in range(n)))
                + sum(
                    (a, b, c, d)[2 * yy[i] + yy[j]]
                    for i, j, (a, b, c, d) in pairwise
                )
                for yy in itertools.product((0, 1), repeat=n)
            )
            assert energy == best, f"trial {trial}"

    def test_rejects_nonsubmodular(self):
        with pytest.raises(ValueError):
            solve_binary_submodular([0, 0], [0, 0], [(0, 1, (5, 0, 0, 5))])


class TestFitStepE2:
    def test_lambda_zero_delegates_to_e1(self):
        rng = np.random.default_rng(8)
        h = Homography.translation(3, 3)
        left, right = scene_from_model(h, 12, rng)
        m = identity_matching(12, objective=12 * SCORE.outlier_ticks)
        params = EnergyParams.from_units(0.2, 0.0, SCORE)
        nbrs = neighbor_graph([f.pos for f in left.features])
        f1, pool1 = fit_step_e1(m, ProposalPool((h,)), params, left, right)
        f2, pool2 = fit_step_e2(m, ProposalPool((h,)), params, nbrs, left, right)
        assert f1 == f2
        assert pool1.models == pool2.models

    def test_smoothness_flips_isolated_point(self):
        # point 1 marginally prefers model 1 (its right position is nudged by
        # the same delta that model 1 encodes); its two neighbors are firmly
        # on model 0, so a large enough lambda pulls it back
        delta = 0.001
        d = base_dir(0)
        left = FeatureSet(
            "left",
            tuple(Feature(i, Point2(float(3 * i), 0.0), d) for i in range(3)),
        )
        rpos = [Point2(0.0, 0.0), Point2(3.0 + delta, 0.0), Point2(6.0, 0.0)]
        right = FeatureSet("right", tuple(Feature(i, rpos[i], d) for i in range(3)))
        h0 = Homography.identity()
        h1 = Homography.translation(delta, 0.0)
        m = identity_matching(3, objective=3 * SCORE.outlier_ticks)
        nbrs = {(0, 1), (1, 2)}
        pool = ProposalPool((h0, h1))

        loose = EnergyParams(beta=0, lam=0, score=SCORE)
        f_loose, _ = fit_step_e2(m, pool, loose, nbrs, left, right)
        assert f_loose == {0: 0, 1: 1, 2: 0}

        tight = EnergyParams(beta=0, lam=SCORE.ticks(0.01), score=SCORE)
        f_tight, _ = fit_step_e2(m, pool, tight, nbrs, left, right)
        assert f_tight == {0: 0, 1: 0, 2: 0}

    def test_two_node_margin_example(self):
        # unary margins of 1 tick toward different sides, pairwise 10 ticks:
        # all four labelings enumerate to a uniform optimum
        y, energy = solve_binary_submodular(
            [0, 1], [1, 0], [(0, 1, (0, 10, 10, 0))]
        )
        assert y[0] == y[1]
        assert energy == 1

    def test_pointwise_argmin_when_unregularized(self):
        rng = np.random.default_rng(10)
        h = Homography.translation(1, 1)
        left, right = scene_from_model(h, 10, rng)
        bad = Homography.translation(50, 50)
        m = identity_matching(10, objective=10 * SCORE.outlier_ticks)
        params = EnergyParams(beta=0, lam=0, score=SCORE)
        f, _ = fit_step_e2(m, ProposalPool((bad, h)), params, set(), left, right)
        unary = unary_cost_table(left, right, {i: i for i in range(10)}, [bad, h], SCORE)
        for p in range(10):
            col = f[p] if f[p] != OUTLIER else 2
            assert unary[p, col] == int(unary[p].min())


class TestReestimate:
    def test_exact_recovery(self):
        rng = np.random.default_rng(12)
        h = Homography(np.array([[1.2, 0.1, 4], [0.05, 0.9, -3], [1e-4, -2e-5, 1]]))
        left, right = scene_from_model(h, 15, rng)
        m = identity_matching(15, label=0)
        f = {p: 0 for p in range(15)}
        pool, new_f = reestimate(f, m, left, right)
        assert len(pool) == 1
        assert np.linalg.norm(pool.models[0].m - h.m) < 1e-7
        assert all(v == 0 for v in new_f.values())

    def test_small_support_dropped(self):
        rng = np.random.default_rng(13)
        left, right = scene_from_model(Homography.identity(), 5, rng)
        m = identity_matching(5, label=0)
        f = {0: 0, 1: 0, 2: 0, 3: OUTLIER, 4: OUTLIER}
        pool, new_f = reestimate(f, m, left, right)
        assert len(pool) == 0
        assert all(v == OUTLIER for v in new_f.values())

    def test_all_outlier_gives_empty_pool(self):
        rng = np.random.default_rng(14)
        left, right = scene_from_model(Homography.identity(), 5, rng)
        m = identity_matching(5)
        pool, new_f = reestimate({p: OUTLIER for p in range(5)}, m, left, right)
        assert len(pool) == 0
