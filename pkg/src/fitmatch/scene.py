"""Synthetic multi-plane scenes and the iterative ground-truth matcher.

Scenes are built by construction: per plane, a bounded random homography maps
uniformly scattered left points into the right image, descriptors are shared
between true correspondents up to angular noise, and occlusion drops features
independently per side. The construction record doubles as exact ground
truth.

The ground-truth matcher re-derives a matching for one region pair the slow
way: ratio-test seed matches, a robust initial model, then alternating
optimal one-to-one assignment (with dummies and the outlier model absorbing
occlusions) and model re-estimation until the objective stops improving,
restarted several times.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .efm import sbr_match
from .gap import OUTLIER, GapInstance, JointMatching, balance_with_dummies, solve_gap
from .geometry import (
    DegenerateGeometryError,
    Feature,
    FeatureSet,
    Homography,
    Point2,
    ScoreParams,
    fit_homography,
    symmetric_transfer_error,
    unit_descriptor,
)


class RansacFailureError(RuntimeError):
    """No sampled model reached the minimum inlier support."""


def _error_or_inf(h: Homography, a: Point2, b: Point2) -> float:
    """Symmetric transfer error; a pair that maps to infinity is no inlier."""
    try:
        return symmetric_transfer_error(h, a, b)
    except ValueError:
        return float("inf")


@dataclass(frozen=True)
class SceneSpec:
    plane_count: int = 3
    features_per_plane: int = 50
    image_size: float = 512.0
    noise_sigma: float = 0.0
    occlusion_rate: float = 0.0
    descriptor_dim: int = 8
    descriptor_noise: float = 0.0  # radians
    repeated_texture_planes: tuple[int, ...] = ()  # planes sharing one descriptor
    rng_seed: int = 0

    def __post_init__(self):
        if self.plane_count < 1 or self.features_per_plane < 1:
            raise ValueError("counts must be >= 1")
        if not 0.0 <= self.occlusion_rate < 1.0:
            raise ValueError("occlusion_rate must be in [0, 1)")
        if self.descriptor_dim < 2:
            raise ValueError("descriptor_dim must be >= 2")
        bad = [k for k in self.repeated_texture_planes if not 0 <= k < self.plane_count]
        if bad:
            raise ValueError(f"repeated_texture_planes out of range: {bad}")


@dataclass(frozen=True)
class GroundTruth:
    """The construction record: true models, matching, labeling, membership."""

    models: tuple[Homography, ...]
    matching: tuple[tuple[int, int, int], ...]  # (left id, right id, plane)
    labeling: dict[int, int]  # left id -> plane, or OUTLIER when the partner is occluded
    region_membership: dict[int, int]  # left id -> plane, occlusion-independent
    left_count: int
    right_count: int

    def pairs(self) -> set[tuple[int, int]]:
        return {(p, q) for p, q, _ in self.matching}


def _random_plane_homography(rng: np.random.Generator, image_size: float, max_tries: int = 100) -> Homography:
    """A well-conditioned random map: similarity plus mild perspective."""
    for _ in range(max_tries):
        angle = rng.uniform(-0.3, 0.3)
        scale = rng.uniform(0.85, 1.2)
        tx, ty = rng.uniform(-0.15, 0.15, size=2) * image_size
        shear = rng.uniform(-0.1, 0.1)
        persp = rng.uniform(-0.3, 0.3, size=2) / image_size
        c, s = np.cos(angle), np.sin(angle)
        m = np.array(
            [
                [scale * c, scale * (shear - s), tx],
                [scale * s, scale * c, ty],
                [persp[0], persp[1], 1.0],
            ]
        )
        try:
            h = Homography(m)
        except ValueError:
            continue
        if np.linalg.cond(h.m) < 1e4:
            return h
    raise RuntimeError("could not draw a well-conditioned homography")


def _perturb_direction(base: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Rotate a unit vector by a random angle ~ N(0, sigma) within the sphere."""
    if sigma <= 0.0:
        return base.copy()
    raw = rng.normal(size=base.size)
    ortho = raw - np.dot(raw, base) * base
    norm = np.linalg.norm(ortho)
    if norm < 1e-12:
        return base.copy()
    ortho /= norm
    angle = rng.normal(scale=sigma)
    return unit_descriptor(np.cos(angle) * base + np.sin(angle) * ortho)


def generate_scene(spec: SceneSpec):
    """Build (left, right, ground_truth) deterministically from the spec."""
    rng = np.random.default_rng(spec.rng_seed)
    k = spec.plane_count
    size = spec.image_size

    models = tuple(_random_plane_homography(rng, size) for _ in range(k))
    shared_base = {
        plane: _random_unit(rng, spec.descriptor_dim)
        for plane in spec.repeated_texture_planes
    }

    # full universe before occlusion: one left/right record per (plane, index)
    lrecs = []  # (pos, desc, plane)
    rrecs = []
    for plane in range(k):
        x_lo = plane * size / k
        x_hi = (plane + 1) * size / k
        for _ in range(spec.features_per_plane):
            p = Point2(float(rng.uniform(x_lo, x_hi)), float(rng.uniform(0, size)))
            v = models[plane].m @ np.array([p.x, p.y, 1.0])
            qx, qy = v[0] / v[2], v[1] / v[2]
            if spec.noise_sigma > 0:
                qx += rng.normal(scale=spec.noise_sigma)
                qy += rng.normal(scale=spec.noise_sigma)
            base = shared_base.get(plane)
            if base is None:
                base = _random_unit(rng, spec.descriptor_dim)
            ldesc = _perturb_direction(base, spec.descriptor_noise, rng)
            rdesc = _perturb_direction(base, spec.descriptor_noise, rng)
            lrecs.append((p, ldesc, plane))
            rrecs.append((Point2(float(qx), float(qy)), rdesc, plane))

    total = len(lrecs)
    keep_left = rng.random(total) >= spec.occlusion_rate
    keep_right = rng.random(total) >= spec.occlusion_rate
    right_order = rng.permutation(int(keep_right.sum()))

    left_ids = np.full(total, -1)
    right_ids = np.full(total, -1)
    left_feats = []
    for u in range(total):
        if keep_left[u]:
            pos, desc, _ = lrecs[u]
            left_ids[u] = len(left_feats)
            left_feats.append(Feature(len(left_feats), pos, desc))
    kept_right = [u for u in range(total) if keep_right[u]]
    right_feats: list[Feature | None] = [None] * len(kept_right)
    for slot, u in enumerate(kept_right):
        rid = int(right_order[slot])
        pos, desc, _ = rrecs[u]
        right_ids[u] = rid
        right_feats[rid] = Feature(rid, pos, desc)

    matching = []
    labeling = {}
    membership = {}
    for u in range(total):
        plane = lrecs[u][2]
        if keep_left[u]:
            p = int(left_ids[u])
            membership[p] = plane
            if keep_right[u]:
                matching.append((p, int(right_ids[u]), plane))
                labeling[p] = plane
            else:
                labeling[p] = OUTLIER

    left = FeatureSet("left", tuple(left_feats))
    right = FeatureSet("right", tuple(right_feats))
    gt = GroundTruth(
        models=models,
        matching=tuple(sorted(matching)),
        labeling=labeling,
        region_membership=membership,
        left_count=len(left),
        right_count=len(right),
    )
    return left, right, gt


def _random_unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    while True:
        v = rng.normal(size=dim)
        n = np.linalg.norm(v)
        if n > 1e-9:
            return unit_descriptor(v / n)


def ransac_homography(
    pairs,
    iterations: int,
    inlier_threshold: float,
    rng: np.random.Generator,
) -> Homography:
    """Best minimal-sample model by inlier count, refit on its inliers.

    Inliers are pairs with symmetric transfer error under the threshold.
    Raises RansacFailureError when no sampled model collects 4 inliers.
    """
    pts = [(a if isinstance(a, Point2) else Point2(*a), b if isinstance(b, Point2) else Point2(*b)) for a, b in pairs]
    n = len(pts)
    if n < 4:
        raise RansacFailureError(f"need at least 4 pairs, got {n}")
    best_count = 0
    best_inliers: list[int] = []
    best_model: Homography | None = None
    for _ in range(iterations):
        picks = rng.choice(n, size=4, replace=False)
        try:
            cand = fit_homography([pts[i] for i in picks])
        except DegenerateGeometryError:
            continue
        inliers = [
            i
            for i, (a, b) in enumerate(pts)
            if _error_or_inf(cand, a, b) < inlier_threshold
        ]
        if len(inliers) > best_count:
            best_count = len(inliers)
            best_inliers = inliers
            best_model = cand
            if best_count == n:
                break
    if best_model is None or best_count < 4:
        raise RansacFailureError(
            f"no model with >= 4 inliers after {iterations} iterations"
        )
    try:
        return fit_homography([pts[i] for i in best_inliers])
    except DegenerateGeometryError:
        return best_model


def _assignment_descent(
    left: FeatureSet,
    right: FeatureSet,
    model: Homography,
    params: ScoreParams,
    max_rounds: int = 50,
):
    """Alternate optimal assignment and model refits; objective never rises.

    Returns (matching, model, objective_trace). A refit is kept only when the
    re-solved assignment objective strictly drops, so the trace decreases by
    construction and any violation raises.
    """
    def solve_for(h: Homography) -> JointMatching:
        inst = GapInstance.from_features(left, right, [h], params, include_outlier=True)
        return solve_gap(inst)

    matching = solve_for(model)
    trace = [matching.objective]
    for _ in range(max_rounds):
        support = [
            (left[p].pos, right[q].pos)
            for p, q, h in matching.triples
            if h != OUTLIER and not left[p].dummy and not right[q].dummy
        ]
        if len(support) < 4:
            break
        try:
            refit = fit_homography(support)
        except DegenerateGeometryError:
            break
        candidate = solve_for(refit)
        if candidate.objective < matching.objective:
            model, matching = refit, candidate
            trace.append(matching.objective)
        else:
            break
    if any(b >= a for a, b in zip(trace, trace[1:])):
        raise AssertionError("assignment descent objective must strictly decrease")
    return matching, model, trace


def gt_assignment(
    s_l: FeatureSet,
    s_r: FeatureSet,
    params: ScoreParams,
    restarts: int,
    rng: np.random.Generator,
    ratio: float = 0.8,
    ransac_iterations: int = 200,
):
    """Reference matching for a single-model region pair.

    Seed matches come from the ratio test, a robust sample fit provides the
    initial model, and the assignment/refit alternation runs to a fixed
    point. The whole procedure restarts `restarts` times (fresh robust
    initialization each time) and the lowest final objective wins.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    left, right = balance_with_dummies(s_l, s_r, params)
    seed_pairs = sbr_match(left, right, ratio)
    point_pairs = [(left[p].pos, right[q].pos) for p, q in seed_pairs]

    best = None
    failures = []
    for child in rng.spawn(restarts):
        try:
            init = ransac_homography(
                point_pairs, ransac_iterations, params.outlier_cost, child
            )
        except RansacFailureError as exc:
            failures.append(exc)
            continue
        matching, model, _trace = _assignment_descent(left, right, init, params)
        if best is None or matching.objective < best[0].objective:
            best = (matching, model)
    if best is None:
        raise RansacFailureError(
            f"all {restarts} restarts failed to initialize: {failures[-1] if failures else 'no seed matches'}"
        )
    return best
