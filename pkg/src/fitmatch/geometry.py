"""Points, descriptors, homographies and the scalar matching scores.

Everything downstream (cost tables, flow networks, energies) is built from
the primitives here: projective transfer, symmetric transfer error, the
thresholded appearance penalty, normalized DLT fitting and the left-image
neighbor graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay, QhullError

# Cost units are quantized to integer ticks before they reach the flow
# solver so that optimality comparisons are exact.
DEFAULT_COST_SCALE = 10**6

# An infeasible match: never a finite cost, dominates any sum.
INFEASIBLE = math.inf


class PointAtInfinityError(ValueError):
    """Projective transfer produced a homogeneous w with |w| < 1e-12."""


class DegenerateGeometryError(ValueError):
    """Point configuration cannot determine a homography (rank deficient)."""


@dataclass(frozen=True)
class Point2:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x}, {self.y})")

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


def unit_descriptor(values) -> np.ndarray:
    """Validate and return a unit-norm descriptor vector."""
    v = np.asarray(values, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("descriptor must be a non-empty 1-d vector")
    norm = float(np.linalg.norm(v))
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"descriptor norm {norm} not within 1e-9 of 1")
    return v


@dataclass(frozen=True)
class Feature:
    """One image feature; dummies are balancing placeholders with no descriptor."""

    id: int
    pos: Point2
    desc: np.ndarray | None
    dummy: bool = False

    def __post_init__(self):
        if self.dummy:
            if self.desc is not None:
                raise ValueError("dummy features carry no descriptor")
        else:
            if self.desc is None:
                raise ValueError("real features need a descriptor")
            object.__setattr__(self, "desc", unit_descriptor(self.desc))


@dataclass(frozen=True)
class FeatureSet:
    side: str  # "left" or "right"
    features: tuple[Feature, ...]

    def __post_init__(self):
        if self.side not in ("left", "right"):
            raise ValueError(f"side must be left/right, got {self.side!r}")
        object.__setattr__(self, "features", tuple(self.features))
        for i, f in enumerate(self.features):
            if f.id != i:
                raise ValueError(f"feature ids must be 0..n-1 in order, got {f.id} at {i}")
        dims = {f.desc.size for f in self.features if not f.dummy}
        if len(dims) > 1:
            raise ValueError(f"mixed descriptor dimensions {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.features)

    def __getitem__(self, i: int) -> Feature:
        return self.features[i]

    @property
    def real_count(self) -> int:
        return sum(1 for f in self.features if not f.dummy)

    def positions(self) -> np.ndarray:
        """(n, 2) array of positions; dummy rows are NaN."""
        out = np.full((len(self.features), 2), np.nan)
        for i, f in enumerate(self.features):
            if not f.dummy:
                out[i] = (f.pos.x, f.pos.y)
        return out

    def descriptor_matrix(self) -> np.ndarray:
        """(n, d) descriptor matrix; dummy rows are NaN."""
        dims = [f.desc.size for f in self.features if not f.dummy]
        d = dims[0] if dims else 1
        out = np.full((len(self.features), d), np.nan)
        for i, f in enumerate(self.features):
            if not f.dummy:
                out[i] = f.desc
        return out


def feature_set(side: str, positions, descriptors) -> FeatureSet:
    """Build a FeatureSet from parallel position/descriptor arrays."""
    positions = np.asarray(positions, dtype=float)
    descriptors = np.asarray(descriptors, dtype=float)
    feats = [
        Feature(i, Point2(float(p[0]), float(p[1])), descriptors[i])
        for i, p in enumerate(positions)
    ]
    return FeatureSet(side, tuple(feats))


@dataclass(frozen=True)
class ScoreParams:
    """Thresholds shared by all scoring: descriptor angle cutoff, the uniform
    outlier/dummy cost T, and the integer quantization scale."""

    angle_threshold: float = math.pi / 4
    outlier_cost: float = 2.0
    cost_scale: int = DEFAULT_COST_SCALE

    def __post_init__(self):
        if not 0.0 < self.angle_threshold < math.pi:
            raise ValueError("angle_threshold must be in (0, pi)")
        if self.outlier_cost <= 0.0:
            raise ValueError("outlier cost must be positive")
        if self.cost_scale < 1:
            raise ValueError("cost_scale must be >= 1")

    def ticks(self, cost: float) -> int:
        """Quantize a nonnegative cost to integer ticks."""
        if not math.isfinite(cost):
            raise ValueError("cannot quantize a non-finite cost")
        return int(round(cost * self.cost_scale))

    @property
    def outlier_ticks(self) -> int:
        return self.ticks(self.outlier_cost)


class Homography:
    """A 3x3 projective map, stored in a canonical normalization.

    The matrix is scaled to unit Frobenius norm with the largest-magnitude
    entry positive, so two estimates of the same map compare equal entrywise.
    """

    __slots__ = ("m", "_inv")

    def __init__(self, m):
        m = np.asarray(m, dtype=float)
        if m.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("homography entries must be finite")
        norm = float(np.linalg.norm(m))
        if norm == 0.0:
            raise ValueError("zero matrix is not a homography")
        m = m / norm
        flat_idx = int(np.argmax(np.abs(m)))
        if m.flat[flat_idx] < 0:
            m = -m
        if abs(float(np.linalg.det(m))) <= 1e-12:
            raise ValueError("homography is singular after normalization")
        self.m = m
        self.m.setflags(write=False)
        self._inv = None

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        m = np.eye(3)
        m[0, 2] = tx
        m[1, 2] = ty
        return cls(m)

    @classmethod
    def scaling(cls, s: float) -> "Homography":
        return cls(np.diag([s, s, 1.0]))

    def inverse(self) -> "Homography":
        if self._inv is None:
            self._inv = Homography(np.linalg.inv(self.m))
        return self._inv

    def __eq__(self, other) -> bool:
        return isinstance(other, Homography) and np.array_equal(self.m, other.m)

    def __hash__(self):
        return hash(self.m.tobytes())

    def __repr__(self) -> str:
        return f"Homography({self.m.tolist()})"


def apply_homography(h: Homography, p: Point2) -> Point2:
    """Project p through h and dehomogenize."""
    v = h.m @ np.array([p.x, p.y, 1.0])
    w = v[2]
    if abs(w) < 1e-12:
        raise PointAtInfinityError(f"point {p} maps to infinity")
    return Point2(float(v[0] / w), float(v[1] / w))


def symmetric_transfer_error(h: Homography, p: Point2, q: Point2) -> float:
    """Forward residual ||h.p - q|| plus backward residual ||h^-1.q - p||."""
    fwd = apply_homography(h, p)
    bwd = apply_homography(h.inverse(), q)
    return math.hypot(fwd.x - q.x, fwd.y - q.y) + math.hypot(bwd.x - p.x, bwd.y - p.y)


def descriptor_angle(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"descriptor dimension mismatch: {a.shape} vs {b.shape}")
    # both unit norm, so the dot product is the cosine
    return float(np.arccos(np.clip(np.dot(a, b), -1.0, 1.0)))


def appearance_penalty(a, b, params: ScoreParams) -> float:
    """0 when the descriptor angle is under the threshold, INFEASIBLE otherwise."""
    a = unit_descriptor(a)
    b = unit_descriptor(b)
    if descriptor_angle(a, b) < params.angle_threshold:
        return 0.0
    return INFEASIBLE


def matching_score(h: Homography, p: Feature, q: Feature, params: ScoreParams) -> float:
    """Geometric transfer error plus appearance penalty; INFEASIBLE dominates."""
    if p.dummy or q.dummy:
        raise ValueError("matching_score is defined for real features only")
    penalty = appearance_penalty(p.desc, q.desc, params)
    if penalty == INFEASIBLE:
        return INFEASIBLE
    return symmetric_transfer_error(h, p.pos, q.pos) + penalty


def _normalizing_transform(pts: np.ndarray) -> np.ndarray:
    """Similarity transform mapping pts to zero centroid, mean distance sqrt(2)."""
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    mean_dist = float(np.mean(np.linalg.norm(centered, axis=1)))
    scale = math.sqrt(2.0) / mean_dist if mean_dist > 0 else 1.0
    t = np.array(
        [
            [scale, 0.0, -scale * centroid[0]],
            [0.0, scale, -scale * centroid[1]],
            [0.0, 0.0, 1.0],
        ]
    )
    return t


def fit_homography(pairs) -> Homography:
    """Least-squares DLT estimate with isotropic point normalization.

    Parameters
    ----------
    pairs : sequence of (Point2, Point2) or of ((x, y), (x, y))

    Raises
    ------
    DegenerateGeometryError
        Fewer than 4 pairs, or a rank-deficient configuration (e.g. three
        collinear points on either side).
    """
    left = []
    right = []
    for a, b in pairs:
        left.append((a.x, a.y) if isinstance(a, Point2) else (a[0], a[1]))
        right.append((b.x, b.y) if isinstance(b, Point2) else (b[0], b[1]))
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    n = left.shape[0]
    if n < 4:
        raise DegenerateGeometryError(f"need at least 4 pairs, got {n}")

    t_l = _normalizing_transform(left)
    t_r = _normalizing_transform(right)
    lh = np.column_stack([left, np.ones(n)]) @ t_l.T
    rh = np.column_stack([right, np.ones(n)]) @ t_r.T

    a = np.zeros((2 * n, 9))
    for i in range(n):
        x, y, w = lh[i]
        u, v, s = rh[i]
        a[2 * i] = [0, 0, 0, -s * x, -s * y, -s * w, v * x, v * y, v * w]
        a[2 * i + 1] = [s * x, s * y, s * w, 0, 0, 0, -u * x, -u * y, -u * w]

    _, sing, vt = np.linalg.svd(a)
    # a unique (up to scale) solution needs rank 8; collinear configurations
    # leave a 2-d null space
    if sing[7] <= max(sing[0], 1.0) * 1e-9:
        raise DegenerateGeometryError("degenerate configuration: DLT system is rank deficient")
    h_norm = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_r) @ h_norm @ t_l
    try:
        estimate = Homography(h)
        estimate.inverse()  # symmetric scoring needs the backward map too
    except ValueError as exc:
        raise DegenerateGeometryError(f"estimated homography is singular: {exc}") from exc
    return estimate


def _knn_edges(pts: np.ndarray, k: int) -> set[tuple[int, int]]:
    n = pts.shape[0]
    k = min(k, n - 1)
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    edges: set[tuple[int, int]] = set()
    for i in range(n):
        for j in np.argsort(d2[i], kind="stable")[:k]:
            edges.add((min(i, int(j)), max(i, int(j))))
    return edges


def neighbor_graph(points) -> set[tuple[int, int]]:
    """Delaunay edges of the given points as undirected (i, j) pairs, i < j.

    Falls back to the symmetric 5-nearest-neighbor graph when the
    triangulation is undefined (collinear input or fewer than 3 points).
    """
    pts = np.asarray([(p.x, p.y) if isinstance(p, Point2) else (p[0], p[1]) for p in points], dtype=float)
    n = pts.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 points, got {n}")
    if n >= 3:
        try:
            tri = Delaunay(pts)
        except QhullError:
            return _knn_edges(pts, 5)
        edges: set[tuple[int, int]] = set()
        for simplex in tri.simplices:
            for a in range(3):
                i, j = int(simplex[a]), int(simplex[(a + 1) % 3])
                edges.add((min(i, j), max(i, j)))
        return edges
    return _knn_edges(pts, 5)


# ---------------------------------------------------------------------------
# Vectorized helpers used by cost-table construction (same math as the scalar
# operations above, evaluated for whole feature sets at once).


def project_points(h: Homography, pts: np.ndarray) -> np.ndarray:
    """Apply h to an (n, 2) array of points; rows mapping to infinity become NaN."""
    ones = np.ones((pts.shape[0], 1))
    v = np.column_stack([pts, ones]) @ h.m.T
    w = v[:, 2]
    out = np.full_like(pts, np.nan)
    ok = np.abs(w) >= 1e-12
    out[ok] = v[ok, :2] / w[ok, None]
    return out


def transfer_error_table(h: Homography, left_pts: np.ndarray, right_pts: np.ndarray) -> np.ndarray:
    """(n_l, n_r) table of symmetric transfer errors; NaN where undefined."""
    fwd = project_points(h, left_pts)
    bwd = project_points(h.inverse(), right_pts)
    d_fwd = np.linalg.norm(fwd[:, None, :] - right_pts[None, :, :], axis=2)
    d_bwd = np.linalg.norm(left_pts[:, None, :] - bwd[None, :, :], axis=2)
    return d_fwd + d_bwd


def feasible_pair_table(left_desc: np.ndarray, right_desc: np.ndarray, params: ScoreParams) -> np.ndarray:
    """(n_l, n_r) boolean table: descriptor angle under the threshold.

    NaN descriptor rows (dummies) are infeasible against everything.
    """
    cos = np.clip(left_desc @ right_desc.T, -1.0, 1.0)
    with np.errstate(invalid="ignore"):
        angles = np.arccos(cos)
        return angles < params.angle_threshold
