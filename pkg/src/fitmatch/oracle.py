"""Ground truth by exhaustion: brute-force matching and matrix structure checks.

Everything here is test/benchmark machinery. The brute-force solver shares no
code with the flow reduction, which is what makes it a usable oracle for it.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .gap import OUTLIER, GapInfeasibleError, GapInstance, JointMatching

MAX_BRUTE_FORCE = 7


def brute_force_gap(inst: GapInstance) -> JointMatching:
    """Enumerate every permutation, picking each pair's cheapest label.

    Label choices are independent per pair once the permutation is fixed, so
    scanning labels per pair covers the full permutation x labeling space.
    Ties break lexicographically: first permutation found wins, and within a
    pair the lowest model index (the outlier last).
    """
    n = inst.n
    if n > MAX_BRUTE_FORCE:
        raise ValueError(f"instance too large for exhaustion: {n} > {MAX_BRUTE_FORCE}")
    candidate_labels = list(inst.label_ids)
    if inst.include_outlier:
        candidate_labels.append(OUTLIER)

    best_cost = None
    best: list[tuple[int, int, int]] | None = None
    for perm in itertools.permutations(range(n)):
        total = 0
        triples = []
        feasible = True
        for p, q in enumerate(perm):
            pair_best = None
            pair_label = None
            for h in candidate_labels:
                c = inst.cost(p, q, h)
                if c is not None and (pair_best is None or c < pair_best):
                    pair_best = c
                    pair_label = h
            if pair_best is None:
                feasible = False
                break
            total += pair_best
            triples.append((p, q, pair_label))
        if not feasible:
            continue
        if best_cost is None or total < best_cost:
            best_cost = total
            best = triples
    if best is None:
        raise GapInfeasibleError("no feasible matching exists")
    m = JointMatching(triples=tuple(sorted(best)), objective=int(best_cost))
    m.validate(n)
    return m


@dataclass(frozen=True)
class CoefficientMatrix:
    """0/1 constraint matrix of the joint matching integer program.

    Rows 0..n-1 are the right-feature cover constraints, rows n..2n-1 the
    left-feature ones; columns enumerate (label, right, left) triples with the
    label outermost, so the matrix is the single-label block repeated once per
    label.
    """

    n: int
    label_count: int
    a: np.ndarray

    @property
    def rows(self) -> int:
        return self.a.shape[0]

    @property
    def cols(self) -> int:
        return self.a.shape[1]


def coefficient_matrix(n: int, label_count: int) -> CoefficientMatrix:
    """Build the 2n x (L n^2) constraint matrix."""
    if n < 1 or label_count < 1:
        raise ValueError("need n >= 1 and label_count >= 1")
    block = np.zeros((2 * n, n * n), dtype=np.int64)
    for q in range(n):
        block[q, q * n : (q + 1) * n] = 1  # right-feature constraint: a contiguous run
    for p in range(n):
        block[n + p, p::n] = 1  # left-feature constraint: strided hits
    a = np.hstack([block] * label_count)
    return CoefficientMatrix(n=n, label_count=label_count, a=a)


def check_total_unimodularity(matrix, max_order: int) -> bool:
    """True iff every k x k minor (k <= max_order) has determinant in {-1, 0, 1}.

    Accepts a CoefficientMatrix or any integer array. Minors are enumerated
    exhaustively, so the row count is capped at 6. Determinants of such small
    {-1, 0, 1} matrices are exact in float64.
    """
    a = matrix.a if isinstance(matrix, CoefficientMatrix) else np.asarray(matrix)
    rows, cols = a.shape
    if rows > 6:
        raise ValueError(f"minor enumeration is capped at 6 rows, got {rows}")
    max_order = min(max_order, rows, cols)
    for k in range(1, max_order + 1):
        row_sets = list(itertools.combinations(range(rows), k))
        col_sets = list(itertools.combinations(range(cols), k))
        # batch all minors of order k through one vectorized det call
        minors = np.empty((len(row_sets) * len(col_sets), k, k))
        idx = 0
        for rs in row_sets:
            sub = a[list(rs), :]
            for cs in col_sets:
                minors[idx] = sub[:, list(cs)]
                idx += 1
        dets = np.linalg.det(minors)
        rounded = np.round(dets)
        if np.max(np.abs(dets - rounded)) > 1e-6:
            raise AssertionError("determinant rounding exceeded tolerance")
        if not np.all(np.isin(rounded, (-1.0, 0.0, 1.0))):
            return False
    return True
