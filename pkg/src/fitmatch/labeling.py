"""The fit half of block coordinate descent.

With the matching held fixed, each left feature has one partner and its cost
under label h is the matching score against that partner. Minimizing over a
labeling then decomposes into:

* label-cost only: a facility-location-style subset search (greedy
  add/delete/swap over labels, per-point best-label assignment inside), plus
  per-label model re-estimation, alternated until the energy stops falling;
* label cost + smoothness: expansion moves, one exact binary min-cut per
  candidate label, with the label-cost delta handled by accepting only
  energy-decreasing expansions.

All energies are integer ticks and every accepted step is checked to be
non-increasing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow import FlowNetwork, min_cut
from .gap import OUTLIER, JointMatching
from .geometry import (
    DegenerateGeometryError,
    FeatureSet,
    Homography,
    ScoreParams,
    feasible_pair_table,
    fit_homography,
    transfer_error_table,
)
from .lsgap import neighborhoods

# Sentinel for "this label can never serve this point": large enough to lose
# every comparison, small enough that sums of n of them stay inside int64.
INF_TICKS = 2**50

Labeling = dict[int, int]


@dataclass(frozen=True)
class EnergyParams:
    """Regularizer weights in ticks plus the scoring parameters (which carry
    the outlier cost T and the tick scale)."""

    beta: int
    lam: int
    score: ScoreParams

    def __post_init__(self):
        if self.beta < 0 or self.lam < 0:
            raise ValueError("beta and lambda must be nonnegative")

    @classmethod
    def from_units(cls, beta_units: float, lambda_units: float, score: ScoreParams):
        return cls(beta=score.ticks(beta_units), lam=score.ticks(lambda_units), score=score)


@dataclass(frozen=True)
class ProposalPool:
    models: tuple[Homography, ...]

    def __len__(self) -> int:
        return len(self.models)


def sample_proposals(
    left: FeatureSet,
    right: FeatureSet,
    matches,
    count: int,
    rng: np.random.Generator,
    max_attempts_per_model: int = 50,
) -> ProposalPool:
    """Fit `count` homographies from random 4-subsets of the matched pairs.

    Degenerate samples (collinear points) are re-drawn up to the attempt
    budget. Deterministic for a fixed generator state.
    """
    if count < 1:
        raise ValueError("proposal count must be >= 1")
    pairs = [
        (p, q)
        for p, q in matches
        if not left[p].dummy and not right[q].dummy
    ]
    if len(pairs) < 4:
        raise ValueError(f"need at least 4 real matched pairs, got {len(pairs)}")
    models = []
    for _ in range(count):
        fitted = None
        for _attempt in range(max_attempts_per_model):
            picks = rng.choice(len(pairs), size=4, replace=False)
            sample = [(left[pairs[i][0]].pos, right[pairs[i][1]].pos) for i in picks]
            try:
                fitted = fit_homography(sample)
                break
            except DegenerateGeometryError:
                continue
        if fitted is None:
            raise RuntimeError("proposal sampling exhausted its retry budget")
        models.append(fitted)
    return ProposalPool(models=tuple(models))


def unary_cost_table(
    left: FeatureSet,
    right: FeatureSet,
    partner: dict[int, int],
    models,
    score: ScoreParams,
) -> np.ndarray:
    """(n, L+1) ticks of each left feature against its fixed partner.

    Column L is the outlier at cost T. Infeasible combinations (descriptor
    angle over threshold, dummy on either side, undefined transfer) get
    INF_TICKS. Values are sliced out of the same full-table computation the
    matching instance builder uses, so ticks agree exactly across both.
    """
    n = len(left)
    n_models = len(models)
    table = np.full((n, n_models + 1), INF_TICKS, dtype=np.int64)
    table[:, n_models] = score.outlier_ticks

    lpos = left.positions()
    rpos = right.positions()
    feasible = feasible_pair_table(
        left.descriptor_matrix(), right.descriptor_matrix(), score
    )
    rows = np.arange(n)
    pcols = np.array([partner.get(p, -1) for p in range(n)], dtype=np.int64)
    valid = pcols >= 0
    if not valid.any():
        return table
    for k, h in enumerate(models):
        err = transfer_error_table(h, lpos, rpos)
        e = err[rows[valid], pcols[valid]]
        ok = feasible[rows[valid], pcols[valid]] & np.isfinite(e)
        col = np.full(int(valid.sum()), INF_TICKS, dtype=np.int64)
        col[ok] = np.round(e[ok] * score.cost_scale).astype(np.int64)
        table[valid, k] = col
    return table


def _assign_best(unary: np.ndarray, subset, current: np.ndarray | None = None) -> np.ndarray:
    """Per-point argmin over subset + outlier; ties keep the current label."""
    n_models = unary.shape[1] - 1
    cols = sorted(subset) + [n_models]
    sub = unary[:, cols]
    best_pos = np.argmin(sub, axis=1)
    best_cost = sub[np.arange(len(unary)), best_pos]
    labels = np.array([cols[i] for i in best_pos], dtype=np.int64)
    labels[labels == n_models] = OUTLIER
    if current is not None:
        cur_cols = np.where(current == OUTLIER, n_models, current)
        allowed = np.isin(current, sorted(subset)) | (current == OUTLIER)
        cur_cost = unary[np.arange(len(unary)), cur_cols]
        keep = allowed & (cur_cost == best_cost)
        labels[keep] = current[keep]
    return labels


def _labeling_energy(unary: np.ndarray, labels: np.ndarray, beta: int) -> int:
    n_models = unary.shape[1] - 1
    cols = np.where(labels == OUTLIER, n_models, labels)
    used = {int(h) for h in labels if h != OUTLIER}
    return int(unary[np.arange(len(unary)), cols].sum()) + beta * len(used)


def _subset_search(unary: np.ndarray, beta: int, labels: np.ndarray):
    """Greedy add/delete/swap over label subsets with per-point assignment."""
    pool = frozenset(range(unary.shape[1] - 1))
    current = frozenset(int(h) for h in labels if h != OUTLIER)

    def evaluate(subset):
        assigned = _assign_best(unary, subset, labels)
        return assigned, _labeling_energy(unary, assigned, beta)

    best_labels, energy = evaluate(current)

    def queue_for(subset):
        adds, deletes, swaps = neighborhoods(pool, subset)
        return adds + deletes + swaps

    queue = queue_for(current)
    while queue:
        cand = queue.pop(0)
        cand_labels, cand_energy = evaluate(cand)
        if cand_energy < energy:
            current, best_labels, energy = cand, cand_labels, cand_energy
            queue = queue_for(current)
    return best_labels, energy


def _refit_models(
    unary: np.ndarray,
    labels: np.ndarray,
    models: list[Homography],
    left: FeatureSet,
    right: FeatureSet,
    partner: dict[int, int],
    score: ScoreParams,
    min_support: int = 4,
) -> bool:
    """Re-estimate each used model on its support; keep a refit only when the
    support cost strictly drops (so the step is monotone in ticks)."""
    changed = False
    for h in sorted({int(x) for x in labels if x != OUTLIER}):
        support = [
            p
            for p in np.nonzero(labels == h)[0]
            if not left[int(p)].dummy and not right[partner[int(p)]].dummy
        ]
        if len(support) < min_support:
            continue
        pairs = [(left[int(p)].pos, right[partner[int(p)]].pos) for p in support]
        try:
            candidate = fit_homography(pairs)
        except DegenerateGeometryError:
            continue
        new_col = unary_cost_table(left, right, partner, [candidate], score)[:, 0]
        if int(new_col[support].sum()) < int(unary[support, h].sum()):
            unary[:, h] = new_col
            models[h] = candidate
            changed = True
    return changed


def fit_step_e1(
    m: JointMatching,
    pool: ProposalPool,
    params: EnergyParams,
    left: FeatureSet,
    right: FeatureSet,
) -> tuple[Labeling, ProposalPool]:
    """Label selection plus re-estimation for the label-cost energy.

    Alternates (a) the subset search over labels with per-point best-label
    assignment and (b) per-label model refits, until one full round no
    longer decreases the energy. The energy never rises above that of the
    incoming matching's own labeling.
    """
    partner = m.partner()
    models = list(pool.models)
    for _, _, h in m.triples:
        if h != OUTLIER and not 0 <= h < len(models):
            raise ValueError(f"matching uses label {h} outside the pool")
    unary = unary_cost_table(left, right, partner, models, params.score)
    labels = np.full(len(left), OUTLIER, dtype=np.int64)
    for p, _, h in m.triples:
        labels[p] = h
    energy = _labeling_energy(unary, labels, params.beta)
    while True:
        new_labels, new_energy = _subset_search(unary, params.beta, labels)
        if new_energy > energy:
            raise AssertionError("label selection must not increase the energy")
        labels, energy = new_labels, new_energy
        if not _refit_models(unary, labels, models, left, right, partner, params.score):
            break
        refit_energy = _labeling_energy(unary, labels, params.beta)
        if refit_energy > energy:
            raise AssertionError("accepted refits must not increase the energy")
        energy = refit_energy
    labeling = {p: int(labels[p]) for p in range(len(left))}
    return labeling, ProposalPool(models=tuple(models))


def solve_binary_submodular(cost0, cost1, pairwise):
    """Exact minimizer of a submodular binary labeling energy via min-cut.

    cost0/cost1 are per-node ticks for taking side 0/1; pairwise entries are
    (i, j, (a, b, c, d)) with a=E(0,0), b=E(0,1), c=E(1,0), d=E(1,1) and the
    submodularity requirement b + c >= a + d. Returns (assignment, energy).
    """
    cost0 = np.asarray(cost0, dtype=np.int64).copy()
    cost1 = np.asarray(cost1, dtype=np.int64).copy()
    n = cost0.size
    constant = 0
    edges = []
    for i, j, (a, b, c, d) in pairwise:
        if b + c < a + d:
            raise ValueError("pairwise term is not submodular")
        # E = a + (c-a)[y_i] + (d-c)[y_j] + (b+c-a-d)[y_i=0][y_j=1]
        constant += a
        cost1[i] += c - a
        cost1[j] += d - c
        edges.append((i, j, b + c - a - d))
    # shift per-node terms to be nonnegative capacities
    shift = np.minimum(cost0, cost1)
    constant += int(shift.sum())
    cost0 -= shift
    cost1 -= shift

    s, t = n, n + 1
    net = FlowNetwork(n + 2, s, t)
    ids = np.arange(n, dtype=np.int64)
    net.add_arcs(np.full(n, s, np.int64), ids, cost1, np.zeros(n, np.int64))
    net.add_arcs(ids, np.full(n, t, np.int64), cost0, np.zeros(n, np.int64))
    for i, j, w in edges:
        if w > 0:
            net.add_arc(i, j, w, 0)
    source_side, value = min_cut(net)
    assignment = np.array([0 if v in source_side else 1 for v in range(n)], dtype=np.int64)
    return assignment, int(value) + constant


def _potts_energy(labels: np.ndarray, edges, lam: int) -> int:
    return lam * sum(1 for i, j in edges if labels[i] != labels[j])


def fit_step_e2(
    m: JointMatching,
    pool: ProposalPool,
    params: EnergyParams,
    nbrs,
    left: FeatureSet,
    right: FeatureSet,
) -> tuple[Labeling, ProposalPool]:
    """Expansion-move labeling for the smoothness-regularized energy.

    Each candidate label's binary switch subproblem (Potts pairwise, hence
    submodular) is solved exactly by min-cut; an expansion is kept only when
    the full energy including the label-cost delta goes down. Models are
    re-estimated after every sweep. With lam == 0 the pairwise term vanishes
    and this is exactly the label-cost step.
    """
    if params.lam == 0:
        return fit_step_e1(m, pool, params, left, right)
    partner = m.partner()
    models = list(pool.models)
    for _, _, h in m.triples:
        if h != OUTLIER and not 0 <= h < len(models):
            raise ValueError(f"matching uses label {h} outside the pool")
    unary = unary_cost_table(left, right, partner, models, params.score)
    n_models = len(models)
    labels = np.full(len(left), OUTLIER, dtype=np.int64)
    for p, _, h in m.triples:
        labels[p] = h
    edges = sorted(set(nbrs))

    def total_energy(lab: np.ndarray) -> int:
        return _labeling_energy(unary, lab, params.beta) + _potts_energy(lab, edges, params.lam)

    energy = total_energy(labels)
    while True:
        improved = False
        for alpha in list(range(n_models)) + [OUTLIER]:
            col = n_models if alpha == OUTLIER else alpha
            cur_cols = np.where(labels == OUTLIER, n_models, labels)
            cost0 = unary[np.arange(len(labels)), cur_cols]
            cost1 = unary[:, col]
            pairwise = []
            for i, j in edges:
                a = params.lam * (labels[i] != labels[j])
                b = params.lam * (labels[i] != alpha)
                c = params.lam * (alpha != labels[j])
                pairwise.append((i, j, (int(a), int(b), int(c), 0)))
            switch, _ = solve_binary_submodular(cost0, cost1, pairwise)
            proposal = labels.copy()
            proposal[switch == 1] = alpha
            cand_energy = total_energy(proposal)
            if cand_energy < energy:
                labels, energy = proposal, cand_energy
                improved = True
        if _refit_models(unary, labels, models, left, right, partner, params.score):
            refit_energy = total_energy(labels)
            if refit_energy > energy:
                raise AssertionError("accepted refits must not increase the energy")
            energy = refit_energy
            improved = True
        if not improved:
            break
    labeling = {p: int(labels[p]) for p in range(len(left))}
    return labeling, ProposalPool(models=tuple(models))


def reestimate(
    f: Labeling,
    m: JointMatching,
    left: FeatureSet,
    right: FeatureSet,
    min_support: int = 4,
) -> tuple[ProposalPool, Labeling]:
    """Refit every used model from its supporting matched pairs.

    Labels with fewer than `min_support` real supporting pairs (or a
    degenerate support) are dropped and their features relabeled as
    outliers. Returns the surviving pool (original order, reindexed) and the
    remapped labeling.
    """
    partner = m.partner()
    survivors: list[Homography] = []
    remap: dict[int, int] = {}
    for h in sorted({v for v in f.values() if v != OUTLIER}):
        support = [
            p
            for p, v in f.items()
            if v == h and not left[p].dummy and p in partner and not right[partner[p]].dummy
        ]
        if len(support) < min_support:
            continue
        try:
            refit = fit_homography([(left[p].pos, right[partner[p]].pos) for p in sorted(support)])
        except DegenerateGeometryError:
            continue
        remap[h] = len(survivors)
        survivors.append(refit)
    new_f = {p: remap.get(v, OUTLIER) for p, v in f.items()}
    return ProposalPool(models=tuple(survivors)), new_f
