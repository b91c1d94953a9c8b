"""Top-level energies and the alternating drivers.

The joint state couples a matching, a labeling consistent with it, and the
model pool. One driver iteration alternates a fit step (labels and models,
matching fixed) with a matching step (matching and labels, models fixed);
both halves are individually non-increasing in the target energy, which is
asserted on every trace append.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .gap import OUTLIER, GapInstance, JointMatching, balance_with_dummies, solve_lc_gap
from .geometry import FeatureSet, ScoreParams, neighbor_graph
from .labeling import (
    EnergyParams,
    Labeling,
    ProposalPool,
    fit_step_e1,
    fit_step_e2,
    sample_proposals,
    unary_cost_table,
)
from .lsgap import ls_gap

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class JointState:
    """Matching + labeling + models, with the energy history that produced it.

    The feature sets are the balanced ones every id refers to.
    """

    left: FeatureSet
    right: FeatureSet
    matching: JointMatching
    labeling: Labeling
    models: ProposalPool
    energy_trace: tuple[tuple[str, int], ...] = field(default_factory=tuple)

    def validate(self) -> None:
        self.matching.validate(len(self.left))
        for p, _, h in self.matching.triples:
            if self.labeling.get(p) != h:
                raise ValueError(f"labeling[{p}] != matching label {h}")
        energies = [e for _, e in self.energy_trace]
        if any(b > a for a, b in zip(energies, energies[1:])):
            raise ValueError("energy trace must be non-increasing")


def _used_label_count(m: JointMatching) -> int:
    return len(m.labels_used())


def energy_e1(state: JointState, params: EnergyParams) -> int:
    """Matching cost plus label cost; raises on any constraint violation."""
    state.validate()
    return state.matching.objective + params.beta * _used_label_count(state.matching)


def smoothness_ticks(labeling: Labeling, nbrs, lam: int) -> int:
    return lam * sum(1 for i, j in nbrs if labeling[i] != labeling[j])


def energy_e2(state: JointState, params: EnergyParams, nbrs) -> int:
    """Matching cost plus label cost plus the label-discontinuity penalty."""
    return energy_e1(state, params) + smoothness_ticks(state.labeling, nbrs, params.lam)


def sbr_match(left: FeatureSet, right: FeatureSet, ratio: float) -> list[tuple[int, int]]:
    """Second-best-ratio acceptance on descriptor distances.

    A left feature claims its nearest right feature iff best < ratio *
    second_best (multiplicative form, so identical distances are rejected).
    Conflicting claims keep the smaller best-distance one. With fewer than
    two real right features the second-best is undefined; every nearest
    claim is accepted and the situation is logged.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must be in (0, 1]")
    lefts = [f for f in left.features if not f.dummy]
    rights = [f for f in right.features if not f.dummy]
    if not lefts or not rights:
        return []
    ldesc = np.array([f.desc for f in lefts])
    rdesc = np.array([f.desc for f in rights])
    d = np.linalg.norm(ldesc[:, None, :] - rdesc[None, :, :], axis=2)

    claims = []
    if len(rights) < 2:
        log.warning("fewer than two right features: second-best undefined, accepting nearest")
        for i, f in enumerate(lefts):
            j = int(np.argmin(d[i]))
            claims.append((float(d[i, j]), f.id, rights[j].id))
    else:
        for i, f in enumerate(lefts):
            order = np.argsort(d[i], kind="stable")
            j, j2 = int(order[0]), int(order[1])
            if d[i, j] < ratio * d[i, j2]:
                claims.append((float(d[i, j]), f.id, rights[j].id))
    claims.sort()
    taken_left: set[int] = set()
    taken_right: set[int] = set()
    accepted = []
    for _, p, q in claims:
        if p in taken_left or q in taken_right:
            continue
        taken_left.add(p)
        taken_right.add(q)
        accepted.append((p, q))
    return sorted(accepted)


def initial_matching(
    pairs, left: FeatureSet, right: FeatureSet, score: ScoreParams
) -> JointMatching:
    """Complete a pair set to a full matching; everything starts as outlier.

    Accepted pairs keep their partners, leftover features are paired in id
    order. All triples carry the outlier label, so the objective is n * T.
    """
    n = len(left)
    partner = dict(pairs)
    used_right = set(partner.values())
    free_right = [q for q in range(n) if q not in used_right]
    triples = []
    for p in range(n):
        if p in partner:
            triples.append((p, partner[p], OUTLIER))
        else:
            triples.append((p, free_right.pop(0), OUTLIER))
    m = JointMatching(triples=tuple(triples), objective=n * score.outlier_ticks)
    m.validate(n)
    return m


def relabel_matching(
    m: JointMatching,
    labeling: Labeling,
    pool: ProposalPool,
    left: FeatureSet,
    right: FeatureSet,
    score: ScoreParams,
) -> JointMatching:
    """Same partners, new labels; the objective is recomputed from scratch."""
    partner = m.partner()
    unary = unary_cost_table(left, right, partner, pool.models, score)
    n_models = len(pool.models)
    total = 0
    triples = []
    for p in range(len(left)):
        h = labeling[p]
        col = n_models if h == OUTLIER else h
        total += int(unary[p, col])
        triples.append((p, partner[p], h))
    return JointMatching(triples=tuple(triples), objective=total)


def left_neighbor_edges(left: FeatureSet) -> set[tuple[int, int]]:
    """Near-neighbor graph over the real left features."""
    real = [f for f in left.features if not f.dummy]
    if len(real) < 2:
        return set()
    edges = neighbor_graph([f.pos for f in real])
    ids = [f.id for f in real]
    return {(ids[i], ids[j]) for i, j in edges}


def _append(trace, label, energy, *, allow_equal=True):
    if trace and energy > trace[-1][1]:
        raise AssertionError(
            f"energy increased at {label}: {trace[-1][1]} -> {energy}"
        )
    if not allow_equal and trace and energy == trace[-1][1]:
        raise AssertionError(f"energy must strictly decrease at {label}")
    return trace + [(label, energy)]


def run_ef(
    left: FeatureSet,
    right: FeatureSet,
    ratio: float,
    params: EnergyParams,
    rng: np.random.Generator,
    proposal_count: int = 10,
    max_iter: int = 20,
) -> JointState:
    """Baseline: fit models on a fixed ratio-test matching, never revise it."""
    lb, rb = balance_with_dummies(left, right, params.score)
    pairs = sbr_match(lb, rb, ratio)
    m = initial_matching(pairs, lb, rb, params.score)
    pool = sample_proposals(lb, rb, pairs, proposal_count, rng)
    nbrs = left_neighbor_edges(lb) if params.lam > 0 else set()
    labeling = {p: OUTLIER for p in range(len(lb))}

    def full_energy(mm, ff):
        e = mm.objective + params.beta * _used_label_count(mm)
        return e + smoothness_ticks(ff, nbrs, params.lam)

    trace = [("init", full_energy(m, labeling))]
    for it in range(1, max_iter + 1):
        if params.lam > 0:
            labeling, pool = fit_step_e2(m, pool, params, nbrs, lb, rb)
        else:
            labeling, pool = fit_step_e1(m, pool, params, lb, rb)
        m = relabel_matching(m, labeling, pool, lb, rb, params.score)
        energy = full_energy(m, labeling)
        prev = trace[-1][1]
        trace = _append(trace, f"fit{it}", energy)
        if prev - energy < 1:
            break
    state = JointState(
        left=lb, right=rb, matching=m, labeling=labeling, models=pool,
        energy_trace=tuple(trace),
    )
    state.validate()
    return state


def run_efm1(
    left: FeatureSet,
    right: FeatureSet,
    params: EnergyParams,
    rng: np.random.Generator,
    ratio: float = 0.7,
    proposal_count: int = 10,
    max_iter: int = 20,
) -> JointState:
    """Alternate the label-cost fit step with the label-subset matching step.

    Starts from a ratio-test matching, stops when one full iteration fails
    to reduce the energy by a relative 1e-9 (which in integer ticks means an
    exact fixed point at ordinary energy scales) or at max_iter.
    """
    lb, rb = balance_with_dummies(left, right, params.score)
    pairs = sbr_match(lb, rb, ratio)
    m = initial_matching(pairs, lb, rb, params.score)
    pool = sample_proposals(lb, rb, pairs, proposal_count, rng)
    labeling = {p: OUTLIER for p in range(len(lb))}

    trace = [("init", m.objective)]
    for it in range(1, max_iter + 1):
        prev = trace[-1][1]
        labeling, pool = fit_step_e1(m, pool, params, lb, rb)
        m = relabel_matching(m, labeling, pool, lb, rb, params.score)
        trace = _append(trace, f"fit{it}", m.objective + params.beta * _used_label_count(m))

        inst = GapInstance.from_features(lb, rb, pool.models, params.score)
        used = {h for h in labeling.values() if h != OUTLIER}
        sol = ls_gap(inst, params.beta, initial_subset=used)
        m = sol.matching
        labeling = m.labeling()
        trace = _append(trace, f"match{it}", sol.energy)

        if prev - trace[-1][1] < max(1, prev // 10**9):
            break
    state = JointState(
        left=lb, right=rb, matching=m, labeling=labeling, models=pool,
        energy_trace=tuple(trace),
    )
    state.validate()
    return state


def run_efm2(
    state: JointState,
    params: EnergyParams,
    nbrs=None,
    iters: int = 1,
) -> JointState:
    """Refine a converged state under the smoothness-regularized energy.

    One iteration is the recommended default: expansion-based fit step, then
    a label-constrained matching step that can re-pair features without
    touching the labeling.
    """
    lb, rb = state.left, state.right
    if nbrs is None:
        nbrs = left_neighbor_edges(lb)
    m, labeling, pool = state.matching, state.labeling, state.models

    def full_energy(mm, ff):
        e = mm.objective + params.beta * _used_label_count(mm)
        return e + smoothness_ticks(ff, nbrs, params.lam)

    trace = [("init", full_energy(m, labeling))]
    for it in range(1, iters + 1):
        labeling, pool = fit_step_e2(m, pool, params, nbrs, lb, rb)
        m = relabel_matching(m, labeling, pool, lb, rb, params.score)
        trace = _append(trace, f"fit{it}", full_energy(m, labeling))

        inst = GapInstance.from_features(lb, rb, pool.models, params.score)
        m = solve_lc_gap(inst, labeling)
        labeling = m.labeling()
        trace = _append(trace, f"match{it}", full_energy(m, labeling))
    new_state = replace(
        state, matching=m, labeling=labeling, models=pool, energy_trace=tuple(trace)
    )
    new_state.validate()
    return new_state
