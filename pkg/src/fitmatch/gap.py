"""Joint matching as min-cost-max-flow: network constructions and solvers.

A problem instance fixes two balanced feature sets, a list of candidate
homographies (labels) and an optional outlier pseudo-label with uniform cost
T. The solver builds a layered unit-capacity network (source, per-feature
nodes, per-feature-per-label nodes, sink), puts the quantized matching score
on the label-to-label arcs, and reads the optimal joint matching off the
saturated arcs of a min-cost max-flow.

Infeasible appearance pairs generate no arc at all. Outlier arcs have one
uniform cost, so the complete bipartite outlier layer is factorized through a
single hub node (2n arcs instead of n^2) without changing the objective;
outlier-routed features are paired off in ascending id order.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .flow import FlowNetwork, solve_min_cost_max_flow
from .geometry import (
    Feature,
    FeatureSet,
    Homography,
    Point2,
    ScoreParams,
    feasible_pair_table,
    transfer_error_table,
    unit_descriptor,
)

# Pseudo-label for occluded/unmatched features.
OUTLIER = -1


class GapInfeasibleError(ValueError):
    """No one-to-one matching exists under the given labels and pruning."""


def balance_with_dummies(left: FeatureSet, right: FeatureSet, params: ScoreParams | None = None):
    """Append dummy features to the smaller set until sizes match."""

    def pad(fs: FeatureSet, count: int) -> FeatureSet:
        if count == 0:
            return fs
        extra = [
            Feature(len(fs) + i, Point2(0.0, 0.0), None, dummy=True) for i in range(count)
        ]
        return FeatureSet(fs.side, fs.features + tuple(extra))

    diff = len(left) - len(right)
    if diff < 0:
        return pad(left, -diff), right
    return left, pad(right, diff)


@dataclass(frozen=True)
class JointMatching:
    """Active (left, right, label) triples plus the objective in ticks.

    Each left id and each right id appears in exactly one triple; the label
    is a model index or OUTLIER.
    """

    triples: tuple[tuple[int, int, int], ...]
    objective: int

    def validate(self, n: int) -> None:
        lefts = [p for p, _, _ in self.triples]
        rights = [q for _, q, _ in self.triples]
        if sorted(lefts) != list(range(n)):
            raise ValueError("each left feature must be matched exactly once")
        if sorted(rights) != list(range(n)):
            raise ValueError("each right feature must be matched exactly once")

    def labeling(self) -> dict[int, int]:
        return {p: h for p, _, h in self.triples}

    def partner(self) -> dict[int, int]:
        return {p: q for p, q, _ in self.triples}

    def labels_used(self) -> set[int]:
        return {h for _, _, h in self.triples if h != OUTLIER}


@dataclass(frozen=True)
class GapInstance:
    """Balanced matching instance with per-label integer cost tables.

    cost_tables[h] is an (n, n) int64 array of ticks with -1 marking an
    infeasible pair; the outlier label is not tabulated (uniform cost T).
    active_labels restricts the usable label subset without copying tables.
    """

    left: FeatureSet
    right: FeatureSet
    models: tuple[Homography, ...]
    include_outlier: bool
    params: ScoreParams
    cost_tables: tuple[np.ndarray, ...]
    active_labels: frozenset[int] | None = None

    def __post_init__(self):
        if len(self.left) != len(self.right):
            raise ValueError("instance must be balanced; call balance_with_dummies first")
        for table in self.cost_tables:
            if table.shape != (len(self.left), len(self.right)):
                raise ValueError("cost table shape mismatch")
            if (table < -1).any():
                raise ValueError("costs must be nonnegative ticks (-1 marks infeasible)")

    @property
    def n(self) -> int:
        return len(self.left)

    @property
    def label_ids(self) -> tuple[int, ...]:
        """Active model labels in ascending order (outlier excluded)."""
        if self.active_labels is None:
            return tuple(range(len(self.models)))
        return tuple(sorted(self.active_labels))

    def cost(self, p: int, q: int, h: int) -> int | None:
        """Ticks for triple (p, q, h); None when infeasible."""
        if h == OUTLIER:
            return self.params.outlier_ticks if self.include_outlier else None
        if self.active_labels is not None and h not in self.active_labels:
            return None
        c = int(self.cost_tables[h][p, q])
        return None if c < 0 else c

    def restricted(self, labels) -> "GapInstance":
        """Same instance with the usable model set restricted to `labels`."""
        labels = frozenset(labels)
        if not labels <= set(range(len(self.models))):
            raise ValueError(f"labels {sorted(labels)} outside the model list")
        return replace(self, active_labels=labels)

    @classmethod
    def from_features(
        cls,
        left: FeatureSet,
        right: FeatureSet,
        models,
        params: ScoreParams,
        include_outlier: bool = True,
    ) -> "GapInstance":
        """Balance the sets and materialize quantized cost tables.

        A pair is tabulated only when the descriptor angle passes the
        threshold and the transfer error is defined; dummy features are
        infeasible under every real label and route through the outlier.
        """
        left, right = balance_with_dummies(left, right, params)
        n = len(left)
        feasible = feasible_pair_table(
            left.descriptor_matrix(), right.descriptor_matrix(), params
        )
        lpos = left.positions()
        rpos = right.positions()
        tables = []
        for h in models:
            err = transfer_error_table(h, lpos, rpos)
            table = np.full((n, n), -1, dtype=np.int64)
            ok = feasible & np.isfinite(err)
            table[ok] = np.round(err[ok] * params.cost_scale).astype(np.int64)
            tables.append(table)
        return cls(
            left=left,
            right=right,
            models=tuple(models),
            include_outlier=include_outlier,
            params=params,
            cost_tables=tuple(tables),
        )

    @classmethod
    def from_cost_matrices(
        cls,
        matrices,
        params: ScoreParams,
        include_outlier: bool = True,
    ) -> "GapInstance":
        """Synthetic instance from per-label cost matrices (cost units).

        Entries that are inf or NaN are infeasible. Rectangular matrices are
        balanced with dummy features (padded rows/columns are infeasible).
        """
        matrices = [np.asarray(m, dtype=float) for m in matrices]
        if not matrices:
            raise ValueError("need at least one cost matrix")
        n_l, n_r = matrices[0].shape
        d = np.zeros(2)
        d[0] = 1.0
        desc = unit_descriptor(d)
        left = FeatureSet(
            "left", tuple(Feature(i, Point2(float(i), 0.0), desc) for i in range(n_l))
        )
        right = FeatureSet(
            "right", tuple(Feature(i, Point2(float(i), 0.0), desc) for i in range(n_r))
        )
        left, right = balance_with_dummies(left, right, params)
        n = len(left)
        tables = []
        for m in matrices:
            if m.shape != (n_l, n_r):
                raise ValueError("cost matrices must share one shape")
            table = np.full((n, n), -1, dtype=np.int64)
            ok = np.isfinite(m)
            sub = np.full((n_l, n_r), -1, dtype=np.int64)
            sub[ok] = np.round(m[ok] * params.cost_scale).astype(np.int64)
            table[:n_l, :n_r] = sub
            tables.append(table)
        return cls(
            left=left,
            right=right,
            models=tuple(Homography.identity() for _ in matrices),
            include_outlier=include_outlier,
            params=params,
            cost_tables=tuple(tables),
        )


@dataclass(frozen=True)
class GapArcIndex:
    """Where each triple's arc landed in the network, for flow read-off."""

    n: int
    label_ids: tuple[int, ...]
    model_arcs: tuple[tuple[int, np.ndarray, np.ndarray], ...]  # (first_arc, pp, qq) per label
    outlier_left_first: int  # arcs (n_p_phi -> hub), index p; -1 when absent
    outlier_right_first: int  # arcs (hub -> n_q_phi), index q; -1 when absent


def _build_network(inst: GapInstance, left_label: dict[int, int] | None):
    """Shared builder: full construction, or label-constrained when
    left_label maps each left feature to its only usable label."""
    n = inst.n
    labs = inst.label_ids
    k = len(labs)
    lab_pos = {h: i for i, h in enumerate(labs)}

    use_outlier = inst.include_outlier
    s, t = 0, 1
    off_p = 2
    off_q = 2 + n
    if left_label is None:
        n_left_model = n * k
        def pl(p, h):  # noqa: E306
            return 2 + 2 * n + p * k + lab_pos[h]
    else:
        n_left_model = sum(1 for h in left_label.values() if h != OUTLIER)
        slot = {}
        for p in sorted(left_label):
            if left_label[p] != OUTLIER:
                slot[p] = len(slot)
        def pl(p, h):  # noqa: E306
            return 2 + 2 * n + slot[p]
    off_qh = 2 + 2 * n + n_left_model
    node_count = off_qh + n * k
    if use_outlier:
        off_pphi = node_count
        off_qphi = node_count + n
        hub = node_count + 2 * n
        node_count += 2 * n + 1

    net = FlowNetwork(node_count, s, t)
    ones = np.ones(n, dtype=np.int64)
    zeros = np.zeros(n, dtype=np.int64)
    ps = np.arange(n, dtype=np.int64)
    net.add_arcs(zeros, off_p + ps, ones, zeros)
    net.add_arcs(off_q + ps, np.full(n, t, np.int64), ones, zeros)

    dummy_left = np.array([f.dummy for f in inst.left.features])
    dummy_right = np.array([f.dummy for f in inst.right.features])

    model_arcs = []
    for h in labs:
        table = inst.cost_tables[h]
        if left_label is None:
            rows = ~dummy_left
        else:
            rows = np.array([left_label.get(p) == h for p in range(n)])
        # entry arcs n_p -> n_ph for features allowed to use h
        pp_entry = ps[rows]
        if pp_entry.size:
            entry_heads = np.array([pl(int(p), h) for p in pp_entry], dtype=np.int64)
            net.add_arcs(off_p + pp_entry, entry_heads, np.ones(pp_entry.size, np.int64), np.zeros(pp_entry.size, np.int64))
        # cost arcs n_ph -> n_qh on feasible pairs only
        mask = (table >= 0) & rows[:, None] & ~dummy_right[None, :]
        pp, qq = np.nonzero(mask)
        first = net.add_arcs(
            np.array([pl(int(p), h) for p in pp], dtype=np.int64),
            off_qh + qq * k + lab_pos[h],
            np.ones(pp.size, np.int64),
            table[pp, qq],
        ) if pp.size else net.arc_count
        model_arcs.append((first, pp.astype(np.int64), qq.astype(np.int64)))
        # exit arcs n_qh -> n_q
        net.add_arcs(off_qh + ps * k + lab_pos[h], off_q + ps, ones, zeros)

    outlier_left_first = -1
    outlier_right_first = -1
    if use_outlier:
        if left_label is None:
            phi_rows = np.ones(n, dtype=bool)
        else:
            phi_rows = np.array([left_label.get(p) == OUTLIER for p in range(n)])
            phi_rows |= dummy_left
        pp_phi = ps[phi_rows]
        if pp_phi.size:
            net.add_arcs(off_p + pp_phi, off_pphi + pp_phi, np.ones(pp_phi.size, np.int64), np.zeros(pp_phi.size, np.int64))
            outlier_left_first = net.add_arcs(
                off_pphi + pp_phi,
                np.full(pp_phi.size, hub, np.int64),
                np.ones(pp_phi.size, np.int64),
                np.full(pp_phi.size, inst.params.outlier_ticks, np.int64),
            )
        outlier_right_first = net.add_arcs(
            np.full(n, hub, np.int64), off_qphi + ps, ones, zeros
        )
        net.add_arcs(off_qphi + ps, off_q + ps, ones, zeros)
    else:
        # without the outlier, a feature with no feasible arc can never be
        # covered and the instance is certainly infeasible
        if left_label is None:
            reach_left = np.zeros(n, dtype=bool)
            reach_right = np.zeros(n, dtype=bool)
            for h in labs:
                mask = (inst.cost_tables[h] >= 0) & ~dummy_left[:, None] & ~dummy_right[None, :]
                reach_left |= mask.any(axis=1)
                reach_right |= mask.any(axis=0)
            if dummy_left.any() or dummy_right.any() or not (reach_left.all() and reach_right.all()):
                bad = int(np.argmin(reach_left)) if not reach_left.all() else int(np.argmin(reach_right))
                raise GapInfeasibleError(
                    f"feature {bad} has no feasible arc and no outlier model is available"
                )

    index = GapArcIndex(
        n=n,
        label_ids=labs,
        model_arcs=tuple(model_arcs),
        outlier_left_first=outlier_left_first,
        outlier_right_first=outlier_right_first,
    )
    return net, index, (pp_phi if use_outlier else None)


def build_gap_network(inst: GapInstance):
    """The layered matching network for an unconstrained instance.

    Returns (FlowNetwork, GapArcIndex, phi_left_ids); the index maps
    saturated arcs back to (p, q, h) triples.
    """
    return _build_network(inst, None)


def build_lc_gap_network(inst: GapInstance, labeling: dict[int, int]):
    """The label-constrained variant: left feature p keeps only its node for
    labeling[p], so every unit of flow respects the prescribed labels."""
    n = inst.n
    valid = set(inst.label_ids)
    constrained = dict(labeling)
    for p in range(n):
        if inst.left[p].dummy:
            constrained[p] = OUTLIER  # dummies only ever route through the outlier
            continue
        if p not in constrained:
            raise ValueError(f"labeling must cover every left feature, missing {p}")
        h = constrained[p]
        if h == OUTLIER:
            if not inst.include_outlier:
                raise ValueError("labeling uses the outlier but the instance has none")
            continue
        if h not in valid:
            raise ValueError(f"label {h} outside the model list")
    return _build_network(inst, constrained)


def _extract(inst: GapInstance, result, index: GapArcIndex, phi_left_ids) -> JointMatching:
    flows = result.flow_per_arc
    triples = []
    for (first, pp, qq), h in zip(index.model_arcs, index.label_ids):
        taken = flows[first : first + pp.size] == 1
        for p, q in zip(pp[taken], qq[taken]):
            triples.append((int(p), int(q), h))
    if inst.include_outlier and index.outlier_left_first >= 0:
        lf = index.outlier_left_first
        taken_left = [int(p) for i, p in enumerate(phi_left_ids) if flows[lf + i] == 1]
        rf = index.outlier_right_first
        taken_right = [q for q in range(index.n) if flows[rf + q] == 1]
        # uniform outlier cost: any pairing is optimal, use ascending id order
        for p, q in zip(sorted(taken_left), sorted(taken_right)):
            triples.append((p, q, OUTLIER))
    triples.sort()
    m = JointMatching(triples=tuple(triples), objective=int(result.total_cost))
    m.validate(inst.n)
    return m


def solve_gap(inst: GapInstance) -> JointMatching:
    """Globally optimal joint matching for the (unregularized) instance.

    Raises GapInfeasibleError when no perfect matching exists under the
    active labels (never happens with the outlier enabled).
    """
    net, index, phi_left = build_gap_network(inst)
    result = solve_min_cost_max_flow(net)
    if result.total_flow < inst.n:
        raise GapInfeasibleError(
            f"max flow {result.total_flow} < {inst.n}: no complete matching exists"
        )
    return _extract(inst, result, index, phi_left)


def solve_lc_gap(inst: GapInstance, labeling: dict[int, int]) -> JointMatching:
    """Optimal matching when each left feature must keep its prescribed label."""
    net, index, phi_left = build_lc_gap_network(inst, labeling)
    result = solve_min_cost_max_flow(net)
    if result.total_flow < inst.n:
        raise GapInfeasibleError(
            f"max flow {result.total_flow} < {inst.n} under the labeling constraint"
        )
    m = _extract(inst, result, index, phi_left)
    for p, _, h in m.triples:
        if not inst.left[p].dummy and h != labeling[p]:
            raise AssertionError("label constraint violated in extraction")
    return m


def matching_cost(inst: GapInstance, pairs_with_labels) -> int:
    """Objective of an explicit matching; raises on infeasible triples."""
    total = 0
    for p, q, h in pairs_with_labels:
        c = inst.cost(p, q, h)
        if c is None:
            raise GapInfeasibleError(f"triple ({p}, {q}, {h}) is infeasible")
        total += c
    return total
