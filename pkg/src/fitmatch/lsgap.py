"""Greedy local search over label subsets with the matching solver inside.

The label-cost regularized objective (matching cost plus beta per distinct
model used) is minimized by walking add/delete/swap neighborhoods of the
current label subset; each candidate subset is evaluated by solving the
unregularized matching restricted to it. The outlier pseudo-label is always
available, so every subset (including the empty one) is feasible, and it
never pays label cost.
"""

from __future__ import annotations

from dataclasses import dataclass

from .gap import GapInstance, JointMatching, solve_gap


def neighborhoods(pool, current):
    """Add/delete/swap families around `current`, in deterministic order.

    Returns three lists of frozensets: additions in label-index order,
    deletions in label-index order, swaps ordered by (removed, added).
    Sizes are |pool - current|, |current| and |current| * |pool - current|.
    """
    pool = frozenset(pool)
    current = frozenset(current)
    if not current <= pool:
        raise ValueError("current subset must lie inside the pool")
    outside = sorted(pool - current)
    inside = sorted(current)
    adds = [current | {h} for h in outside]
    deletes = [current - {h} for h in inside]
    swaps = [(current - {h}) | {l} for h in inside for l in outside]
    return adds, deletes, swaps


def regularized_energy(matching: JointMatching, beta: int) -> int:
    """Matching cost plus beta ticks per distinct non-outlier label used."""
    return matching.objective + beta * len(matching.labels_used())


@dataclass(frozen=True)
class RegularizedSolution:
    subset: frozenset[int]
    matching: JointMatching
    energy: int
    trace: tuple[int, ...]  # initial energy, then each accepted move's energy


def ls_gap(
    inst: GapInstance,
    beta: int,
    initial_subset=None,
    gap_solver=solve_gap,
) -> RegularizedSolution:
    """Local search: accept the first improving add/delete/swap, repeat.

    The neighborhood is rebuilt around each accepted subset and the scan
    order is deterministic (adds, then deletes, then swaps, each in label
    order), so runs are reproducible. Solutions are cached per subset since
    rejected candidates reappear across rebuilds.

    With beta <= 0 the label cost vanishes and the full pool is an optimal,
    locally optimal subset (the matching objective is monotone under label
    set inclusion), so the search warm-starts there unless told otherwise.
    """
    if not inst.include_outlier:
        raise ValueError("local search needs the outlier model to keep every subset feasible")
    pool = frozenset(inst.label_ids)
    if initial_subset is None:
        current = pool if beta <= 0 else frozenset()
    else:
        current = frozenset(initial_subset)
        if not current <= pool:
            raise ValueError("initial subset must lie inside the pool")

    cache: dict[frozenset, JointMatching] = {}

    def evaluate(subset: frozenset):
        if subset not in cache:
            cache[subset] = gap_solver(inst.restricted(subset))
        m = cache[subset]
        return m, regularized_energy(m, beta)

    def scan_order(subset: frozenset):
        adds, deletes, swaps = neighborhoods(pool, subset)
        return adds + deletes + swaps

    matching, energy = evaluate(current)
    trace = [energy]
    queue = scan_order(current)
    while queue:
        candidate = queue.pop(0)
        cand_matching, cand_energy = evaluate(candidate)
        if cand_energy < energy:
            current, matching, energy = candidate, cand_matching, cand_energy
            trace.append(energy)
            queue = scan_order(current)
    if any(b >= a for a, b in zip(trace, trace[1:])):
        raise AssertionError("accepted-move energies must strictly decrease")
    return RegularizedSolution(
        subset=current, matching=matching, energy=energy, trace=tuple(trace)
    )
