"""Optimal matching of recovered units to a ground-truth network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..errors import DomainError


@dataclass
class MatchReport:
    """Assignment of true units to recovered ones.

    ``pairs`` lists (true index, recovered index) sorted by true index;
    ``signs[i]`` is the ξ that minimized the cost of pair i, and the
    error arrays follow the same order.
    """

    pairs: list
    signs: list
    w_err: np.ndarray
    b_err: np.ndarray
    a_err: np.ndarray
    unmatched_true: list
    unmatched_recovered: list

    @property
    def costs(self):
        return self.w_err + self.b_err + self.a_err

    @property
    def total_cost(self):
        return float(self.costs.sum())

    @property
    def max_cost(self):
        return float(self.costs.max()) if self.costs.size else 0.0

    @property
    def permutation(self):
        return {int(i): int(j) for i, j in self.pairs}

    def to_dict(self):
        return {
            "pairs": [[int(i), int(j)] for i, j in self.pairs],
            "signs": [int(s) for s in self.signs],
            "w_err": self.w_err.tolist(),
            "b_err": self.b_err.tolist(),
            "a_err": self.a_err.tolist(),
            "cost": self.costs.tolist(),
            "total_cost": self.total_cost,
            "max_cost": self.max_cost,
            "unmatched_true": list(self.unmatched_true),
            "unmatched_recovered": list(self.unmatched_recovered),
        }


def _unit_params(u):
    return float(u.a), float(u.b), np.asarray(u.w, dtype=np.float64)


def pair_cost(w, b, a, wt, bt, at):
    """(cost, sign, w error, b error, a error) minimized over the sign ξ of (w̃, b̃)."""
    best = None
    for xi in (1, -1):
        ew = float(np.linalg.norm(w - xi * wt))
        eb = abs(b - xi * bt)
        ea = abs(a - at)
        cand = (ew + eb + ea, xi, ew, eb, ea)
        if best is None or cand[0] < best[0]:
            best = cand
    return best


def cost_matrix(true_net, recovered):
    m, r = true_net.m, len(recovered)
    C = np.zeros((m, r))
    S = np.ones((m, r), dtype=int)
    for j, u in enumerate(recovered):
        at, bt, wt = _unit_params(u)
        if wt.shape != (true_net.d,):
            raise DomainError(f"recovered unit {j} has dimension {wt.size}, network has d={true_net.d}")
        for i in range(m):
            c, xi, *_ = pair_cost(true_net.W[:, i], true_net.b[i], true_net.a[i], wt, bt, at)
            C[i, j], S[i, j] = c, xi
    return C, S


def match_units(true_net, recovered):
    """Minimum-total-cost assignment (Hungarian) between true and recovered units.

    Units flagged unrecoverable, or with non-finite parameters, never take
    part in the assignment and are listed as unmatched.
    """
    recovered = list(recovered)
    usable = [j for j, u in enumerate(recovered)
              if not getattr(u, "unrecoverable", False)
              and np.isfinite(u.a) and np.isfinite(u.b) and np.all(np.isfinite(u.w))]
    C, S = cost_matrix(true_net, [recovered[j] for j in usable])
    rows, cols = linear_sum_assignment(C) if C.size else (np.array([], int), np.array([], int))
    pairs, signs, ew, eb, ea = [], [], [], [], []
    for i, c in zip(rows, cols):
        j = usable[c]
        at, bt, wt = _unit_params(recovered[j])
        _, xi, w_e, b_e, a_e = pair_cost(true_net.W[:, i], true_net.b[i], true_net.a[i], wt, bt, at)
        pairs.append((int(i), int(j)))
        signs.append(int(xi))
        ew.append(w_e)
        eb.append(b_e)
        ea.append(a_e)
    matched_true = {i for i, _ in pairs}
    matched_rec = {j for _, j in pairs}
    return MatchReport(
        pairs, signs, np.array(ew), np.array(eb), np.array(ea),
        [i for i in range(true_net.m) if i not in matched_true],
        [j for j in range(len(recovered)) if j not in matched_rec],
    )
