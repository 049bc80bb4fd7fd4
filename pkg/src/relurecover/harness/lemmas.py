"""Grid and random-instance checks of Hermite and Khatri-Rao inequalities."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..hermite import he_all
from ..tensor import khatri_rao, singular_values

GRID = np.round(np.arange(-1000, 1001) * 0.01, 12)
TOL = 1e-9


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst_margin: float
    where: dict = field(default_factory=dict)
    per_k: dict = field(default_factory=dict)

    def to_dict(self):
        return {"name": self.name, "passed": self.passed, "worst_margin": self.worst_margin,
                "where": self.where, "per_k": {str(k): v for k, v in self.per_k.items()}}


@dataclass
class LemmaReport:
    checks: list

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def check(self, name):
        return next(c for c in self.checks if c.name == name)

    def to_dict(self):
        return {"passed": self.passed, "checks": [c.to_dict() for c in self.checks]}


def _grid_check(name, margins, grid):
    """Fold per-k margin arrays into one result (margin >= -TOL passes)."""
    per_k, worst, where = {}, np.inf, {}
    for k, m in margins.items():
        i = int(np.argmin(m))
        per_k[k] = float(m[i])
        if m[i] < worst:
            worst, where = float(m[i]), {"k": int(k), "x": float(grid[i])}
    return CheckResult(name, bool(worst >= -TOL), float(worst), where, per_k)


def root_separation(H, grid, kmax=10):
    """max(|He_k|, |He_{k+1}|) / sqrt(k!/2) - 1 over the grid."""
    margins = {k: np.maximum(np.abs(H[:, k]), np.abs(H[:, k + 1])) / math.sqrt(math.factorial(k) / 2.0) - 1.0
               for k in range(kmax + 1)}
    return _grid_check("root_separation", margins, grid)


def cramer(H, grid, kmax=12):
    """sqrt(k!) - |He_k(x)| exp(-x^2/2), scaled by sqrt(k!)."""
    damp = np.exp(-grid * grid / 2.0)
    margins = {k: 1.0 - np.abs(H[:, k]) * damp / math.sqrt(math.factorial(k)) for k in range(kmax + 1)}
    return _grid_check("cramer", margins, grid)


def turan(H, grid, kmax=8):
    """He_{k+1}^2 - He_k He_{k+2}, which must be positive."""
    margins = {k: H[:, k + 1] ** 2 - H[:, k] * H[:, k + 2] for k in range(kmax + 1)}
    result = _grid_check("turan", margins, grid)
    result.passed = bool(result.worst_margin > 0)
    return result


def khatri_rao_bound(instances=50, seed=0, kmax=6):
    """s_k(U ⊙ V) >= kappa s_k(U) / sqrt(2k) on random instances (margin is the ratio minus 1)."""
    rng = np.random.default_rng(seed)
    worst, where, fails = np.inf, {}, 0
    for t in range(instances):
        k = int(rng.integers(1, kmax + 1))
        d1, d2 = int(rng.integers(k, k + 4)), int(rng.integers(1, 6))
        U = rng.standard_normal((d1, k))
        V = rng.standard_normal((d2, k)) * rng.uniform(0.1, 2.0, k)
        kappa = float(np.linalg.norm(V, axis=0).min())
        lhs = singular_values(khatri_rao(U, V))[k - 1]
        rhs = kappa * singular_values(U)[k - 1] / math.sqrt(2 * k)
        margin = lhs / rhs - 1.0
        fails += margin < -TOL
        if margin < worst:
            worst, where = float(margin), {"instance": t, "k": k, "d1": d1, "d2": d2}
    return CheckResult("khatri_rao", bool(fails == 0), float(worst), {**where, "failures": int(fails), "instances": instances})


def verify_lemmas(he=None, grid=GRID, root_kmax=10, cramer_kmax=12, turan_kmax=8, kr_instances=50, seed=0):
    """Run every suite and return a :class:`LemmaReport`.

    ``he`` replaces :func:`relurecover.hermite.he_all` (signature
    ``he(x, k)``), which lets tests feed a deliberately broken evaluator.
    """
    he = he or he_all
    kmax = max(root_kmax + 1, cramer_kmax, turan_kmax + 2)
    H = np.asarray(he(grid, kmax))
    return LemmaReport([
        root_separation(H, grid, root_kmax),
        cramer(H, grid, cramer_kmax),
        turan(H, grid, turan_kmax),
        khatri_rao_bound(kr_instances, seed),
    ])
