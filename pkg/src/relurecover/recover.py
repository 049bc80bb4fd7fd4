"""Parameter recovery from Hermite coefficient tensors.

Directions come from Jennrich decompositions of T_{2l+1} and T_{2l+2}
(a unit whose bias is a root of one Hermite polynomial still shows up in
the other).  Scalars (a_i, b_i) follow from linear systems in
w_i^{⊗j} and the Hermite recurrence.  In the full-rank case (l = 1) the
first coefficient T_1 resolves the remaining sign of each (w_i, b_i).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, optimize

from .errors import ConditioningError, DomainError
from .hermite import he_eval
from .jennrich import decompose, detect_rank, extract_direction
from .network import gaussian_cdf, gaussian_pdf
from .tensor import canonical_indices, flatten, khatri_rao_power, multiplicities, sigma_min, singular_values

log = logging.getLogger(__name__)

SQRT_2PI = math.sqrt(2.0 * math.pi)
GAMMA_FLOOR = 1e-12
INDEPENDENCE_FLOOR = 1e-8


def good_bias_bound(eps, m, d, B, c=1.5):
    """Units with |b| below c sqrt(log(1 / (eps m d B))) should be recovered.

    Zero when eps m d B >= 1: every unit is then left to the regression.
    """
    if not 0 < eps < 1:
        raise DomainError(f"eps must lie in (0, 1), got {eps}")
    return c * math.sqrt(max(math.log(1.0 / (eps * m * d * B)), 0.0))


@dataclass(frozen=True)
class RecoveryConfig:
    """Thresholds for the recovery stage.

    eta1 is absolute when set; otherwise the rank threshold is
    ``eta1_rel`` times the largest singular value of each matricization.
    eta0 is the input accuracy the thresholds were tuned for; it is only
    reported.  When ``noise_factor`` is set and per-order standard errors
    are supplied, each tensor gets its own rank and pruning threshold of
    noise_factor times the expected spectral norm of its estimation noise
    (an explicit ``eta1`` still wins).  ``contractions`` is the number of
    random contraction pairs each Jennrich call tries before keeping the
    one with the smallest residual.  ``good_set_c`` scales the bias range
    expected to be covered (see :func:`good_bias_bound`).
    """

    ell: int = 1
    eta0: float = 1e-2
    eta1: float | None = None
    eta1_rel: float = 1e-4
    eta2: float = 1e-3
    eta3: float = 0.1
    m_max: int | None = None
    direction_modes: str = "all"
    max_retries: int = 5
    noise_factor: float | None = None
    contractions: int = 10
    good_set_c: float = 1.5

    def __post_init__(self):
        if self.ell < 1:
            raise DomainError("ell must be at least 1")
        if self.contractions < 1:
            raise DomainError("contractions must be at least 1")
        for name in ("eta0", "eta1_rel", "eta2", "eta3", "good_set_c"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be positive")
        if self.eta1 is not None and self.eta1 <= 0:
            raise DomainError("eta1 must be positive")
        if self.noise_factor is not None and self.noise_factor <= 0:
            raise DomainError("noise_factor must be positive")

    @classmethod
    def exact(cls, ell=1, **kw):
        """Settings for noiseless coefficients: numerical rank, no real pruning."""
        return cls(ell=ell, eta1_rel=1e-9, eta2=1e-9, **kw)

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class Direction:
    w: np.ndarray
    weight: float
    source: str
    lam_odd: float | None = None
    lam_even: float | None = None
    uncertainty: float = 0.0


@dataclass
class RecoveredUnit:
    a: float
    b: float
    w: np.ndarray
    sign_resolved: int | None = None
    source: str = ""
    unrecoverable: bool = False
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "a": self.a,
            "b": self.b,
            "w": [float(v) for v in self.w],
            "sign_resolved": self.sign_resolved,
            "source": self.source,
            "unrecoverable": self.unrecoverable,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(float(data["a"]), float(data["b"]), np.asarray(data["w"], dtype=np.float64),
                   data.get("sign_resolved"), data.get("source", ""), bool(data.get("unrecoverable", False)))


@dataclass
class DirectionReport:
    directions: list
    ranks: tuple
    eta1: tuple
    eta2: tuple
    decompositions: tuple
    pruned: int
    duplicates: int

    def to_dict(self):
        return {
            "ranks": list(self.ranks),
            "eta1": list(self.eta1),
            "eta2": list(self.eta2),
            "decompositions": [d.to_dict() for d in self.decompositions],
            "pruned": self.pruned,
            "duplicates": self.duplicates,
            "weights": [c.weight for c in self.directions],
            "sources": [c.source for c in self.directions],
        }


def _child_seeds(seed, n):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def spectral_noise(frobenius, p, q):
    """Typical spectral norm of a p x q matrix of iid noise with the given Frobenius norm."""
    return frobenius * (math.sqrt(p) + math.sqrt(q)) / math.sqrt(p * q)


def _threshold(M, cfg, stderr=None):
    if cfg.eta1 is not None:
        return cfg.eta1
    if cfg.noise_factor is not None and stderr is not None:
        return cfg.noise_factor * spectral_noise(stderr, *M.shape)
    s = singular_values(M)
    return max(cfg.eta1_rel * (s[0] if s.size else 0.0), np.finfo(float).tiny)


def _antipodal_distance(u, v):
    return min(np.linalg.norm(v - u), np.linalg.norm(v + u))


def recover_directions_report(T_odd, T_even, cfg, seed=0, noise=None):
    """Directions from T_{2l+1} and T_{2l+2}, with per-tensor diagnostics.

    ``noise`` optionally maps tensor order to the Frobenius standard error
    of its estimate (used with ``cfg.noise_factor``).
    """
    ell = cfg.ell
    T_odd = np.asarray(T_odd, dtype=np.float64)
    T_even = np.asarray(T_even, dtype=np.float64)
    if T_odd.ndim != 2 * ell + 1 or T_even.ndim != 2 * ell + 2:
        raise DomainError(f"expected tensors of order {2 * ell + 1} and {2 * ell + 2}")
    d = T_odd.shape[0]
    seeds = _child_seeds(seed, 2)
    pruned = 0
    noise = noise or {}
    candidates, ranks, etas, etas2, decs = [], [], [], [], []
    for T, tail, name, s in ((T_odd, 1, "odd", seeds[0]), (T_even, 2, "even", seeds[1])):
        M = flatten(T, ell, ell + tail, 0)
        eta1 = _threshold(M, cfg, noise.get(2 * ell + tail))
        eta2 = cfg.eta2 if cfg.noise_factor is None or cfg.eta1 is not None else max(cfg.eta2, eta1)
        k = detect_rank(M, eta1, cfg.m_max)
        k = min(k, d**ell)
        stderr = noise.get(2 * ell + tail)
        spec_noise = 0.0 if stderr is None or cfg.noise_factor is None else spectral_noise(stderr, *M.shape)
        dec = decompose(flatten(T, ell, ell, tail), k, seed=s, max_retries=cfg.max_retries,
                        trials=cfg.contractions)
        for term in dec.terms:
            w, lam = extract_direction(term, d, ell, ell, tail, modes=cfg.direction_modes)
            cand = Direction(w, term.weight, name, uncertainty=spec_noise / term.weight if term.weight else np.inf)
            setattr(cand, f"lam_{name}", lam)
            if term.weight >= eta2:
                candidates.append(cand)
            else:
                pruned += 1
        ranks.append(k)
        etas.append(eta1)
        etas2.append(eta2)
        decs.append(dec)

    # with noisy input two directions are duplicates when they agree within
    # eta3 or within noise_factor times their combined perturbation |E| / weight
    factor = cfg.noise_factor or 0.0
    order = sorted(range(len(candidates)), key=lambda i: -candidates[i].weight)
    kept, duplicates = [], 0
    for i in order:
        c = candidates[i]
        match = [u for u in kept
                 if _antipodal_distance(u.w, c.w) <= max(cfg.eta3, factor * (u.uncertainty + c.uncertainty))]
        if match:
            duplicates += 1
            other = match[0]
            if c.lam_odd is not None and other.lam_odd is None:
                other.lam_odd = c.lam_odd * (1.0 if np.dot(other.w, c.w) >= 0 else -1.0)
            if c.lam_even is not None and other.lam_even is None:
                other.lam_even = c.lam_even
            continue
        kept.append(c)
    return DirectionReport(kept, tuple(ranks), tuple(etas), tuple(etas2), tuple(decs), pruned, duplicates)


def recover_directions(T_odd, T_even, cfg, seed=0):
    """Deduplicated unit directions (up to sign) found in T_{2l+1} and T_{2l+2}."""
    return recover_directions_report(T_odd, T_even, cfg, seed).directions


def scalar_orders(ell):
    return [2, 3] if ell == 1 else list(range(ell, ell + 4))


def solve_zeta(W_tilde, coeffs, orders):
    """Least-squares zeta_j with sum_i zeta_j(i) vec(w_i^{⊗j}) = vec(T_j)."""
    zeta = {}
    for j in orders:
        A = khatri_rao_power(W_tilde, j)
        zeta[j], *_ = linalg.lstsq(A, np.asarray(coeffs[j]).ravel())
    return zeta


def scalars_from_gamma(gamma, ell):
    """(a, b) of one unit from gamma_h = zeta_{h+2}, keyed by Hermite degree h.

    Returns None when the pivot coefficient is numerically zero.
    """
    if ell == 1:
        if abs(gamma[0]) < GAMMA_FLOOR:
            return None
        b = -gamma[1] / gamma[0]
        return gamma[0] * SQRT_2PI * math.exp(b * b / 2.0), b
    q = max((ell - 1, ell), key=lambda h: abs(gamma[h]))
    if abs(gamma[q]) < GAMMA_FLOOR:
        return None
    # the recurrence multiplier is the Hermite degree q, not the tensor order
    b = -(gamma[q + 1] + q * gamma[q - 1]) / gamma[q]
    he_q = he_eval(q, b)
    if he_q == 0.0:
        return None
    a = (-1.0) ** q * SQRT_2PI * gamma[q] * math.exp(b * b / 2.0) / he_q
    return a, b


def recover_scalars(w_tilde, coeffs, ell):
    """(a_i, b_i) for every recovered direction; unrecoverable units are flagged."""
    w_tilde = [np.asarray(w, dtype=np.float64) for w in w_tilde]
    if not w_tilde:
        return []
    W = np.column_stack(w_tilde)
    smin = sigma_min(khatri_rao_power(W, ell))
    if smin <= INDEPENDENCE_FLOOR:
        raise ConditioningError(
            f"recovered directions are not independent at order {ell} (s_min = {smin:.3g})", smin)
    zeta = solve_zeta(W, coeffs, scalar_orders(ell))
    units = []
    for i, w in enumerate(w_tilde):
        gamma = {j - 2: float(zeta[j][i]) for j in zeta}
        ab = scalars_from_gamma(gamma, ell)
        if ab is None:
            log.warning("unit %d: vanishing Hermite coefficient, flagged unrecoverable", i)
            units.append(RecoveredUnit(float("nan"), float("nan"), w, unrecoverable=True,
                                       extra={"zeta": gamma}))
        else:
            units.append(RecoveredUnit(float(ab[0]), float(ab[1]), w, extra={"zeta": gamma}))
    return units


def fix_signs(units, T1):
    """Resolve each unit's (w, b) sign from T_1 = sum_i Phi(b_i) a_i w_i (full rank)."""
    active = [u for u in units if not u.unrecoverable]
    if not active:
        return list(units)
    T1 = np.asarray(T1, dtype=np.float64).ravel()
    M = np.column_stack([u.a * u.w for u in active])
    if M.shape[1] > M.shape[0]:
        raise ConditioningError(f"sign fixing needs m' <= d, got m'={M.shape[1]}, d={M.shape[0]}")
    smin = sigma_min(M)
    if smin <= INDEPENDENCE_FLOOR:
        raise ConditioningError(f"sign system is ill-conditioned (s_min = {smin:.3g})", smin)
    z, *_ = linalg.lstsq(M, T1)
    fixed = iter(z)
    out = []
    for u in units:
        if u.unrecoverable:
            out.append(u)
            continue
        zi = next(fixed)
        if abs(zi) < 1e-10:
            log.warning("ambiguous sign (z = %.3g); leaving unit unresolved", zi)
            out.append(replace(u, extra={**u.extra, "z": float(zi)}))
            continue
        xi = 1 if zi > 0 else -1
        out.append(replace(u, b=xi * u.b, w=xi * u.w, sign_resolved=xi,
                           extra={**u.extra, "z": float(zi)}))
    return out


def recover_units(coeffs, cfg, seed=0, resolve_signs=None, noise=None, refine=False):
    """Directions, then scalars, then (l = 1 and m' <= d) sign fixing.

    With ``refine`` the algebraic estimates are polished by
    :func:`refine_moments` on every supplied coefficient.  Returns the
    units together with the direction report.
    """
    ell = cfg.ell
    report = recover_directions_report(coeffs[2 * ell + 1], coeffs[2 * ell + 2], cfg, seed, noise)
    units = recover_scalars([c.w for c in report.directions], coeffs, ell)
    for u, c in zip(units, report.directions):
        u.source = c.source
    if resolve_signs is None:
        resolve_signs = ell == 1 and len(units) <= np.asarray(coeffs[1]).size
    if resolve_signs and units:
        units = fix_signs(units, coeffs[1])
    if refine and units:
        units = refine_moments(units, coeffs)
    return units, report


def _canonical_design(d, orders):
    """Canonical index sets and the weights sqrt(multiplicity / k!) per order."""
    out = {}
    for k in orders:
        idx = canonical_indices(d, k)
        out[k] = (idx, np.sqrt(multiplicities(idx, d) / math.factorial(k)))
    return out


def _unit_weights(a, b, k):
    if k == 0:
        return a * (b * gaussian_cdf(b) + gaussian_pdf(b))
    if k == 1:
        return a * gaussian_cdf(b)
    return (-1.0) ** k * a * he_eval(k - 2, b) * gaussian_pdf(b)


def refine_moments(units, coeffs, orders=None, max_nfev=200, max_shift=0.5, max_growth=10.0):
    """Polish recovered units by weighted least squares on the coefficients.

    Minimizes sum_k |F_k(theta) - T_k|_F^2 / k! over all (a_i, b_i, w_i),
    where F_k is the closed-form coefficient of the candidate network and
    the sum runs over ``orders`` (default: every order k >= 2 present in
    ``coeffs``).  Orders 0 and 1 are left out by default because units with
    a large bias are invisible at k >= 2 yet still dominate T_0 and T_1.
    With the regression estimator the 1/k! weighting is the inverse
    per-entry variance, so this is the natural GLS objective.
    Unrecoverable units are passed through untouched.  The algebraic
    estimate is kept when the fit does not halve the objective, moves a
    direction by more than ``max_shift`` (up to sign), or inflates the
    largest |a| or |b| beyond ``max_growth`` times max(1, its start value).
    The last guard catches spurious units being pushed to huge |a| and b,
    where their moments all but vanish.
    """
    active = [i for i, u in enumerate(units) if not u.unrecoverable]
    if not active:
        return list(units)
    orders = sorted(k for k in coeffs if k >= 2) if orders is None else sorted(orders)
    d = np.asarray(units[active[0]].w).size
    design = _canonical_design(d, orders)
    targets = {k: np.asarray(coeffs[k], dtype=np.float64).reshape((d,) * k)[tuple(design[k][0].T)]
               if k else float(np.asarray(coeffs[k])) for k in orders}
    m = len(active)

    def unpack(theta):
        a, b = theta[:m], theta[m:2 * m]
        V = theta[2 * m:].reshape(d, m)
        return a, b, V / np.linalg.norm(V, axis=0)

    def residual(theta):
        a, b, W = unpack(theta)
        res = []
        for k in orders:
            c = _unit_weights(a, b, k)
            idx, wt = design[k]
            if k == 0:
                res.append(np.atleast_1d(c.sum() - targets[k]))
                continue
            prods = np.prod(W[idx.T], axis=0)
            res.append(wt * (prods @ c - targets[k]))
        return np.concatenate(res)

    def jacobian(theta):
        a, b, W = unpack(theta)
        norms = np.linalg.norm(theta[2 * m:].reshape(d, m), axis=0)
        blocks = []
        for k in orders:
            # d/db of the order-k weight is the order-(k+1) weight
            ca, cb = _unit_weights(np.ones(m), b, k), _unit_weights(a, b, k + 1)
            if k == 0:
                blocks.append(np.concatenate([ca, cb, np.zeros(d * m)])[None, :])
                continue
            idx, wt = design[k]
            factors = W[idx.T]
            prods = np.prod(factors, axis=0)
            G = np.zeros((idx.shape[0], d, m))
            rows = np.arange(idx.shape[0])
            for j in range(k):
                np.add.at(G, (rows, idx[:, j]), np.prod(np.delete(factors, j, axis=0), axis=0))
            c = _unit_weights(a, b, k)
            JV = np.empty((idx.shape[0], d, m))
            for i in range(m):
                proj = (np.eye(d) - np.outer(W[:, i], W[:, i])) / norms[i]
                JV[:, :, i] = c[i] * G[:, :, i] @ proj
            blocks.append(wt[:, None] * np.hstack([prods * ca, prods * cb, JV.reshape(idx.shape[0], d * m)]))
        return np.vstack(blocks)

    theta0 = np.concatenate([[units[i].a for i in active], [units[i].b for i in active],
                             np.column_stack([units[i].w for i in active]).ravel()])
    before = float(np.sum(residual(theta0) ** 2))
    # analytic Jacobian and "trf": MINPACK's "lm" gave results depending on buffer alignment
    sol = optimize.least_squares(residual, theta0, jac=jacobian, method="trf", max_nfev=max_nfev * theta0.size,
                                 xtol=1e-14, ftol=1e-14, gtol=1e-14)
    if not np.all(np.isfinite(sol.x)) or sol.cost * 2 > before:
        log.warning("moment refinement did not improve the fit; keeping the algebraic estimate")
        return list(units)
    a, b, W = unpack(sol.x)
    shift = max(_antipodal_distance(W[:, j], units[i].w) for j, i in enumerate(active))
    if shift > max_shift:
        log.warning("moment refinement moved a direction by %.3g; keeping the algebraic estimate", shift)
        return list(units)
    for new, old in ((a, theta0[:m]), (b, theta0[m:2 * m])):
        if np.max(np.abs(new)) > max_growth * max(1.0, float(np.max(np.abs(old)))):
            log.warning("moment refinement inflated a parameter to %.3g; keeping the algebraic estimate",
                        float(np.max(np.abs(new))))
            return list(units)
    out = list(units)
    for j, i in enumerate(active):
        out[i] = replace(units[i], a=float(a[j]), b=float(b[j]), w=W[:, j].copy(),
                         extra={**units[i].extra, "refined": True})
    return out


def run_algorithm1(coeffs, cfg=None, seed=0):
    """Full recovery from exact Hermite coefficients f_hat_0 .. f_hat_{2l+2}."""
    cfg = cfg or RecoveryConfig.exact()
    units, _ = recover_units(coeffs, cfg, seed)
    return units
