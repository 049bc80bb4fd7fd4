"""Regression on features built from recovered units, then consolidation.

Given recovered units (ã, b̃, w̃) the predictor is linear in features
ξ3·ã·relu(ξ1·w̃ᵀx + ξ2·b̃) plus the raw block (x, 1).  The weights are
fitted by projected gradient descent on a norm-truncated empirical square
loss over a Euclidean ball, and the fitted linear combination is then
rewritten as a ReLU network with at most |S| + 2 units (coordinated mode).

Units whose bias is too large to show up in the Hermite coefficients are
never recovered; the (x, 1) block absorbs them, and
:func:`absorb_large_bias` predicts the cost of doing so.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, linalg, optimize

from .errors import DegenerateTruncationError, DomainError, RecoveryError
from .network import Dataset, ReluNetwork, gaussian_cdf, gaussian_pdf, relu, sample_inputs

log = logging.getLogger(__name__)

FULL8 = "full-8"
COORDINATED2 = "coordinated-2"
_SIGNS = {
    FULL8: [(s1, s2, s3) for s1 in (1, -1) for s2 in (1, -1) for s3 in (1, -1)],
    COORDINATED2: [(1, 1, 1), (-1, -1, 1)],
}
BLOCK = 2**16
# PGD stops once its gap to the exact ball minimum is this fraction of the certified target
STOP_FRACTION = 1e-6


@dataclass
class FeatureMap:
    """Feature map x -> (unit features, x, 1) over the recovered units."""

    units: list
    d: int
    mode: str = COORDINATED2

    def __post_init__(self):
        if self.mode not in _SIGNS:
            raise DomainError(f"unknown feature mode {self.mode!r}")
        self.units = [u for u in self.units if not getattr(u, "unrecoverable", False)]
        for u in self.units:
            if np.asarray(u.w).shape != (self.d,):
                raise DomainError(f"unit direction has shape {np.asarray(u.w).shape}, expected ({self.d},)")

    @property
    def signs(self):
        return _SIGNS[self.mode]

    @property
    def n_unit_features(self):
        return len(self.signs) * len(self.units)

    @property
    def dim(self):
        return self.n_unit_features + self.d + 1

    def unit_arrays(self):
        if not self.units:
            return np.zeros(0), np.zeros(0), np.zeros((self.d, 0))
        return (np.array([u.a for u in self.units], dtype=np.float64),
                np.array([u.b for u in self.units], dtype=np.float64),
                np.column_stack([np.asarray(u.w, dtype=np.float64) for u in self.units]))

    def columns(self):
        """(scale, w, b) of every ReLU feature scale*relu(wᵀx + b), unit-major order."""
        a, b, W = self.unit_arrays()
        out = []
        for i in range(len(self.units)):
            for s1, s2, s3 in self.signs:
                out.append((s3 * a[i], s1 * W[:, i], s2 * b[i]))
        return out


def build_features(fmap, X):
    """Feature matrix of shape (n, dim) for inputs X of shape (n, d); 1-d x gives a vector."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != fmap.d:
        raise DomainError(f"inputs have dimension {X.shape[1]}, feature map expects {fmap.d}")
    cols = fmap.columns()
    n = X.shape[0]
    Phi = np.empty((n, fmap.dim))
    if cols:
        scale = np.array([c[0] for c in cols])
        Wf = np.column_stack([c[1] for c in cols])
        bf = np.array([c[2] for c in cols])
        Phi[:, :len(cols)] = scale * relu(X @ Wf + bf)
    Phi[:, len(cols):len(cols) + fmap.d] = X
    Phi[:, -1] = 1.0
    return Phi[0] if single else Phi


def default_tau(m, S_size, d, B, eps):
    """Truncation radius 20 m (8|S| + d) B sqrt(log(m d B |S| / eps))."""
    if not 0 < eps < 1:
        raise DomainError("eps must lie in (0, 1)")
    arg = m * d * B * S_size / eps
    if arg <= 1:
        raise DomainError("log argument m d B |S| / eps must exceed 1")
    return 20.0 * m * (8 * S_size + d) * B * math.sqrt(math.log(arg))


def default_radius(m, S_size, B, mode=COORDINATED2):
    per_unit = 8 if mode == FULL8 else 2
    return math.sqrt(per_unit * S_size) + m * (1 + B)


@dataclass
class TruncatedLossSpec:
    tau: float
    radius: float
    steps: int = 200_000
    step_size: float | None = None
    certify: bool = True
    gap_target: float | None = None

    def __post_init__(self):
        if not self.tau > 0:
            raise DomainError("tau must be positive")
        if not self.radius > 0:
            raise DomainError("radius must be positive")
        if self.steps < 1:
            raise DomainError("steps must be at least 1")


@dataclass
class TruncatedStats:
    """Sufficient statistics of the truncated loss: mean of y², Φᵀy and ΦᵀΦ over n samples."""

    G: np.ndarray
    c: np.ndarray
    yy: float
    n: int
    kept: int

    def loss(self, beta):
        return float(self.yy - 2.0 * beta @ self.c + beta @ self.G @ beta)

    @property
    def truncated_fraction(self):
        return 1.0 - self.kept / self.n


def truncated_stats(data, fmap, tau):
    """Accumulate the truncated Gram statistics in fixed-size blocks."""
    N = data.N
    p = fmap.dim
    G = np.zeros((p, p))
    c = np.zeros(p)
    yy = 0.0
    kept = 0
    for lo in range(0, N, BLOCK):
        hi = min(lo + BLOCK, N)
        Phi = build_features(fmap, data.X[lo:hi])
        mask = np.einsum("ij,ij->i", Phi, Phi) < tau * tau
        Phi, y = Phi[mask], data.y[lo:hi][mask]
        G += Phi.T @ Phi
        c += Phi.T @ y
        yy += float(y @ y)
        kept += int(mask.sum())
    if kept == 0:
        raise DegenerateTruncationError(f"no sample has feature norm below tau = {tau:g}")
    return TruncatedStats(G / N, c / N, yy / N, N, kept)


def project_ball(beta, radius):
    nrm = np.linalg.norm(beta)
    return beta if nrm <= radius else beta * (radius / nrm)


def ball_constrained_minimum(stats, radius):
    """Exact minimizer of the quadratic loss over the ball of the given radius.

    Uses the eigenbasis of G: the minimum-norm stationary point if it lies
    inside the ball, otherwise the boundary point (G + λI)^-1 c with λ > 0
    found by root bracketing on the norm.
    """
    lam_G, Q = linalg.eigh(stats.G)
    lam_G = np.maximum(lam_G, 0.0)
    qc = Q.T @ stats.c
    tol = lam_G.max() * 1e-12 if lam_G.size else 0.0
    inside = np.where(lam_G > tol, qc / np.where(lam_G > tol, lam_G, 1.0), 0.0)
    if np.linalg.norm(inside) <= radius:
        return Q @ inside

    def excess(lam):
        return np.linalg.norm(qc / (lam_G + lam)) - radius

    hi = np.linalg.norm(qc) / radius
    lam = optimize.brentq(excess, 1e-300, max(hi, 1e-300) * 2.0, xtol=1e-300, rtol=1e-15, maxiter=500)
    return project_ball(Q @ (qc / (lam_G + lam)), radius)


@dataclass
class PGDResult:
    beta: np.ndarray
    loss: float
    steps: int
    step_size: float
    truncated_fraction: float
    oracle_loss: float | None = None
    gap: float | None = None
    certified: bool | None = None

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}


def truncated_pgd(data, fmap, spec, seed=0, stats=None, check_every=100):
    """Projected gradient descent on the truncated square loss.

    Starts from β = 0 with the fixed step 1/L, L = 2 λ_max(G) the
    smoothness constant of the loss.  With ``spec.certify`` the exact
    ball-constrained minimum is computed too, iterations stop once the
    gap to it is below ``STOP_FRACTION * spec.gap_target`` and the final
    gap must be within ``spec.gap_target``.  ``seed`` is accepted for
    interface symmetry; the method is deterministic.
    """
    del seed
    stats = stats or truncated_stats(data, fmap, spec.tau)
    L = 2.0 * float(linalg.eigvalsh(stats.G)[-1])
    beta = np.zeros(fmap.dim)
    if L <= 0:
        return PGDResult(beta, stats.loss(beta), 0, 0.0, stats.truncated_fraction,
                         stats.loss(beta) if spec.certify else None, 0.0 if spec.certify else None,
                         True if spec.certify else None)
    eta = spec.step_size or 1.0 / L
    oracle_loss = None
    if spec.certify:
        oracle_loss = stats.loss(ball_constrained_minimum(stats, spec.radius))
    stop_gap = None if spec.gap_target is None or oracle_loss is None else spec.gap_target * STOP_FRACTION
    G2, c2 = 2.0 * stats.G, 2.0 * stats.c
    step = 0
    for step in range(1, spec.steps + 1):
        beta = project_ball(beta - eta * (G2 @ beta - c2), spec.radius)
        if stop_gap is not None and step % check_every == 0 and stats.loss(beta) - oracle_loss <= stop_gap:
            break
    loss = stats.loss(beta)
    result = PGDResult(beta, loss, step, eta, stats.truncated_fraction)
    if spec.certify:
        result.oracle_loss = oracle_loss
        result.gap = loss - oracle_loss
        result.certified = spec.gap_target is None or result.gap <= spec.gap_target
        if not result.certified:
            raise RecoveryError(
                f"PGD gap {result.gap:.3g} exceeds the target {spec.gap_target:.3g} after {step} steps")
    return result


# --- large-bias surrogate ----------------------------------------------------


def _relu_second_moment(s, b):
    """E[relu(s (u + b))^2] for u ~ N(0, 1) and s in {+1, -1}."""
    t = s * b
    return (t * t + 1.0) * float(gaussian_cdf(t)) + t * float(gaussian_pdf(t))


def _relu_mean_gaussian(mu, sd):
    """E[relu(mu + sd Z)] for Z ~ N(0, 1)."""
    if sd <= 0:
        return max(mu, 0.0)
    r = mu / sd
    return mu * float(gaussian_cdf(r)) + sd * float(gaussian_pdf(r))


def _relu_cross_moment(s1, b1, s2, b2, rho):
    """E[relu(s1(u1 + b1)) relu(s2(u2 + b2))] for standard normals with correlation rho."""
    sd = math.sqrt(max(1.0 - rho * rho, 0.0))

    def integrand(u):
        return s1 * (u + b1) * _relu_mean_gaussian(s2 * (rho * u + b2), sd) * float(gaussian_pdf(u))

    # the first factor is positive on u > -b1 (s1 = 1) or u < -b1 (s1 = -1)
    lo, hi = (-b1, np.inf) if s1 > 0 else (-np.inf, -b1)
    val, _ = integrate.quad(integrand, lo, hi, epsabs=1e-14, epsrel=1e-10, limit=200)
    return val


@dataclass
class LinearSurrogate:
    beta: np.ndarray
    C: float
    predicted_mse: float
    per_unit_mse: list = field(default_factory=list)


def absorb_large_bias(a, b, W, threshold=None, B=None):
    """Affine surrogate beta^T x + C for units whose biases are all large.

    b > 0 units are replaced by a (wᵀx + b), b < 0 units by 0.  The
    predicted mean squared error includes cross terms between units
    (1-d quadrature against the conditional Gaussian).  With ``threshold``
    every |b_i| must reach it; with ``B`` the norm bounds |beta| <= m B
    and |C| <= m B^2 are checked.
    """
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    W = np.asarray(W, dtype=np.float64).reshape(-1, a.size) if a.size else np.asarray(W, dtype=np.float64)
    if a.size == 0:
        d = W.shape[0] if W.ndim == 2 else 0
        return LinearSurrogate(np.zeros(d), 0.0, 0.0, [])
    if threshold is not None and np.any(np.abs(b) < threshold):
        raise DomainError(f"units {np.flatnonzero(np.abs(b) < threshold).tolist()} have |b| below {threshold}")
    pos = b > 0
    beta = W[:, pos] @ a[pos]
    C = float(a[pos] @ b[pos])
    m = a.size
    if B is not None:
        if np.linalg.norm(beta) > m * B * (1 + 1e-12) or abs(C) > m * B * B * (1 + 1e-12):
            raise DomainError("surrogate exceeds the norm bounds |beta| <= mB, |C| <= mB^2")
    # residual of unit i is c_i relu(s_i (u_i + b_i)) with u_i = w_iᵀx
    s = np.where(pos, -1.0, 1.0)
    coef = np.where(pos, -a, a)
    per_unit = [coef[i] ** 2 * _relu_second_moment(s[i], b[i]) for i in range(m)]
    total = sum(per_unit)
    G = W.T @ W
    for i in range(m):
        for j in range(i + 1, m):
            total += 2.0 * coef[i] * coef[j] * _relu_cross_moment(s[i], b[i], s[j], b[j], float(G[i, j]))
    return LinearSurrogate(beta, C, max(total, 0.0), per_unit)


# --- consolidation -----------------------------------------------------------


def consolidate(beta, fmap, B=None):
    """Rewrite x -> betaᵀ phi(x) as a ReLU network.

    Features relu(z) and relu(-z) of the same affine form z are merged
    with relu(-z) = relu(z) - z, keeping the orientation z = w̃ᵀx ± b̃ of
    the recovered unit; the affine remainder v x + c becomes the
    pair β0 relu(w0ᵀx + b0) - β0 relu(-w0ᵀx - b0).  A remainder with v = 0
    and c != 0 uses the zero column w0 = 0, b0 = 1.
    """
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (fmap.dim,):
        raise DomainError(f"beta has shape {beta.shape}, feature map has dimension {fmap.dim}")
    d = fmap.d
    nf = fmap.n_unit_features
    v = beta[nf:nf + d].copy()
    c = float(beta[-1])
    a_u, b_u, W_u = fmap.unit_arrays()
    # features relu(s1 (w x) + s2 b) of one unit pair up by s1 * s2; the s1 = +1 member is kept
    groups = {}
    coefs = iter(beta[:nf])
    for i in range(len(fmap.units)):
        for s1, s2, s3 in fmap.signs:
            weight = next(coefs) * s3 * a_u[i]
            key = (i, s1 * s2)
            w, bb = W_u[:, i], s1 * s2 * b_u[i]
            groups[key] = groups.get(key, 0.0) + weight
            if s1 < 0:
                # relu(-z) = relu(z) - z
                v -= weight * w
                c -= weight * bb
    a_out, b_out, W_out = [], [], []
    for (i, parity), weight in groups.items():
        a_out.append(weight)
        b_out.append(parity * b_u[i])
        W_out.append(W_u[:, i])
    nv = float(np.linalg.norm(v))
    if nv > 0 or c != 0.0:
        if nv > 0:
            w0, b0, beta0 = v / nv, c / nv, nv
        else:
            w0, b0, beta0 = np.zeros(d), 1.0, c
        a_out += [beta0, -beta0]
        b_out += [b0, -b0]
        W_out += [w0, -w0]
    W_mat = np.column_stack(W_out) if W_out else np.zeros((d, 0))
    return ReluNetwork(np.array(a_out), np.array(b_out), W_mat, B)


# --- end to end --------------------------------------------------------------


def mc_mse(f, g, d, n, seed, block=BLOCK):
    """Monte-Carlo E[(f(x) - g(x))^2] over x ~ N(0, I_d) with its standard error."""
    X = sample_inputs(n, d, seed)
    s1 = s2 = 0.0
    for lo in range(0, n, block):
        r = f(X[lo:lo + block]) - g(X[lo:lo + block])
        r2 = r * r
        s1 += math.fsum(r2)
        s2 += math.fsum(r2 * r2)
    mean = s1 / n
    var = max(s2 / n - mean * mean, 0.0) * n / max(n - 1, 1)
    return mean, math.sqrt(var / n)


@dataclass
class Algorithm5Result:
    network: ReluNetwork
    pgd: PGDResult
    tau: float
    radius: float
    mode: str
    mse_estimate: float | None = None
    mse_stderr: float | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def mse_upper95(self):
        if self.mse_estimate is None:
            return None
        return self.mse_estimate + 1.96 * self.mse_stderr

    def metrics(self):
        return {
            "mse_estimate": self.mse_estimate,
            "mse_stderr": self.mse_stderr,
            "mse_upper95": self.mse_upper95,
            "units": self.network.m,
            "truncated_fraction": self.pgd.truncated_fraction,
            "tau": self.tau,
            "radius": self.radius,
            "mode": self.mode,
            "pgd_steps": self.pgd.steps,
            "pgd_loss": self.pgd.loss,
            "oracle_loss": self.pgd.oracle_loss,
            "gap": self.pgd.gap,
            **self.diagnostics,
        }


def run_algorithm5(data, units, eps, seed=0, *, m=None, B=2.0, mode=COORDINATED2, tau=None,
                   radius=None, steps=200_000, certify=True, reference=None, n_eval=10**6):
    """Fit the feature regression on ``data`` and consolidate the result.

    ``data`` is the held-back half of the sample.  ``m`` (the number of
    hidden units assumed for the thresholds) defaults to |S|.  When a
    ``reference`` network is given, the returned result carries a fresh
    Monte-Carlo estimate of E[(f - g)^2] over ``n_eval`` inputs.
    """
    if not isinstance(data, Dataset):
        raise DomainError("data must be a Dataset")
    fmap = FeatureMap(list(units), data.d, mode)
    S = len(fmap.units)
    m = max(S, 1) if m is None else m
    tau = default_tau(m, max(S, 1), data.d, B, eps) if tau is None else tau
    radius = default_radius(m, S, B, mode) if radius is None else radius
    spec = TruncatedLossSpec(tau, radius, steps, certify=certify, gap_target=eps * eps / 100.0)
    pgd = truncated_pgd(data, fmap, spec)
    net = consolidate(pgd.beta, fmap, B)
    result = Algorithm5Result(net, pgd, tau, radius, mode)
    if reference is not None:
        mse, se = mc_mse(reference, net, data.d, n_eval, seed)
        result.mse_estimate, result.mse_stderr = mse, se
    return result
