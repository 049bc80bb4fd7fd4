"""Depth-2 ReLU networks f(x) = a^T relu(W^T x + b) with Gaussian inputs.

Covers construction and validation, seeded sampling, the closed-form
Hermite coefficients, random and smoothed instance generators, the
sign non-identifiability construction, and the on-disk formats (network
JSON, dataset CSV and HDATA1 binary).
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erfc

from .errors import DomainError
from .hermite import he_eval
from .tensor import canonical_indices, check_memory, khatri_rao_power, sigma_min, symmetric_broadcast

log = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-10
SAMPLE_CHUNK = 2**16
DATA_MAGIC = b"HDATA1"


def gaussian_cdf(z):
    """Standard normal CDF through erfc, accurate in both tails."""
    return 0.5 * erfc(-np.asarray(z, dtype=np.float64) / math.sqrt(2.0))


def gaussian_pdf(z):
    z = np.asarray(z, dtype=np.float64)
    return np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def relu(z):
    return np.maximum(z, 0.0)


@dataclass(frozen=True, eq=False)
class ReluNetwork:
    """Parameters (a, b, W) of f(x) = a^T relu(W^T x + b).

    ``W`` is d x m with unit-norm columns.  An all-zero column is also
    accepted; it encodes a constant unit relu(b_i), which consolidation
    needs when the affine remainder has no linear part.  ``B`` is the
    declared magnitude bound, or None when no bound is claimed.
    """

    a: np.ndarray
    b: np.ndarray
    W: np.ndarray
    B: float | None = None

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.a, dtype=np.float64)).copy()
        b = np.atleast_1d(np.asarray(self.b, dtype=np.float64)).copy()
        W = np.asarray(self.W, dtype=np.float64)
        if W.ndim != 2:
            raise DomainError(f"W must be a d x m matrix, got shape {W.shape}")
        W = W.copy()
        m = W.shape[1]
        if a.shape != (m,) or b.shape != (m,):
            raise DomainError(f"a, b must have length m={m}, got {a.shape}, {b.shape}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b)) and np.all(np.isfinite(W))):
            raise DomainError("network parameters must be finite")
        norms = np.linalg.norm(W, axis=0)
        bad = (np.abs(norms - 1.0) > UNIT_NORM_TOL) & (norms != 0.0)
        if np.any(bad):
            raise DomainError(f"columns {np.flatnonzero(bad).tolist()} of W are not unit norm")
        for arr in (a, b, W):
            arr.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "W", W)

    @property
    def d(self):
        return self.W.shape[0]

    @property
    def m(self):
        return self.W.shape[1]

    @classmethod
    def from_unnormalized(cls, a, b, W, B=None):
        """Rescale a_i <- |w_i| a_i and b_i <- b_i / |w_i| so columns become unit."""
        W = np.asarray(W, dtype=np.float64)
        norms = np.linalg.norm(W, axis=0)
        if np.any(norms == 0):
            raise DomainError("cannot normalize a zero column")
        return cls(np.asarray(a) * norms, np.asarray(b) / norms, W / norms, B)

    def bound_violations(self, B=None):
        """Human-readable list of B-boundedness failures (empty when bounded)."""
        B = self.B if B is None else B
        if B is None:
            return []
        out = []
        if self.m and np.max(np.abs(self.a)) > B:
            out.append(f"max|a| = {np.max(np.abs(self.a)):.6g} > B = {B}")
        if self.m and np.max(np.abs(self.b)) > B:
            out.append(f"max|b| = {np.max(np.abs(self.b)):.6g} > B = {B}")
        if self.m and np.max(np.abs(self.W)) > B:
            out.append(f"max|W| = {np.max(np.abs(self.W)):.6g} > B = {B}")
        if self.m and np.min(np.abs(self.a)) < 1.0 / B:
            out.append(f"min|a| = {np.min(np.abs(self.a)):.6g} < 1/B = {1.0 / B:.6g}")
        return out

    def __call__(self, X):
        return evaluate(self, X)

    def to_dict(self):
        return {
            "d": self.d,
            "m": self.m,
            "B": self.B,
            "a": self.a.tolist(),
            "b": self.b.tolist(),
            "W_colmajor": self.W.T.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        d, m = int(data["d"]), int(data["m"])
        W = np.asarray(data["W_colmajor"], dtype=np.float64)
        if W.size != d * m:
            raise DomainError(f"W_colmajor has {W.size} entries, expected d*m = {d * m}")
        return cls(data["a"], data["b"], W.reshape(m, d).T, data.get("B"))


def evaluate(net, X):
    """f(x) for one point (shape (d,)) or a batch (shape (n, d))."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != net.d:
        raise DomainError(f"input dimension {X.shape[-1]} does not match d={net.d}")
    out = relu(X @ net.W + net.b) @ net.a
    return float(out) if X.ndim == 1 else out


@dataclass(frozen=True, eq=False)
class Dataset:
    """N labelled samples: inputs ``X`` (N x d) and labels ``y`` (N,)."""

    X: np.ndarray
    y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise DomainError(f"dataset shapes X={X.shape}, y={y.shape} are inconsistent")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def N(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    def halves(self):
        """First and second halves, split at floor(N/2)."""
        h = self.N // 2
        return Dataset(self.X[:h], self.y[:h]), Dataset(self.X[h:], self.y[h:])


def _chunk_bounds(N, chunk):
    return [(s, min(s + chunk, N)) for s in range(0, N, chunk)]


def sample_inputs(N, d, seed, threads=1):
    """N standard Gaussian points in R^d, generated per fixed chunk.

    Each chunk draws from its own child of ``SeedSequence(seed)``, so the
    output does not depend on the thread count.
    """
    if N < 1:
        raise DomainError("sample count N must be at least 1")
    bounds = _chunk_bounds(N, SAMPLE_CHUNK)
    children = np.random.SeedSequence(seed).spawn(len(bounds))
    X = np.empty((N, d))

    def fill(job):
        (lo, hi), ss = job
        X[lo:hi] = np.random.default_rng(ss).standard_normal((hi - lo, d))

    jobs = list(zip(bounds, children))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(fill, jobs))
    else:
        for job in jobs:
            fill(job)
    return X


def sample(net, N, seed, threads=1):
    """Draw N labelled samples x ~ N(0, I_d), y = f(x)."""
    X = sample_inputs(N, net.d, seed, threads)
    return Dataset(X, evaluate(net, X), {"seed": seed})


def hermite_weights(net, k):
    """Per-unit scalar c_i with f_hat_k = sum_i c_i w_i^{⊗k} (k >= 2); also k = 0, 1."""
    a, b = net.a, net.b
    if k == 0:
        return a * (b * gaussian_cdf(b) + gaussian_pdf(b))
    if k == 1:
        return a * gaussian_cdf(b)
    sign = -1.0 if k % 2 else 1.0
    return sign * a * np.asarray(he_eval(k - 2, b)) * gaussian_pdf(b)


def exact_hermite_coeff(net, k):
    """Closed-form k-th Hermite coefficient E[f(x) He_k(x)] as an order-k tensor."""
    check_memory((net.d,) * k)
    c = np.asarray(hermite_weights(net, k), dtype=np.float64)
    if k == 0:
        return np.asarray(c.sum())
    if k == 1:
        return net.W @ c
    # canonical entries then broadcast, so the result is exactly symmetric
    idx = canonical_indices(net.d, k)
    return symmetric_broadcast(np.prod(net.W[idx], axis=1) @ c, net.d, k)


def exact_coefficients(net, kmax):
    """Dict {k: f_hat_k} for 0 <= k <= kmax."""
    return {k: exact_hermite_coeff(net, k) for k in range(kmax + 1)}


def hermite_risk(net_tilde, net, K=14):
    """Truncated Hermite-series risk sum_{k<=K} |T_k - f_hat_k|_F^2 / k!.

    Uses the Gram identity |sum_i c_i w_i^{⊗k}|^2 = sum_ij c_i c_j <w_i, w_j>^k,
    so no order-k tensor is formed.  Returns the partial sums per order.
    """
    if net_tilde.d != net.d:
        raise DomainError("networks have different input dimensions")
    W = np.hstack([net_tilde.W, net.W])
    G = W.T @ W
    terms = []
    for k in range(K + 1):
        c = np.concatenate([hermite_weights(net_tilde, k), -np.asarray(hermite_weights(net, k))])
        if k == 0:
            val = c.sum() ** 2
        else:
            val = c @ (G**k) @ c
        terms.append(max(float(val), 0.0) / math.factorial(k))
    return np.array(terms)


# --- instance generators ---------------------------------------------------


def random_unit_columns(d, m, rng):
    W = rng.standard_normal((d, m))
    return W / np.linalg.norm(W, axis=0)


def random_network(d, m, seed, B=2.0, b_bound=1.0, ell=1, sigma_floor=1e-3,
                   a_range=None, max_tries=1000):
    """Random B-bounded network with well-conditioned W^{⊙ell}.

    Columns are uniform on the sphere; draws with s_m(W^{⊙ell}) below
    ``sigma_floor`` are rejected.  |a_i| is uniform on ``a_range``
    (default [1/B, B]) with a random sign, b_i uniform on [-b_bound, b_bound].
    """
    rng = np.random.default_rng(seed)
    lo, hi = a_range if a_range is not None else (1.0 / B, B)
    for _ in range(max_tries):
        W = random_unit_columns(d, m, rng)
        if m == 0 or sigma_min(khatri_rao_power(W, ell)) >= sigma_floor:
            break
    else:
        raise DomainError(f"no draw met s_m(W^(ell={ell})) >= {sigma_floor} in {max_tries} tries")
    a = rng.uniform(lo, hi, m) * rng.choice([-1.0, 1.0], m)
    b = rng.uniform(-b_bound, b_bound, m)
    return ReluNetwork(a, b, W, B)


@dataclass(frozen=True)
class SmoothedSpec:
    base: ReluNetwork
    tau: float
    seed: int
    ell: int = 1


@dataclass(frozen=True, eq=False)
class SmoothedInstance:
    network: ReluNetwork
    W_perturbed: np.ndarray
    sigma_min: float
    bound_violations: list


def smoothed_instance(spec):
    """Perturb W entrywise by N(0, tau^2/d), then renormalize columns.

    The compensating rescale keeps f unchanged, so the result equals
    a^T relu(What^T x + b) with the raw perturbed What.  B-bound
    violations introduced by the rescale are reported, never clamped.
    """
    if spec.tau <= 0:
        raise DomainError("smoothing magnitude tau must be positive")
    base = spec.base
    rng = np.random.default_rng(spec.seed)
    noise = rng.standard_normal(base.W.shape) * (spec.tau / math.sqrt(base.d))
    W_hat = base.W + noise
    net = ReluNetwork.from_unnormalized(base.a, base.b, W_hat, base.B)
    smin = sigma_min(khatri_rao_power(net.W, spec.ell))
    violations = net.bound_violations()
    for v in violations:
        log.warning("smoothed instance is not B-bounded: %s", v)
    return SmoothedInstance(net, W_hat, smin, violations)


def nonidentifiable_pair(ws, tol=1e-8):
    """Two bias-free networks with different signs but identical outputs.

    Given unit vectors with a null combination sum_i beta_i w_i = 0, f uses
    a = beta and g flips the sign of every w_i with beta_i != 0.
    """
    W = np.column_stack([np.asarray(w, dtype=np.float64) for w in ws])
    d, m = W.shape
    _, s, Vt = np.linalg.svd(W)
    smallest = s[-1] if m <= d else 0.0
    if smallest > tol:
        raise DomainError(f"vectors are linearly independent (least singular value {smallest:.3g})")
    beta = Vt[-1]
    nz = np.flatnonzero(np.abs(beta) > tol)
    beta = beta / beta[nz[0]]
    beta[np.abs(beta) <= tol] = 0.0
    xi = np.where(beta != 0.0, -1.0, 1.0)
    zero = np.zeros(m)
    f = ReluNetwork(beta, zero, W)
    g = ReluNetwork(beta, zero, W * xi)
    return f, g


# --- file formats --------------------------------------------------------------


def save_network(path, net):
    Path(path).write_text(json.dumps(net.to_dict(), indent=2) + "\n")


def load_network(path):
    return ReluNetwork.from_dict(json.loads(Path(path).read_text()))


def save_dataset(path, data):
    """CSV (header x_1..x_d,y) for ``.csv`` paths, HDATA1 binary otherwise."""
    path = Path(path)
    if path.suffix == ".csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x_{i + 1}" for i in range(data.d)] + ["y"])
            for row in np.column_stack([data.X, data.y]):
                writer.writerow([repr(float(v)) for v in row])
        return
    payload = np.ascontiguousarray(np.column_stack([data.X, data.y]), dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(struct.pack("<QQ", data.N, data.d))
        fh.write(payload.tobytes())


def load_dataset(path):
    path = Path(path)
    if path.suffix == ".csv":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[-1] != "y" or header[:-1] != [f"x_{i + 1}" for i in range(len(header) - 1)]:
                raise DomainError(f"{path}: unexpected CSV header {header}")
            rows = np.array([[float(v) for v in row] for row in reader], dtype=np.float64)
        rows = rows.reshape(-1, len(header))
        return Dataset(rows[:, :-1], rows[:, -1])
    raw = path.read_bytes()
    if raw[:6] != DATA_MAGIC:
        raise DomainError(f"{path}: not an HDATA1 file")
    N, d = struct.unpack_from("<QQ", raw, 6)
    rows = np.frombuffer(raw, dtype="<f8", offset=22).astype(np.float64)
    if rows.size != N * (d + 1):
        raise DomainError(f"{path}: payload has {rows.size} values, expected {N * (d + 1)}")
    rows = rows.reshape(N, d + 1)
    return Dataset(rows[:, :-1], rows[:, -1])
