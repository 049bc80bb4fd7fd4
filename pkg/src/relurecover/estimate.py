"""Empirical Hermite coefficients T_k = (1/N) sum_i y_i He_k(x_i).

Only the sorted (canonical) multi-indices are computed, then broadcast to
the full symmetric tensor.  Samples are processed in fixed blocks of
2^16; per-block sums are combined in block order with Kahan
compensation, so serial and threaded runs agree bit for bit.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import linalg, special

from .errors import DomainError
from .hermite import he_canonical_rows
from .network import exact_hermite_coeff, sample
from .tensor import (canonical_indices, check_memory, frobenius_distance, index_counts, multiplicities,
                     symmetric_broadcast)

BLOCK = 2**16


@dataclass
class EstimateReport:
    k: int
    N: int
    tensor: np.ndarray
    stderr_frobenius: float
    frobenius_error_vs_exact: float | None = None

    def to_dict(self):
        return {
            "k": self.k,
            "N": self.N,
            "stderr_frobenius": self.stderr_frobenius,
            "frobenius_error_vs_exact": self.frobenius_error_vs_exact,
        }


def _kahan_sum(parts):
    total = np.zeros_like(parts[0])
    comp = np.zeros_like(parts[0])
    for p in parts:
        yk = p - comp
        t = total + yk
        comp = (t - total) - yk
        total = t
    return total


def _block_sums(X, y, k, threads):
    bounds = [(s, min(s + BLOCK, len(y))) for s in range(0, len(y), BLOCK)]

    def work(bound):
        lo, hi = bound
        P = he_canonical_rows(k, X[lo:hi])
        yb = y[lo:hi]
        return P @ yb, (P * P) @ (yb * yb)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, bounds))
    else:
        results = [work(b) for b in bounds]
    return _kahan_sum([r[0] for r in results]), _kahan_sum([r[1] for r in results])


def estimate_report(data, k, threads=1, exact=None):
    """T_k with a Frobenius-norm standard error estimate.

    The standard error aggregates per-entry sample variances of
    y He_alpha(x) over all d^k entries.
    """
    N, d = data.X.shape
    if N < 1:
        raise DomainError("need at least one sample")
    check_memory((d,) * k)
    s1, s2 = _block_sums(data.X, data.y, k, threads)
    mean = s1 / N
    var = np.maximum(s2 / N - mean**2, 0.0) * (N / max(N - 1, 1))
    weights = multiplicities(canonical_indices(d, k), d)
    stderr = math.sqrt(float(weights @ var) / N)
    T = symmetric_broadcast(mean, d, k)
    err = None if exact is None else frobenius_distance(T, exact)
    return EstimateReport(k, N, T, stderr, err)


def estimate_coefficient(data, k, threads=1):
    """Unbiased estimate (1/N) sum_i y_i He_k(x_i) of the k-th Hermite coefficient."""
    return estimate_report(data, k, threads).tensor


def estimate_all(data, kmax, threads=1):
    """Dict {k: EstimateReport} for 0 <= k <= kmax."""
    return {k: estimate_report(data, k, threads) for k in range(kmax + 1)}


def _design(X, kmax):
    return np.vstack([he_canonical_rows(k, X) for k in range(kmax + 1)])


def estimate_regression(data, kmax, block=2**14, exact=None):
    """T_0 .. T_kmax from a joint least-squares fit of y on all Hermite
    products of total degree <= kmax.

    Hermite products of different multi-indices are orthogonal under the
    Gaussian, so the fitted coefficient of He_alpha times alpha! is a
    consistent estimate of the alpha entry of f_hat_k.  Fitting the
    low-degree terms jointly removes their contribution to the variance,
    which the plain sample mean pays for in full.  Standard errors use the
    heteroscedasticity-robust sandwich G^-1 (sum r_i^2 p_i p_i^T) G^-1,
    which costs a second pass over the data.  Returns {k: EstimateReport}.
    """
    X, y = data.X, data.y
    N, d = X.shape
    sizes = [canonical_indices(d, k).shape[0] for k in range(kmax + 1)]
    p = sum(sizes)
    if N <= p:
        raise DomainError(f"need more than {p} samples for a degree-{kmax} fit in d={d}")
    for k in range(kmax + 1):
        check_memory((d,) * k)
    check_memory((p, block))
    bounds = [(s, min(s + block, N)) for s in range(0, N, block)]
    G = np.zeros((p, p))
    c = np.zeros(p)
    for lo, hi in bounds:
        P = _design(X[lo:hi], kmax)
        G += P @ P.T
        c += P @ y[lo:hi]
    cho = linalg.cho_factor(G)
    beta = linalg.cho_solve(cho, c)
    meat = np.zeros((p, p))
    for lo, hi in bounds:
        P = _design(X[lo:hi], kmax)
        r = y[lo:hi] - beta @ P
        Pr = P * r
        meat += Pr @ Pr.T
    Ginv = linalg.cho_solve(cho, np.eye(p))
    cov_diag = np.einsum("ij,jk,ki->i", Ginv, meat, Ginv) * (N / (N - p))
    out, off = {}, 0
    for k, n in enumerate(sizes):
        idx = canonical_indices(d, k)
        scale = special.factorial(index_counts(idx, d)).prod(axis=1)
        coef = beta[off:off + n] * scale
        var = cov_diag[off:off + n] * scale**2
        off += n
        stderr = math.sqrt(float(multiplicities(idx, d) @ var))
        T = symmetric_broadcast(coef, d, k)
        err = None if exact is None else frobenius_distance(T, exact[k])
        out[k] = EstimateReport(k, N, T, stderr, err)
    return out


def convergence_curve(net, k, N_list, seeds):
    """Median Frobenius error |T_k - f_hat_k| over seeds, for each N."""
    N_list = list(N_list)
    if any(b < a for a, b in zip(N_list, N_list[1:])):
        raise DomainError("N_list must be ascending")
    exact = exact_hermite_coeff(net, k)
    out = []
    for N in N_list:
        errs = [frobenius_distance(estimate_coefficient(sample(net, N, s), k), exact) for s in seeds]
        out.append((int(N), float(np.median(errs))))
    return out


def loglog_slope(curve):
    """Least-squares slope of log(error) against log(N)."""
    N = np.log([c[0] for c in curve])
    e = np.log([c[1] for c in curve])
    return float(np.polyfit(N, e, 1)[0])
