"""Probabilist's Hermite polynomials and the Hermite coefficients of ReLU.

Evaluation uses the forward three-term recurrence
``He_{r+1}(x) = x He_r(x) - r He_{r-1}(x)``.  Factorials are floats, exact
through 22!; degrees are capped at :data:`MAX_DEGREE` so ``k!`` stays far
from overflow.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DomainError
from .tensor import canonical_indices, check_memory, index_counts, symmetric_broadcast

MAX_DEGREE = 32


def _check_degree(k):
    if not (0 <= int(k) <= MAX_DEGREE) or int(k) != k:
        raise DomainError(f"Hermite degree must be an integer in [0, {MAX_DEGREE}], got {k}")
    return int(k)


def factorial(k):
    """k! as a float (exact for k <= 22)."""
    return float(math.factorial(k))


def double_factorial(n):
    """n!! with the convention (-1)!! = 0!! = 1."""
    out = 1
    while n > 1:
        out *= n
        n -= 2
    return out


def he_all(x, k):
    """He_0(x) .. He_k(x) stacked on a new last axis, shape ``x.shape + (k+1,)``."""
    k = _check_degree(k)
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(x.shape + (k + 1,))
    out[..., 0] = 1.0
    if k >= 1:
        out[..., 1] = x
    for r in range(1, k):
        out[..., r + 1] = x * out[..., r] - r * out[..., r - 1]
    return out


def he_eval(k, x):
    """He_k(x), elementwise over array input."""
    values = he_all(x, k)[..., -1]
    return float(values) if values.ndim == 0 else values


def he_canonical_rows(k, X):
    """Like :func:`he_canonical` but transposed, shape (C, n).

    Each row multiplies only the factors with a nonzero count, which is
    much cheaper than gathering all d factors per column.
    """
    k = _check_degree(k)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, d = X.shape
    counts = index_counts(canonical_indices(d, k), d)
    out = np.empty((counts.shape[0], n))
    if k == 0:
        out[:] = 1.0
        return out
    H = np.ascontiguousarray(np.moveaxis(he_all(X, k), 0, -1))
    for j, row in enumerate(counts):
        nz = np.flatnonzero(row)
        np.copyto(out[j], H[nz[0], row[nz[0]]])
        for i in nz[1:]:
            out[j] *= H[i, row[i]]
    return out


def he_canonical(k, X):
    """Products prod_i He_{n_i}(x_i) at each canonical multi-index.

    ``X`` has shape (n, d); the result has shape (n, C) with C the number
    of sorted multi-indices of length k over d coordinates.
    """
    return he_canonical_rows(k, X).T


def he_tensor(k, x):
    """The order-k tensor He_k(x) of a single point x in R^d.

    Entry alpha equals prod_i He_{n_i}(x_i), where n_i counts the
    occurrences of coordinate i in alpha.
    """
    k = _check_degree(k)
    x = np.asarray(x, dtype=np.float64).ravel()
    d = x.size
    check_memory((d,) * k)
    return symmetric_broadcast(he_canonical(k, x[None, :])[0], d, k)


def relu_hermite_coeff(k):
    """Normalized Hermite coefficient E[relu(x) He_k(x)] / sqrt(k!)."""
    k = _check_degree(k)
    if k == 0:
        return 1.0 / math.sqrt(2.0 * math.pi)
    if k == 1:
        return 0.5
    if k % 2:
        return 0.0
    sign = -1.0 if ((k - 2) // 2) % 2 else 1.0
    return sign * double_factorial(k - 3) / math.sqrt(2.0 * math.pi * factorial(k))


def cramer_bound_check(k, x):
    """True iff |He_k(x)| exp(-x^2/2) <= sqrt(k!)."""
    k = _check_degree(k)
    lhs = abs(he_eval(k, x)) * math.exp(-x * x / 2.0)
    return bool(lhs <= math.sqrt(factorial(k)))
