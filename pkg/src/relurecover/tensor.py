"""Dense tensors as row-major numpy arrays: flattening, Khatri-Rao, rank-1 sums.

A tensor is a plain ``numpy.ndarray`` of float64 in C order (last index
fastest).  Flattening groups consecutive modes, so it is a reshape and
never copies a contiguous input.
"""

from __future__ import annotations

import struct
from itertools import combinations_with_replacement
from math import factorial, prod
from pathlib import Path

import numpy as np
from scipy import linalg

from .errors import DomainError, ResourceError

DEFAULT_MEMORY_CAP = 8 * 10**8
_memory_cap = DEFAULT_MEMORY_CAP

TENSOR_MAGIC = b"HTNSR1"


def memory_cap():
    return _memory_cap


def set_memory_cap(nbytes):
    """Set the global cap (bytes) on dense tensors; returns the previous value."""
    global _memory_cap
    if nbytes <= 0:
        raise DomainError("memory cap must be positive")
    previous, _memory_cap = _memory_cap, int(nbytes)
    return previous


def check_memory(shape, itemsize=8, cap=None, what="tensor"):
    """Raise ResourceError if an array of ``shape`` would exceed the cap."""
    cap = _memory_cap if cap is None else cap
    required = prod(int(s) for s in shape) * itemsize
    if required > cap:
        raise ResourceError(required, cap, what)
    return required


def _as_finite(T, name="tensor"):
    T = np.asarray(T, dtype=np.float64)
    if not np.all(np.isfinite(T)):
        raise DomainError(f"{name} has non-finite entries")
    return T


def flatten(T, t1, t2, t3=0):
    """Group the modes of a cubical order-t tensor into (d^t1, d^t2, d^t3).

    With ``t3 == 0`` the result is the matrix of shape (d^t1, d^t2).
    """
    T = np.asarray(T)
    t = T.ndim
    if min(t1, t2, t3) < 0 or t1 + t2 + t3 != t:
        raise DomainError(f"cannot flatten an order-{t} tensor as ({t1}, {t2}, {t3})")
    if t and len(set(T.shape)) != 1:
        raise DomainError(f"flatten expects equal mode sizes, got {T.shape}")
    d = T.shape[0] if t else 1
    if t3 == 0:
        return T.reshape(d**t1, d**t2)
    return T.reshape(d**t1, d**t2, d**t3)


def unflatten(M, d, order):
    """Inverse of :func:`flatten` for any grouping."""
    M = np.asarray(M)
    if M.size != d**order:
        raise DomainError(f"{M.size} entries cannot form an order-{order} tensor over d={d}")
    return M.reshape((d,) * order)


def khatri_rao(U, V):
    """Column-wise Kronecker product: column i is ``kron(U[:, i], V[:, i])``."""
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if U.ndim != 2 or V.ndim != 2 or U.shape[1] != V.shape[1]:
        raise DomainError(f"Khatri-Rao needs equal column counts, got {U.shape} and {V.shape}")
    return np.einsum("ik,jk->ijk", U, V).reshape(U.shape[0] * V.shape[0], U.shape[1])


def khatri_rao_power(W, ell):
    """W^{⊙ell}; column i is vec(w_i^{⊗ell})."""
    W = np.asarray(W, dtype=np.float64)
    out = W
    for _ in range(ell - 1):
        out = khatri_rao(out, W)
    return out


def outer(vectors):
    """Outer product of a list of vectors as a tensor."""
    out = np.ones(())
    for v in vectors:
        out = np.multiply.outer(out, np.asarray(v, dtype=np.float64))
    return out


def symmetric_power(w, k):
    """w^{⊗k} as an order-k tensor."""
    return outer([w] * k)


def rank1_sum(terms):
    """Sum of weighted outer products ``[(weight, [f1, f2, ...]), ...]``."""
    terms = list(terms)
    if not terms:
        raise DomainError("rank1_sum needs at least one term")
    shape = tuple(len(f) for f in terms[0][1])
    check_memory(shape)
    total = np.zeros(shape)
    for weight, factors in terms:
        if tuple(len(f) for f in factors) != shape:
            raise DomainError(f"term shape {tuple(len(f) for f in factors)} differs from {shape}")
        total += weight * outer(factors)
    return total


def frobenius_distance(A, B):
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise DomainError(f"shape mismatch {A.shape} vs {B.shape}")
    return float(np.linalg.norm((A - B).ravel()))


def singular_values(M):
    """Full singular spectrum of a matrix, descending."""
    M = _as_finite(M, "matrix")
    if M.ndim != 2:
        raise DomainError(f"singular_values expects a matrix, got order {M.ndim}")
    if M.size == 0:
        return np.zeros(0)
    return linalg.svd(M, compute_uv=False, lapack_driver="gesdd")


def sigma_min(M):
    """Smallest of the min(rows, cols) singular values (0 for empty)."""
    s = singular_values(M)
    return float(s[-1]) if s.size else 0.0


# --- symmetric tensors ---------------------------------------------------


def canonical_indices(d, k):
    """Sorted multi-indices i1 <= ... <= ik, as an int array (C, k)."""
    idx = list(combinations_with_replacement(range(d), k))
    return np.array(idx, dtype=np.int64).reshape(len(idx), k)


def index_counts(canon, d):
    """Occurrence counts n_i of each coordinate for every canonical index, (C, d)."""
    counts = np.zeros((canon.shape[0], d), dtype=np.int64)
    for col in range(canon.shape[1]):
        np.add.at(counts, (np.arange(canon.shape[0]), canon[:, col]), 1)
    return counts


def multiplicities(canon, d):
    """Number of orderings of each canonical multi-index (k! / prod n_i!)."""
    k = canon.shape[1]
    counts = index_counts(canon, d)
    denom = np.array([prod(factorial(int(c)) for c in row) for row in counts], dtype=np.float64)
    return factorial(k) / denom


def symmetric_broadcast(values, d, k):
    """Expand values on canonical indices into the full symmetric order-k tensor."""
    values = np.asarray(values, dtype=np.float64)
    if k == 0:
        return values.reshape(())
    check_memory((d,) * k)
    full = np.indices((d,) * k).reshape(k, -1).T
    full.sort(axis=1)
    powers = d ** np.arange(k - 1, -1, -1)
    keys = full @ powers
    canon_keys = canonical_indices(d, k) @ powers
    pos = np.searchsorted(canon_keys, keys)
    return values[pos].reshape((d,) * k)


# --- HTNSR1 binary format ---------------------------------------------------


def write_tensor(path, T):
    """Write ``T`` as HTNSR1: magic, u8 order, u64 LE dims, f64 LE row-major data."""
    # np.array rather than ascontiguousarray, which would promote order 0 to order 1
    T = np.array(T, dtype="<f8", order="C")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<B", T.ndim))
        fh.write(struct.pack(f"<{T.ndim}Q", *T.shape))
        fh.write(T.tobytes(order="C"))


def read_tensor(path):
    data = Path(path).read_bytes()
    if data[:6] != TENSOR_MAGIC:
        raise DomainError(f"{path}: not an HTNSR1 file")
    order = data[6]
    dims = struct.unpack_from(f"<{order}Q", data, 7)
    offset = 7 + 8 * order
    count = prod(dims)
    if len(data) - offset != 8 * count:
        raise DomainError(f"{path}: payload holds {len(data) - offset} bytes, expected {8 * count}")
    return np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(dims).astype(np.float64)
