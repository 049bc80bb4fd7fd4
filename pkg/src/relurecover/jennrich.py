"""Jennrich's simultaneous diagonalization for order-3 tensors.

For T = sum_i lam_i u_i ⊗ v_i ⊗ z_i, contracting the third mode with random
g and h gives slices T_g = U D_g V^T and T_h = U D_h V^T.  The nonzero
eigenpairs of T_g T_h^+ are (<z_i,g>/<z_i,h>, u_i), those of
T_h^T (T_g^T)^+ are the reciprocals with eigenvectors v_i.  Pairing the
two spectra by reciprocal eigenvalue matches u_i with v_i; the third
factors and weights then come from one least-squares solve against T.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import DecompositionUnstableError, DegenerateSpectrumError, DomainError, NotRank1Error
from .tensor import khatri_rao, outer, singular_values

log = logging.getLogger(__name__)


@dataclass
class Rank1Term:
    """weight * f1 ⊗ f2 ⊗ f3 with unit-norm factors."""

    weight: float
    factors: tuple

    def tensor(self):
        return self.weight * outer(self.factors)


@dataclass
class DecompositionResult:
    terms: list
    residual: float
    eigengap: float
    retries: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def detected_rank(self):
        return len(self.terms)

    def to_dict(self):
        return {
            "detected_rank": self.detected_rank,
            "residual": self.residual,
            "eigengap": self.eigengap,
            "retries": self.retries,
            "weights": [t.weight for t in self.terms],
            **self.diagnostics,
        }


def detect_rank(M, eta1, m_max=None):
    """Number of singular values of M above eta1, capped at m_max."""
    if eta1 <= 0:
        raise DomainError("eta1 must be positive")
    r = int(np.sum(singular_values(M) > eta1))
    return r if m_max is None else min(r, int(m_max))


def _unit(v):
    return v / np.linalg.norm(v)


def _eig_ratio(X, Y, k, imag_tol):
    """Eigenpairs of X Y^+ (rank-k pseudo-inverse) on the range of Y.

    Returns (eigenvalues, unit eigenvectors) or None when some eigenvalue
    has a relative imaginary part above ``imag_tol``.
    """
    A, s, Bt = linalg.svd(Y, full_matrices=False)
    A, s, B = A[:, :k], s[:k], Bt[:k].T
    K = (A.T @ X @ B) / s
    vals, vecs = linalg.eig(K)
    if np.any(np.abs(vals.imag) > imag_tol * np.abs(vals)):
        return None
    vecs = A @ vecs.real
    return vals.real, vecs / np.linalg.norm(vecs, axis=0)


def _relative_gap(vals):
    if len(vals) < 2:
        return np.inf
    v = np.sort(vals)
    return float(np.min(np.diff(v)) / np.max(np.abs(v)))


def _pair_reciprocal(mu, nu):
    """Greedy matching of mu_i with nu_j by |mu_i nu_j - 1|, ties by index order."""
    cost = np.abs(np.outer(mu, nu) - 1.0)
    k = len(mu)
    order = np.argsort(cost, axis=None, kind="stable")
    if len(np.unique(cost)) < cost.size:
        log.debug("tied pairing costs; breaking ties by index order")
    pair = -np.ones(k, dtype=int)
    used = np.zeros(k, dtype=bool)
    for flat in order:
        i, j = divmod(int(flat), k)
        if pair[i] < 0 and not used[j]:
            pair[i] = j
            used[j] = True
    return pair


def decompose(T, k, seed=0, max_retries=5, imag_tol=1e-6, gap_tol=1e-10, trials=1):
    """Rank-k Jennrich decomposition of an order-3 tensor.

    Retries with fresh contraction vectors (a deterministic sequence from
    ``seed``) when eigenvalues come out complex or nearly coincident.
    With ``trials > 1`` that many successful contraction pairs are tried
    and the decomposition with the smallest residual is returned; under
    noise the error depends strongly on the eigengap of the draw.
    """
    T = np.asarray(T, dtype=np.float64)
    if T.ndim != 3:
        raise DomainError(f"Jennrich needs an order-3 tensor, got order {T.ndim}")
    if trials < 1:
        raise DomainError(f"trials must be at least 1, got {trials}")
    p, q, r = T.shape
    if not 0 <= k <= min(p, q):
        raise DomainError(f"rank {k} exceeds min(p, q) = {min(p, q)}")
    norm = float(np.linalg.norm(T))
    if k == 0:
        return DecompositionResult([], norm, np.inf, 0)

    rng = np.random.default_rng(seed)
    failure, best, successes = None, None, 0
    for attempt in range(max_retries + trials):
        g = _unit(rng.standard_normal(r))
        h = _unit(rng.standard_normal(r))
        Tg, Th = T @ g, T @ h
        first = _eig_ratio(Tg, Th, k, imag_tol)
        second = _eig_ratio(Th.T, Tg.T, k, imag_tol)
        if first is None or second is None:
            failure = "complex"
            continue
        mu, U = first
        nu, V = second
        gap = _relative_gap(mu)
        if gap < gap_tol:
            failure = "gap"
            continue
        V = V[:, _pair_reciprocal(mu, nu)]
        KR = khatri_rao(U, V)
        C, *_ = linalg.lstsq(KR, T.reshape(p * q, r))
        weights = np.linalg.norm(C, axis=1)
        terms = []
        for i in range(k):
            z = C[i] / weights[i] if weights[i] > 0 else C[i]
            terms.append(Rank1Term(float(weights[i]), (U[:, i], V[:, i], z)))
        recon = (KR @ C).reshape(p, q, r)
        residual = float(np.linalg.norm(T - recon))
        if best is None or residual < best.residual:
            best = DecompositionResult(terms, residual, gap, attempt,
                                       {"relative_residual": residual / norm if norm else 0.0})
        successes += 1
        if successes == trials:
            break
    if best is not None:
        best.diagnostics["trials"] = successes
        return best
    if failure == "gap":
        raise DegenerateSpectrumError(
            f"eigenvalue gap stayed below {gap_tol} after {max_retries} retries")
    raise DecompositionUnstableError(
        f"complex eigenvalues persisted after {max_retries} retries")


def _mode_gram(R):
    """Sum over modes of unfold_i(R) unfold_i(R)^T for a cubical tensor R."""
    d = R.shape[0]
    G = np.zeros((d, d))
    for mode in range(R.ndim):
        M = np.moveaxis(R, mode, 0).reshape(d, -1)
        G += M @ M.T
    return G


def extract_direction(term, d, l1, l2, l3, modes="all"):
    """Unit vector w and signed weight lam with term ≈ lam w^{⊗(l1+l2+l3)}.

    The term is reassembled as an order-t tensor over R^d.  With
    ``modes="first"`` w is the leading left singular vector of the
    d x d^(t-1) unfolding; ``modes="all"`` pools every mode unfolding,
    which averages the noise of the three factors.  The sign of w makes its
    largest-magnitude coordinate positive; lam absorbs the resulting sign
    (for odd t the sign of w is not identifiable from the term alone).
    """
    t = l1 + l2 + l3
    lengths = tuple(len(f) for f in term.factors)
    if lengths != (d**l1, d**l2, d**l3):
        raise DomainError(f"factor lengths {lengths} do not match d={d}, ({l1}, {l2}, {l3})")
    R = term.tensor().reshape((d,) * t)
    if modes == "first":
        left, s, _ = linalg.svd(R.reshape(d, -1), full_matrices=False)
        w = left[:, 0]
    elif modes == "all":
        evals, evecs = linalg.eigh(_mode_gram(R))
        s = np.sqrt(np.maximum(evals[::-1], 0.0))
        w = evecs[:, -1]
    else:
        raise DomainError(f"unknown modes option {modes!r}")
    if s[0] == 0 or (len(s) > 1 and s[0] - s[1] < 1e-8 * s[0]):
        raise NotRank1Error("leading singular value is not separated; term is not rank one")
    w = w / np.linalg.norm(w)
    if w[np.argmax(np.abs(w))] < 0:
        w = -w
    lam = float(np.tensordot(R, outer([w] * t), axes=t))
    return w, lam
