"""Independent Monte-Carlo and quadrature estimates of Hermite coefficients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from ..errors import DomainError
from ..hermite import he_all, he_canonical
from ..network import sample_inputs
from ..tensor import check_memory, symmetric_broadcast


@dataclass
class MCEstimate:
    tensor: np.ndarray
    stderr: np.ndarray
    N: int


def mc_hermite_coeff(net, k, N, seed, groups=20):
    """Monte-Carlo E[f(x) He_k(x)] with delete-one-group jackknife standard errors.

    Intended for small d (at most 3); the full tensor and its entrywise
    standard errors are returned.
    """
    if net.d > 3:
        raise DomainError("the Monte-Carlo oracle is meant for d <= 3")
    if N < 2 * groups:
        raise DomainError(f"need at least {2 * groups} samples for {groups} jackknife groups")
    check_memory((net.d,) * k)
    X = sample_inputs(N, net.d, seed)
    prod = net(X)[:, None] * he_canonical(k, X)
    sizes = np.full(groups, N // groups)
    sizes[: N % groups] += 1
    edges = np.concatenate([[0], np.cumsum(sizes)])
    sums = np.array([prod[edges[g]:edges[g + 1]].sum(axis=0) for g in range(groups)])
    total = sums.sum(axis=0)
    mean = total / N
    loo = (total - sums) / (N - sizes)[:, None]
    jack = np.sqrt((groups - 1) / groups * ((loo - loo.mean(axis=0)) ** 2).sum(axis=0))
    return MCEstimate(symmetric_broadcast(mean, net.d, k), symmetric_broadcast(jack, net.d, k), N)


def quadrature_hermite_coeff(net, k, nodes=200):
    """Gauss-Hermite quadrature of E[f(x) He_k(x)] for a one-dimensional network.

    The ReLU kinks limit the accuracy to a few digits; it is an oracle that
    shares no code path with the closed form or the sampler.
    """
    if net.d != 1:
        raise DomainError("quadrature oracle needs d = 1")
    with np.errstate(all="ignore"):
        x, w = hermegauss(nodes)
    if not np.all(np.isfinite(w)):
        # numpy's weight recursion overflows somewhere above 250 nodes
        raise DomainError(f"Gauss-Hermite weights overflow at {nodes} nodes")
    w = w / np.sqrt(2.0 * np.pi)
    return float(np.sum(w * net(x[:, None]) * he_all(x, k)[:, k]))
