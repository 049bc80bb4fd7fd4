import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from relurecover.errors import DecompositionUnstableError, DegenerateSpectrumError, DomainError, NotRank1Error
from relurecover.jennrich import Rank1Term, decompose, detect_rank, extract_direction
from relurecover.tensor import outer, symmetric_power


def random_terms(rng, k, p, q, r):
    def units(n):
        M = rng.standard_normal((n, k))
        return M / np.linalg.norm(M, axis=0)

    return rng.uniform(0.5, 2.0, k), units(p), units(q), units(r)


def assemble(lam, U, V, Z):
    return np.einsum("i,pi,qi,ri->pqr", lam, U, V, Z)


def term_error(term, lam, u, v, z):
    return np.linalg.norm(term.tensor() - lam * outer([u, v, z]))


def best_matching_error(result, lam, U, V, Z):
    k = len(lam)
    best = np.inf
    for perm in itertools.permutations(range(k)):
        errs = [term_error(result.terms[perm[i]], lam[i], U[:, i], V[:, i], Z[:, i]) for i in range(k)]
        best = min(best, max(errs))
    return best


# --- detect_rank -------------------------------------------------------------------


def test_detect_rank_diag():
    assert detect_rank(np.diag([3.0, 2.0, 1.0]), 1.5) == 2


def test_detect_rank_zero():
    assert detect_rank(np.zeros((4, 4)), 1e-3) == 0


def test_detect_rank_noisy_rank4(rng):
    M = rng.standard_normal((8, 4)) @ rng.standard_normal((4, 8)) + 1e-8 * rng.standard_normal((8, 8))
    assert detect_rank(M, 1e-4) == 4


def test_detect_rank_cap_and_validation():
    assert detect_rank(np.eye(5), 0.5, m_max=3) == 3
    with pytest.raises(DomainError):
        detect_rank(np.eye(2), 0.0)


@given(st.integers(0, 2**31), st.floats(1e-6, 10), st.floats(1e-6, 10))
def test_detect_rank_monotone_in_threshold(seed, e1, e2):
    M = np.random.default_rng(seed).standard_normal((5, 6))
    lo, hi = sorted((e1, e2))
    assert detect_rank(M, hi) <= detect_rank(M, lo)


# --- decompose -------------------------------------------------------------------------


def test_rank_one_exact(rng):
    lam, U, V, Z = random_terms(rng, 1, 4, 5, 3)
    lam[:] = 2.0
    res = decompose(assemble(lam, U, V, Z), 1, seed=0)
    assert term_error(res.terms[0], 2.0, U[:, 0], V[:, 0], Z[:, 0]) <= 1e-10


def test_rank_three_noiseless(rng):
    lam, U, V, Z = random_terms(rng, 3, 6, 6, 6)
    res = decompose(assemble(lam, U, V, Z), 3, seed=1)
    assert best_matching_error(res, lam, U, V, Z) <= 1e-8
    assert res.detected_rank == 3


def test_rank_three_small_noise(rng):
    lam, U, V, Z = random_terms(rng, 3, 6, 6, 6)
    T = assemble(lam, U, V, Z)
    E = rng.standard_normal(T.shape)
    T = T + 1e-6 * E / np.linalg.norm(E)
    res = decompose(T, 3, seed=1)
    assert best_matching_error(res, lam, U, V, Z) <= 1e-4


def test_factors_unit_norm_and_residual_recorded(rng):
    lam, U, V, Z = random_terms(rng, 3, 5, 4, 3)
    T = assemble(lam, U, V, Z)
    res = decompose(T, 3, seed=2)
    for t in res.terms:
        for f in t.factors:
            assert abs(np.linalg.norm(f) - 1) <= 1e-10
    recon = sum(t.tensor() for t in res.terms)
    assert res.residual == pytest.approx(np.linalg.norm(T - recon), abs=1e-12)
    assert res.to_dict()["detected_rank"] == 3


def test_rank_above_dims_rejected():
    with pytest.raises(DomainError):
        decompose(np.zeros((2, 2, 3)), 3)
    with pytest.raises(DomainError):
        decompose(np.zeros((2, 2)), 1)


def test_rank_zero_returns_empty():
    res = decompose(np.ones((2, 2, 2)), 0)
    assert res.terms == [] and res.residual == pytest.approx(np.sqrt(8))


def test_complex_spectrum_raises():
    # a rotation-like slice ratio has complex eigenvalues for every contraction
    T = np.zeros((2, 2, 2))
    T[:, :, 0] = np.eye(2)
    T[:, :, 1] = [[0.0, 1.0], [-1.0, 0.0]]
    with pytest.raises(DecompositionUnstableError):
        decompose(T, 2, seed=0, max_retries=2)


def test_degenerate_spectrum_raises(rng):
    # two terms sharing the same third factor give equal eigenvalues
    u = np.linalg.qr(rng.standard_normal((3, 2)))[0]
    z = np.array([1.0, 0.0, 0.0])
    T = outer([u[:, 0], u[:, 0], z]) + outer([u[:, 1], u[:, 1], z])
    with pytest.raises(DegenerateSpectrumError):
        decompose(T, 2, seed=0, max_retries=1)


def test_deterministic_retry_sequence(rng):
    lam, U, V, Z = random_terms(rng, 3, 5, 5, 4)
    T = assemble(lam, U, V, Z)
    a, b = decompose(T, 3, seed=11), decompose(T, 3, seed=11)
    for s, t in zip(a.terms, b.terms):
        np.testing.assert_array_equal(s.tensor(), t.tensor())


def test_result_set_invariant_under_reseeding(rng):
    lam, U, V, Z = random_terms(rng, 4, 6, 6, 5)
    T = assemble(lam, U, V, Z)
    A = [t.tensor() for t in decompose(T, 4, seed=1).terms]
    B = [t.tensor() for t in decompose(T, 4, seed=99).terms]
    for X in A:
        assert min(np.linalg.norm(X - Y) for Y in B) <= 1e-8


def test_noiseless_residual_many_instances():
    rng = np.random.default_rng(2024)
    done = 0
    while done < 100:
        k = int(rng.integers(1, 7))
        p, q, r = (int(rng.integers(k, 9)) for _ in range(3))
        r = max(r, 2)
        lam, U, V, Z = random_terms(rng, k, p, q, r)
        lam = rng.uniform(1.0, 10.0, k)
        if k > 1:
            # instance conditions: condition number <= 50, pairwise third factors s_2 >= 0.1
            if max(np.linalg.cond(U), np.linalg.cond(V)) > 50:
                continue
            pair_s2 = min(np.linalg.svd(Z[:, [i, j]], compute_uv=False)[1]
                          for i, j in itertools.combinations(range(k), 2))
            if pair_s2 < 0.1:
                continue
        T = assemble(lam, U, V, Z)
        res = decompose(T, k, seed=done)
        assert res.residual <= 1e-8 * np.linalg.norm(T)
        done += 1


def test_graceful_degradation():
    rng = np.random.default_rng(5)
    lam, U, V, Z = random_terms(rng, 3, 6, 6, 6)
    T = assemble(lam, U, V, Z)
    E = rng.standard_normal(T.shape)
    E /= np.linalg.norm(E)
    levels = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3]
    errs = [best_matching_error(decompose(T + s * E, 3, seed=3), lam, U, V, Z) for s in levels]
    assert all(b >= a for a, b in zip(errs, errs[1:]))
    slope = np.polyfit(np.log(levels), np.log(errs), 1)[0]
    assert slope >= 0.5


# --- extract_direction ---------------------------------------------------------------------


def rank1_term_of_power(w, lam, d, l1, l2, l3):
    T = lam * symmetric_power(w, l1 + l2 + l3)
    F = T.reshape(d**l1, d**l2, d**l3)
    res = decompose(F, 1, seed=0)
    return res.terms[0]


@pytest.mark.parametrize("modes", ["all", "first"])
def test_extract_exact_fifth_power(rng, modes):
    w = rng.standard_normal(3)
    w /= np.linalg.norm(w)
    term = rank1_term_of_power(w, 1.7, 3, 2, 2, 1)
    wt, lam = extract_direction(term, 3, 2, 2, 1, modes=modes)
    assert min(np.linalg.norm(wt - w), np.linalg.norm(wt + w)) <= 1e-10
    # odd order: the sign of w is pushed into lam
    assert lam * np.sign(wt @ w) == pytest.approx(1.7, rel=1e-10)
    assert wt[np.argmax(np.abs(wt))] > 0


def test_extract_even_order_weight_sign(rng):
    w = rng.standard_normal(3)
    w /= np.linalg.norm(w)
    term = rank1_term_of_power(w, -0.8, 3, 1, 1, 2)
    wt, lam = extract_direction(term, 3, 1, 1, 2)
    assert lam == pytest.approx(-0.8, rel=1e-10)


@pytest.mark.parametrize("eps", [1e-6, 1e-5, 1e-4])
def test_extract_perturbed(rng, eps):
    d = 4
    w = rng.standard_normal(d)
    w /= np.linalg.norm(w)
    u, v, z = np.kron(w, w), np.kron(w, w), w
    pert = [f + eps * rng.standard_normal(f.size) / np.sqrt(f.size) for f in (u, v, z)]
    factors = tuple(f / np.linalg.norm(f) for f in pert)
    term = Rank1Term(1.0, factors)
    exact = symmetric_power(w, 5)
    err = np.linalg.norm(term.tensor().reshape(exact.shape) - exact)
    wt, lam = extract_direction(term, d, 2, 2, 1)
    assert min(np.linalg.norm(wt - w), np.linalg.norm(wt + w)) <= np.sqrt(2) * err + 1e-12
    assert abs(abs(lam) - 1.0) <= 3 * err + 1e-12
    if eps == 1e-6:
        assert min(np.linalg.norm(wt - w), np.linalg.norm(wt + w)) <= 1e-4


def test_extract_rejects_bad_lengths(rng):
    term = Rank1Term(1.0, (np.ones(3), np.ones(3), np.ones(2)))
    with pytest.raises(DomainError):
        extract_direction(term, 3, 1, 1, 1)


def test_extract_rejects_non_rank1():
    # u = vec(e1 ⊗ e2 + e2 ⊗ e1) is a rank-2 matrix; its "direction" is ambiguous
    d = 2
    M = np.zeros((2, 2))
    M[0, 1] = M[1, 0] = 1.0
    u = M.ravel() / np.linalg.norm(M)
    term = Rank1Term(1.0, (u, u, np.array([1.0])))
    with pytest.raises(NotRank1Error):
        extract_direction(term, d, 2, 2, 0)


def test_trials_keep_smallest_residual(rng):
    # the draws form a common prefix, so more trials can only lower the residual
    lam, U, V, Z = random_terms(rng, 3, 6, 6, 6)
    T = assemble(lam, U, V, Z)
    E = rng.standard_normal(T.shape)
    T = T + 1e-2 * E / np.linalg.norm(E)
    res = [decompose(T, 3, seed=4, trials=n) for n in (1, 3, 8)]
    assert [r.diagnostics["trials"] for r in res] == [1, 3, 8]
    assert res[0].residual >= res[1].residual >= res[2].residual
    assert res[0].residual == decompose(T, 3, seed=4).residual


def test_trials_must_be_positive(rng):
    with pytest.raises(DomainError):
        decompose(assemble(*random_terms(rng, 2, 3, 3, 3)), 2, trials=0)
