import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import optimize

from relurecover.errors import DegenerateTruncationError, DomainError, RecoveryError
from relurecover.network import Dataset, ReluNetwork, random_network, sample
from relurecover.recover import RecoveredUnit
from relurecover.regress import (COORDINATED2, FULL8, FeatureMap, TruncatedLossSpec, absorb_large_bias,
                                 ball_constrained_minimum, build_features, consolidate, default_radius,
                                 default_tau, mc_mse, project_ball, run_algorithm5, truncated_pgd,
                                 truncated_stats)


def units_of(net):
    return [RecoveredUnit(float(net.a[i]), float(net.b[i]), net.W[:, i].copy()) for i in range(net.m)]


def random_units(rng, d, n):
    W = rng.standard_normal((d, n))
    W /= np.linalg.norm(W, axis=0)
    return [RecoveredUnit(float(rng.uniform(0.5, 2)), float(rng.uniform(-1, 1)), W[:, i]) for i in range(n)]


# --- features ---------------------------------------------------------------------------


def test_feature_dimensions():
    u = [RecoveredUnit(1.0, 0.0, np.array([1.0, 0.0]))]
    assert FeatureMap(u, 2, COORDINATED2).dim == 5
    assert FeatureMap(u, 2, FULL8).dim == 11


def test_feature_values_single_unit():
    fmap = FeatureMap([RecoveredUnit(1.0, 0.0, np.array([1.0, 0.0]))], 2)
    phi = build_features(fmap, np.array([1.0, 0.0]))
    np.testing.assert_array_equal(phi, [1.0, 0.0, 1.0, 0.0, 1.0])


def test_feature_full8_signs(rng):
    u = RecoveredUnit(1.5, 0.3, np.array([0.6, 0.8]))
    x = rng.standard_normal(2)
    phi = build_features(FeatureMap([u], 2, FULL8), x)
    z = u.w @ x
    expected = [s3 * 1.5 * max(s1 * z + s2 * 0.3, 0) for s1 in (1, -1) for s2 in (1, -1) for s3 in (1, -1)]
    np.testing.assert_allclose(phi[:8], expected)


def test_feature_dim_mismatch():
    fmap = FeatureMap([], 3)
    with pytest.raises(DomainError):
        build_features(fmap, np.ones(2))
    with pytest.raises(DomainError):
        FeatureMap([RecoveredUnit(1.0, 0.0, np.ones(2) / math.sqrt(2))], 3)


def test_feature_map_drops_unrecoverable():
    bad = RecoveredUnit(float("nan"), float("nan"), np.array([1.0, 0.0]), unrecoverable=True)
    assert FeatureMap([bad], 2).dim == 3


def test_exact_units_make_target_linear_in_features(rng):
    net = random_network(4, 3, seed=0)
    fmap = FeatureMap(units_of(net), 4)
    X = rng.standard_normal((2000, 4))
    Phi = build_features(fmap, X)
    beta, *_ = np.linalg.lstsq(Phi, net(X), rcond=None)
    assert np.max(np.abs(Phi @ beta - net(X))) <= 1e-10


# --- thresholds -------------------------------------------------------------------------------


def test_default_tau_unit_log():
    assert default_tau(1, 1, 1, 1, math.exp(-1)) == pytest.approx(180.0)


def test_default_tau_arithmetic_oracle():
    # 20 * 4 * (8 * 4 + 10) * 2 * sqrt(log(4 * 10 * 2 * 4 / 0.1)), evaluated independently
    assert default_tau(4, 4, 10, 2, 0.1) == pytest.approx(19091.076594050843, rel=1e-12)


def test_default_tau_monotone():
    assert default_tau(2, 2, 3, 3, 0.1) > default_tau(2, 2, 3, 2, 0.1)
    assert default_tau(3, 2, 3, 2, 0.1) > default_tau(2, 2, 3, 2, 0.1)


def test_default_tau_rejects_eps():
    with pytest.raises(DomainError):
        default_tau(1, 1, 1, 1, 1.0)


def test_default_radius_modes():
    assert default_radius(3, 2, 2.0, FULL8) == pytest.approx(4.0 + 9.0)
    assert default_radius(3, 2, 2.0, COORDINATED2) == pytest.approx(2.0 + 9.0)


# --- truncated PGD -------------------------------------------------------------------------------


def linear_data(rng, n=4000, d=3, noise=0.1):
    X = rng.standard_normal((n, d))
    y = X @ np.array([0.5, -1.0, 0.25]) + 0.3 + noise * rng.standard_normal(n)
    return Dataset(X, y)


def test_pgd_matches_ols_interior(rng):
    data = linear_data(rng)
    fmap = FeatureMap([], 3)
    res = truncated_pgd(data, fmap, TruncatedLossSpec(1e12, 100.0, steps=5000))
    Phi = build_features(fmap, data.X)
    ols, *_ = np.linalg.lstsq(Phi, data.y, rcond=None)
    np.testing.assert_allclose(res.beta, ols, atol=1e-8)


def test_pgd_zero_labels(rng):
    data = Dataset(rng.standard_normal((500, 2)), np.zeros(500))
    res = truncated_pgd(data, FeatureMap([], 2), TruncatedLossSpec(1e6, 5.0, steps=100))
    np.testing.assert_array_equal(res.beta, 0.0)


def test_pgd_realizable_loss_vanishes():
    net = random_network(3, 2, seed=1)
    data = sample(net, 20_000, seed=2)
    res = truncated_pgd(data, FeatureMap(units_of(net), 3), TruncatedLossSpec(1e6, 50.0, steps=20_000))
    assert res.loss <= 1e-10


def test_pgd_degenerate_truncation(rng):
    data = linear_data(rng, n=100)
    with pytest.raises(DegenerateTruncationError) as info:
        truncated_pgd(data, FeatureMap([], 3), TruncatedLossSpec(0.5, 1.0))
    assert "0.5" in str(info.value)


def test_pgd_gap_certificate_enforced(rng):
    data = linear_data(rng)
    spec = TruncatedLossSpec(1e6, 100.0, steps=1, gap_target=1e-12)
    with pytest.raises(RecoveryError):
        truncated_pgd(data, FeatureMap([], 3), spec)


def test_ball_minimum_boundary_matches_generic_solver(rng):
    data = linear_data(rng)
    fmap = FeatureMap([], 3)
    stats = truncated_stats(data, fmap, 1e6)
    radius = 0.5
    beta = ball_constrained_minimum(stats, radius)
    ref = optimize.minimize(stats.loss, np.zeros(4), method="SLSQP",
                            constraints=[{"type": "ineq", "fun": lambda b: radius**2 - b @ b}], tol=1e-14)
    assert np.linalg.norm(beta) == pytest.approx(radius, rel=1e-10)
    assert stats.loss(beta) <= ref.fun + 1e-10


@given(st.integers(0, 2**31), st.floats(0.01, 5.0))
def test_projection_stays_in_ball(seed, radius):
    rng = np.random.default_rng(seed)
    data = Dataset(rng.standard_normal((200, 2)), 10 * rng.standard_normal(200))
    res = truncated_pgd(data, FeatureMap([], 2), TruncatedLossSpec(1e6, radius, steps=50))
    assert np.linalg.norm(res.beta) <= radius + 1e-12
    assert np.linalg.norm(project_ball(rng.standard_normal(3) * 10, radius)) <= radius + 1e-12


def test_truncation_fraction_small_at_default_tau():
    net = random_network(6, 3, seed=0)
    data = sample(net, 50_000, seed=1)
    stats = truncated_stats(data, FeatureMap(units_of(net), 6), default_tau(3, 3, 6, 2.0, 0.05))
    assert stats.truncated_fraction <= 0.01


def test_truncated_loss_approaches_full_loss_as_tau_grows():
    net = random_network(3, 2, seed=3)
    data = sample(net, 20_000, seed=4)
    fmap = FeatureMap(units_of(net)[:1], 3)
    beta = np.zeros(fmap.dim)
    full = truncated_stats(data, fmap, 1e12).loss(beta)
    gaps = [abs(truncated_stats(data, fmap, tau).loss(beta) - full) for tau in (2.0, 3.0, 5.0, 10.0)]
    assert all(b <= a for a, b in zip(gaps, gaps[1:]))


# --- large-bias surrogate ------------------------------------------------------------------------------


def test_absorb_positive_bias():
    sur = absorb_large_bias([1.0], [6.0], np.array([[1.0], [0.0]]))
    np.testing.assert_array_equal(sur.beta, [1.0, 0.0])
    assert sur.C == 6.0
    # E[relu(-(u + 6))^2] by adaptive quadrature, frozen
    assert sur.predicted_mse == pytest.approx(4.844576745511829e-11, rel=1e-6)
    assert sur.predicted_mse <= 1e-6


def test_absorb_negative_bias():
    sur = absorb_large_bias([1.0], [-6.0], np.array([[1.0], [0.0]]))
    np.testing.assert_array_equal(sur.beta, [0.0, 0.0])
    assert sur.C == 0.0
    assert sur.predicted_mse == pytest.approx(4.844576745511829e-11, rel=1e-6)


def test_absorb_empty():
    sur = absorb_large_bias([], [], np.zeros((3, 0)))
    assert sur.C == 0.0 and sur.predicted_mse == 0.0
    np.testing.assert_array_equal(sur.beta, np.zeros(3))


def test_absorb_rejects_small_bias():
    with pytest.raises(DomainError):
        absorb_large_bias([1.0], [0.5], np.array([[1.0]]), threshold=3.0)


def test_absorb_norm_bounds():
    W = np.eye(2)
    absorb_large_bias([2.0, 2.0], [2.0, 2.0], W, B=2.0)
    with pytest.raises(DomainError):
        absorb_large_bias([3.0, 3.0], [3.0, 3.0], W, B=2.0)


def test_absorb_prediction_matches_monte_carlo():
    base = random_network(3, 2, seed=1)
    net = ReluNetwork(base.a, [2.0, -2.5], base.W)
    sur = absorb_large_bias(net.a, net.b, net.W)
    mse, se = mc_mse(net, lambda X: X @ sur.beta + sur.C, 3, 10**6, seed=5)
    assert abs(mse - sur.predicted_mse) <= 4 * se


# --- consolidation ---------------------------------------------------------------------------------------


def test_consolidate_identity_when_only_positive_features(rng):
    units = random_units(rng, 3, 2)
    fmap = FeatureMap(units, 3)
    beta = np.zeros(fmap.dim)
    beta[0] = beta[2] = 1.0
    net = consolidate(beta, fmap)
    assert net.m == 2
    for i, u in enumerate(units):
        assert net.a[i] == pytest.approx(u.a)
        assert net.b[i] == u.b
        np.testing.assert_array_equal(net.W[:, i], u.w)


def test_consolidate_pure_linear(rng):
    fmap = FeatureMap([], 3)
    beta = np.array([0.5, -1.0, 2.0, 0.7])
    net = consolidate(beta, fmap)
    assert net.m == 2
    X = rng.standard_normal((100, 3))
    np.testing.assert_allclose(net(X), X @ beta[:3] + 0.7, atol=1e-12)


def test_consolidate_constant_only(rng):
    net = consolidate(np.array([0.0, 0.0, -1.5]), FeatureMap([], 2))
    X = rng.standard_normal((10, 2))
    np.testing.assert_allclose(net(X), -1.5)


def test_consolidate_zero_function():
    assert consolidate(np.zeros(3), FeatureMap([], 2)).m == 0


@pytest.mark.parametrize("mode,per_unit", [(COORDINATED2, 1), (FULL8, 8)])
def test_consolidate_pointwise_exact(mode, per_unit):
    rng = np.random.default_rng(77)
    for _ in range(20):
        d, n = int(rng.integers(1, 6)), int(rng.integers(0, 5))
        fmap = FeatureMap(random_units(rng, d, n), d, mode)
        beta = rng.standard_normal(fmap.dim)
        net = consolidate(beta, fmap)
        X = rng.standard_normal((1000, d))
        assert np.max(np.abs(net(X) - build_features(fmap, X) @ beta)) <= 1e-9
        assert net.m <= per_unit * n + 2


def test_consolidate_shape_check():
    with pytest.raises(DomainError):
        consolidate(np.zeros(2), FeatureMap([], 2))


# --- end to end ---------------------------------------------------------------------------------------


@pytest.mark.slow
def test_algorithm5_realizable():
    net = random_network(4, 3, seed=2, b_bound=1.0)
    data = sample(net, 10**6, seed=3)
    res = run_algorithm5(data, units_of(net), 0.05, seed=4, m=3, reference=net, n_eval=10**5)
    assert res.mse_estimate <= 1e-8
    assert res.network.m <= 3 + 2
    assert res.pgd.certified


@pytest.mark.slow
def test_algorithm5_empty_set_matches_surrogate():
    base = random_network(3, 2, seed=1)
    net = ReluNetwork(base.a, [4.0, -4.0], base.W, B=5.0)
    sur = absorb_large_bias(net.a, net.b, net.W)
    res = run_algorithm5(sample(net, 10**6, seed=2), [], 0.05, seed=3, m=2, B=5.0, reference=net, n_eval=10**6)
    assert abs(res.mse_estimate - sur.predicted_mse) <= 3 * res.mse_stderr
    assert res.network.m <= 2


def test_algorithm5_rejects_non_dataset():
    with pytest.raises(DomainError):
        run_algorithm5(np.zeros((3, 2)), [], 0.05)


def test_algorithm5_metrics_keys():
    net = random_network(2, 1, seed=0)
    res = run_algorithm5(sample(net, 5000, seed=1), units_of(net), 0.1, m=1, reference=net, n_eval=2000)
    m = res.metrics()
    for key in ("mse_estimate", "mse_stderr", "units", "truncated_fraction", "tau", "radius"):
        assert key in m
    assert m["mse_upper95"] >= m["mse_estimate"]
