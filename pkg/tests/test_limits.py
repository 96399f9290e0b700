import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resnet_scaling.core import RngStream
from resnet_scaling.limits import (ItoSpec, curved_activation, discrete_hidden_states, euler_maruyama,
                                   integrate_ode, ito_correction_check, q_form, sample_driving_path,
                                   sigma_tensors, strong_error_sweep)
from resnet_scaling.resnet import Architecture, ResNet, forward


def test_q_form_examples():
    d = 3
    x = np.array([0.4, -2.0, 1.5])
    assert np.array_equal(q_form(np.zeros((d,) * 4), np.eye(d), x), np.ones(d))
    SA = np.random.default_rng(0).normal(size=(d,) * 4)
    Sb = np.diag([0.5, 2.0, 3.0])
    assert np.array_equal(q_form(SA, Sb, np.zeros(d)), np.diag(Sb))
    a, c = 1.7, 0.3
    assert q_form(np.full((1, 1, 1, 1), a), np.full((1, 1), c), np.array([2.0]))[0] == pytest.approx(a * 4 + c)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_q_form_bounded_below_for_psd_sigma(seed, d):
    rng = np.random.default_rng(seed)
    SA, Sb = sigma_tensors(rng.normal(size=(d,) * 4), rng.normal(size=(d, d)))
    # symmetric positive semidefinite in the paired index (ij) <-> (mn)
    M = SA.reshape(d * d, d * d)
    assert np.allclose(M, M.T)
    assert np.linalg.eigvalsh(M).min() > -1e-10
    x = rng.normal(size=(5, d))
    assert np.all(q_form(SA, Sb, x) >= np.diag(Sb) - 1e-12)


def test_q_form_batched_matches_loop():
    rng = np.random.default_rng(1)
    SA, Sb = sigma_tensors(rng.normal(size=(2,) * 4), rng.normal(size=(2, 2)))
    X = rng.normal(size=(4, 2))
    assert np.allclose(q_form(SA, Sb, X), np.stack([q_form(SA, Sb, x) for x in X]), atol=1e-14)


def test_driving_path_deterministic_drift():
    c = 0.37
    spec = ItoSpec.constant(2, U_A=c)
    path = sample_driving_path(spec, 64, RngStream(0))
    dW = path.increments()[2]
    assert np.array_equal(dW, np.broadcast_to(c * np.eye(2) / 64, dW.shape))
    assert np.allclose(path.W_A[-1, 0], c * np.eye(2), atol=1e-14)
    assert not np.any(path.W_A[0]) and not np.any(path.W_b[0])


def test_driving_path_variance():
    s, L = 0.8, 1000
    path = sample_driving_path(ItoSpec.constant(1, q_A=s), L, RngStream(3), n_paths=100)
    dW = np.diff(path.W_A, axis=0).ravel()
    assert dW.size == 10 ** 5
    assert dW.var() == pytest.approx(s * s / L, rel=0.05)
    dB = np.diff(path.B_b, axis=0).ravel()
    assert dB.var() == pytest.approx(1 / L, rel=0.05)


def test_driving_path_reproducible_per_path():
    spec = ItoSpec.constant(2, q_A=0.5, q_b=0.5)
    a = sample_driving_path(spec, 32, RngStream(5), n_paths=4)
    b = sample_driving_path(spec, 32, RngStream(5), n_paths=4)
    assert a.W_A.tobytes() == b.W_A.tobytes() and a.W_b.tobytes() == b.W_b.tobytes()
    one = sample_driving_path(spec, 32, RngStream(5), n_paths=1)
    assert one.W_A[:, 0].tobytes() == a.W_A[:, 0].tobytes()


def test_coarsening_preserves_endpoints():
    spec = ItoSpec.constant(2, U_A=0.1, q_A=0.5, q_b=0.3)
    fine = sample_driving_path(spec, 1024, RngStream(1), n_paths=3)
    for L in (1, 4, 64, 1024):
        coarse = fine.coarsen(L)
        assert coarse.L == L
        assert np.array_equal(coarse.W_A[-1], fine.W_A[-1])
        assert np.array_equal(coarse.W_b[-1], fine.W_b[-1])
    with pytest.raises(ValueError):
        fine.coarsen(3)


def test_zero_coefficients_keep_input():
    spec = ItoSpec.constant(2, alpha=0.3, beta=0.7)
    path = sample_driving_path(spec, 50, RngStream(0), n_paths=2)
    x = np.array([0.5, -1.0])
    assert np.array_equal(discrete_hidden_states(spec, path, x), np.broadcast_to(x, (51, 2, 2)))
    assert np.array_equal(euler_maruyama(spec, path, x), np.broadcast_to(x, (51, 2, 2)))


def test_discrete_recursion_converges_to_exponential():
    a, x = 0.9, 1.3
    spec = ItoSpec.constant(1, Abar=a, alpha=0.5, beta=0.5)
    errs = []
    for L in (64, 128, 256, 512, 1024):
        h = discrete_hidden_states(spec, sample_driving_path(spec, L, RngStream(0)), [x])
        errs.append(abs(h[-1, 0, 0] - math.exp(a) * x))
    ratios = [e1 / e2 for e1, e2 in zip(errs, errs[1:])]
    assert all(1.7 < r < 2.3 for r in ratios)
    assert errs[-1] * 1024 < 5


def test_standard_initialisation_is_the_iid_case():
    L, d = 200, 4
    spec = ItoSpec.constant(d, q_A=1 / d, q_b=d ** -0.5, alpha=0.0, beta=1.0)
    path = sample_driving_path(spec, L, RngStream(2))
    dA, db = np.diff(path.W_A[:, 0], axis=0), np.diff(path.W_b[:, 0], axis=0)
    assert dA.var() == pytest.approx(1 / (L * d * d), rel=0.1)
    assert db.var() == pytest.approx(1 / (L * d), rel=0.1)
    x = np.array([0.2, -0.1, 0.4, 1.0])
    net = ResNet(Architecture(L, d), dA, db, np.array(1.0))
    assert np.allclose(discrete_hidden_states(spec, path, x)[:, 0], forward(net, x), atol=1e-14)


def test_em_additive_noise_exact():
    spec = ItoSpec.constant(2, q_b=0.6)
    path = sample_driving_path(spec, 100, RngStream(4), n_paths=5)
    x = np.array([1.0, 2.0])
    h = euler_maruyama(spec, path, x)
    assert np.allclose(h[-1], x + path.W_b[-1], atol=1e-13)


def test_em_without_noise_is_deterministic_euler():
    a = 0.7
    spec = ItoSpec.constant(1, Abar=a, alpha=0.0, beta=1.0)
    for L in (100, 200):
        h = euler_maruyama(spec, sample_driving_path(spec, L, RngStream(0)), [1.0])
        assert h[-1, 0, 0] == pytest.approx((1 + a / L) ** L, rel=1e-12)
    ref = integrate_ode(lambda t: np.array([[a]]), lambda t: np.zeros(1), np.ones(1), 1000)[-1, 0]
    err = [abs(euler_maruyama(spec, sample_driving_path(spec, L, RngStream(0)), [1.0])[-1, 0, 0] - ref)
           for L in (100, 200)]
    assert err[0] / err[1] == pytest.approx(2, rel=0.05)


def test_em_scalar_multiplicative_errors_decrease():
    spec = ItoSpec.constant(1, Abar=0.5, bbar=0.2, q_A=0.5, q_b=0.5, alpha=0.0, beta=1.0,
                            activation=curved_activation(1.0))
    table = strong_error_sweep(spec, [64, 256, 1024], 50, [1.0], mode="sde", seed=1, L_ref=2 ** 14)
    assert table.monotone_decreasing()
    assert table.errors[-1] < 0.7 * table.errors[0]


def test_rk4_exact_on_constants():
    c = np.array([0.3, -2.0])
    H = integrate_ode(lambda t: np.zeros((2, 2)), lambda t: c, np.array([1.0, 1.0]), 7)
    assert np.allclose(H[-1], 1.0 + c, atol=1e-15)
    assert H.shape == (8, 2)


def test_rk4_exponential_and_order():
    a = 1.3
    H = integrate_ode(lambda t: np.array([[a]]), lambda t: np.zeros(1), np.ones(1), 1000)
    assert abs(H[-1, 0] - math.exp(a)) < 1e-10
    e10 = abs(integrate_ode(lambda t: np.array([[a]]), lambda t: np.zeros(1), np.ones(1), 10)[-1, 0] - math.exp(a))
    e20 = abs(integrate_ode(lambda t: np.array([[a]]), lambda t: np.zeros(1), np.ones(1), 20)[-1, 0] - math.exp(a))
    assert 14 < e10 / e20 < 18


def test_rk4_time_dependent_coefficients():
    # dH = 2t H dt, H(1) = e
    H = integrate_ode(lambda t: np.array([[2 * t]]), lambda t: np.zeros(1), np.ones(1), 200)
    assert H[-1, 0] == pytest.approx(math.e, rel=1e-9)


def test_ode_sweep_errors_halve():
    spec = ItoSpec.constant(1, Abar=0.8, alpha=0.5, beta=0.5)
    table = strong_error_sweep(spec, [16, 32, 64, 128, 256, 512], 1, [1.0], mode="ode")
    assert table.monotone_decreasing()
    assert -1.25 <= table.rate <= -0.75


def test_sde_mode_without_noise_matches_ode_mode():
    spec = ItoSpec.constant(1, Abar=0.8, alpha=0.5, beta=0.5)
    depths = [16, 64, 256]
    ode = strong_error_sweep(spec, depths, 1, [1.0], mode="ode")
    sde = strong_error_sweep(spec, depths, 1, [1.0], mode="sde")
    assert np.max(np.abs(np.array(ode.errors) - sde.errors)) <= 1e-12


def test_sweep_deterministic_and_validated():
    spec = ItoSpec.constant(1, q_A=0.4, q_b=0.4, activation=curved_activation(0.5))
    a = strong_error_sweep(spec, [8, 16], 6, [0.5], mode="sde", seed=3, L_ref=64, chunk=4)
    b = strong_error_sweep(spec, [8, 16], 6, [0.5], mode="sde", seed=3, L_ref=64, chunk=6)
    assert a.errors == b.errors and a.stderrs == b.stderrs
    assert a.to_csv().startswith("L,error,stderr\n8,")
    with pytest.raises(ValueError):
        strong_error_sweep(spec, [16, 8], 2, [0.5])
    with pytest.raises(ValueError):
        strong_error_sweep(spec, [8, 16], 0, [0.5])
    with pytest.raises(ValueError):
        strong_error_sweep(spec, [8, 12], 2, [0.5], mode="sde", L_ref=64)


def test_curved_activation():
    s = 1.5
    act = curved_activation(s)
    h = 1e-4
    assert act(np.array(0.0)) == 0.0
    assert (act(h) - act(-h)) / (2 * h) == pytest.approx(1.0, abs=1e-8)
    assert (act(h) - 2 * act(0.0) + act(-h)) / h ** 2 == pytest.approx(s, rel=1e-6)
    assert act.second_derivative_at_zero == s


def test_ito_check_without_curvature_agrees():
    spec = ItoSpec.constant(1, q_A=0.3, q_b=1.0, alpha=0.0, beta=1.0)
    check = ito_correction_check(spec, 1024, 2000, [0.5], seed=1)
    assert np.array_equal(check.mean_em, check.mean_em_without_correction)
    assert check.z_corrected() < 3
    assert check.z_uncorrected() < 3


def test_non_finite_state_reported():
    spec = ItoSpec.constant(1, Abar=1e300, alpha=0.0, beta=0.0, activation=curved_activation(1.0))
    path = sample_driving_path(spec, 8, RngStream(0))
    with pytest.raises(FloatingPointError, match="layer"):
        discrete_hidden_states(spec, path, [1.0])
