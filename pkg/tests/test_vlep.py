import numpy as np
import pytest
from sklearn.exceptions import NotFittedError

from gfcf.model import prune, receiver_model
from gfcf.scenario import ScenarioConfig, generate_realization
from gfcf.vlep import (
    PseudoPrior,
    VLEPEstimator,
    data_interference_cov,
    e_step,
    hard_decisions,
    initial_state,
    m_step,
    per_ap_symbol_messages,
    pilot_interference_stats,
    run_vlep,
    vlep_iteration,
)
from helpers import make_model
from oracles import crandn, joint_gaussian_posterior, random_psd


def scalar(x):
    return np.array(x, dtype=complex).reshape(1, -1, 1)


# --- interference statistics -------------------------------------------------


def test_data_interference_single_user_is_noise():
    C = data_interference_cov(np.ones((1, 1, 2)), np.eye(2)[None, None], 0.3, 1.0)
    np.testing.assert_allclose(C[0, 0], 0.3 * np.eye(2))


def test_data_interference_scalar_example():
    mean = scalar([5.0, 1.0])
    cov = np.ones((1, 2, 1, 1), dtype=complex)
    C = data_interference_cov(mean, cov, 1.0, 1.0)
    assert C[0, 0, 0, 0].real == pytest.approx(3.0)  # interferer is user 1: 1 + (1 + 1)
    assert C[0, 1, 0, 0].real == pytest.approx(27.0)  # interferer is user 0: 1 + (1 + 25)


def test_data_interference_is_hermitian_psd():
    rng = np.random.default_rng(0)
    L, K, N = 2, 4, 3
    mean = crandn(rng, L, K, N)
    cov = np.stack([[random_psd(rng, N) for _ in range(K)] for _ in range(L)])
    C = data_interference_cov(mean, cov, 0.1, 2.0)
    np.testing.assert_allclose(C, np.conj(np.swapaxes(C, -1, -2)), atol=1e-12)
    assert np.linalg.eigvalsh(C).min() > 0


def test_pilot_interference_examples():
    # singleton group
    m, C = pilot_interference_stats(scalar([1.0]), np.ones((1, 1, 1, 1), complex), np.array([0]), 1, 0.5)
    assert m[0, 0, 0] == 0 and C[0, 0, 0, 0].real == pytest.approx(0.5)
    # one co-pilot user (0.5, 0.2)
    mean = scalar([7.0, 0.5])
    cov = np.array([3.0, 0.2], dtype=complex).reshape(1, 2, 1, 1)
    m, C = pilot_interference_stats(mean, cov, np.array([0, 0]), 1, 0.5)
    assert m[0, 0, 0] == pytest.approx(0.5)
    assert C[0, 0, 0, 0].real == pytest.approx(0.7)


def test_pilot_interference_ignores_other_groups_and_zero_power_users():
    mean = scalar([1.0, 2.0, 0.0])
    cov = np.array([1.0, 4.0, 0.0], dtype=complex).reshape(1, 3, 1, 1)
    m, C = pilot_interference_stats(mean, cov, np.array([0, 1, 0]), 2, 0.5)
    assert m[0, 0, 0] == 0 and C[0, 0, 0, 0].real == pytest.approx(0.5)
    assert m[0, 1, 0] == 0 and C[0, 1, 0, 0].real == pytest.approx(0.5)


# --- E-step -----------------------------------------------------------------


def test_e_step_scalar_example():
    mean, var = e_step(scalar([1.0]), np.ones((1, 1, 1, 1), complex), np.full((1, 1, 1), 2.0 + 0j), 1.0)
    assert var[0, 0] == pytest.approx(0.5)
    assert mean[0, 0] == pytest.approx(1.0)
    m_ap, v_ap = per_ap_symbol_messages(scalar([1.0]), np.ones((1, 1, 1, 1), complex),
                                        np.full((1, 1, 1), 2.0 + 0j))
    assert m_ap[0, 0, 0] == pytest.approx(2.0) and v_ap[0, 0] == pytest.approx(1.0)


def test_e_step_zero_channel_returns_prior():
    mean, var = e_step(np.zeros((2, 1, 2), complex), np.tile(np.eye(2), (2, 1, 1, 1)),
                       np.ones((2, 2, 3), complex), 0.7)
    np.testing.assert_array_equal(mean, 0)
    np.testing.assert_allclose(var, 0.7)
    _, v_ap = per_ap_symbol_messages(np.zeros((2, 1, 2), complex), np.tile(np.eye(2), (2, 1, 1, 1)),
                                     np.ones((2, 2, 3), complex))
    assert np.all(np.isinf(v_ap))


def test_e_step_identical_aps_add_precision():
    rng = np.random.default_rng(1)
    h = crandn(rng, 1, 1, 2)
    C = random_psd(rng, 2)[None, None]
    Y = crandn(rng, 1, 2, 4)
    prec1 = 1 / per_ap_symbol_messages(h, C, Y)[1][0, 0]
    _, var2 = e_step(np.concatenate([h, h]), np.concatenate([C, C]), np.concatenate([Y, Y]), 1e12)
    assert 1 / var2[0, 0] == pytest.approx(2 * prec1 + 1e-12, rel=1e-9)


# --- M-step -----------------------------------------------------------------


def test_m_step_scalar_example():
    one = np.ones((1, 1), complex)
    mean, cov = m_step(np.full((1, 1), 2.0 + 0j), np.ones(1, complex), one, one,
                       np.zeros(1, complex), one, np.ones(1, complex), np.array([1.5]))
    assert cov[0, 0].real == pytest.approx(1 / 3.5)
    assert mean[0].real == pytest.approx(3 / 3.5)


def test_m_step_without_information_returns_prior_mean():
    rng = np.random.default_rng(2)
    mean, cov = m_step(crandn(rng, 2, 5), crandn(rng, 2), np.eye(2), np.eye(2),
                       np.zeros(2), None, np.zeros(5), np.ones(5))
    np.testing.assert_allclose(mean, 0)


def test_m_step_vanishing_prior():
    mean, cov = m_step(np.ones((2, 3), complex), np.ones(2, complex), 1e-16 * np.eye(2), np.eye(2),
                       np.zeros(2), np.eye(2), np.ones(3), np.ones(3))
    assert np.abs(mean).max() < 1e-14 and np.abs(cov).max() < 1e-14


def test_m_step_known_symbols_matches_joint_gaussian_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        N, T = 3, 5
        xi, Cp = random_psd(rng, N), random_psd(rng, N)
        sigma_v2 = 0.4
        h = crandn(rng, N)
        x = crandn(rng, T)
        yp = h + crandn(rng, N)
        Y = np.outer(h, x) + crandn(rng, N, T)
        mean, cov = m_step(Y, yp, xi, sigma_v2 * np.eye(N), np.zeros(N), Cp, x, np.abs(x) ** 2)
        # stacked observation [yp; y_1; ...; y_T] = [I; x_1 I; ...] h + noise
        A = np.vstack([np.eye(N)] + [xt * np.eye(N) for xt in x])
        noise = np.zeros(((T + 1) * N,) * 2, dtype=complex)
        noise[:N, :N] = Cp
        noise[N:, N:] = sigma_v2 * np.eye(T * N)
        om, oC = joint_gaussian_posterior(np.concatenate([yp, Y.T.ravel()]), A, noise, np.zeros(N), xi)
        np.testing.assert_allclose(mean, om, rtol=1e-8, atol=1e-8 * np.linalg.norm(om))
        np.testing.assert_allclose(cov, oC, rtol=1e-8, atol=1e-8 * np.linalg.norm(oC))


def test_m_step_is_ap_local():
    r = generate_realization(ScenarioConfig(), 4)
    model = prune(r.u_true, r)
    state = vlep_iteration(model, initial_state(model))
    rsm = state.symbol_var + np.abs(state.symbol_mean) ** 2
    yp = model.y_pilot[:, model.user_group]
    for l in (0, 7):
        full_m, full_C = m_step(
            np.broadcast_to(model.Y[:, None], (model.n_aps, model.n_users) + model.Y.shape[1:]),
            yp, model.xi, state.C_data, state.pilot_mean, state.pilot_cov,
            np.broadcast_to(state.symbol_mean, (model.n_aps,) + state.symbol_mean.shape),
            np.broadcast_to(rsm, (model.n_aps,) + rsm.shape))
        loc_m, loc_C = m_step(
            np.broadcast_to(model.Y[l][None], (model.n_users,) + model.Y.shape[1:]),
            yp[l], model.xi[l], state.C_data[l], state.pilot_mean[l], state.pilot_cov[l],
            state.symbol_mean, rsm)
        np.testing.assert_array_equal(loc_m, full_m[l])
        np.testing.assert_array_equal(loc_C, full_C[l])


# --- full iteration ------------------------------------------------------------


def test_run_vlep_empty_model():
    r = generate_realization(ScenarioConfig.small(), 0)
    prior, info = run_vlep(prune([0, 0, 0, 0], r))
    assert prior.n_users == 0 and info["converged"]
    assert prior.channel_cov.shape == (2, 0, 2, 2)


def test_run_vlep_single_user_noiseless_recovers_channel():
    cfg = ScenarioConfig.small(sigma_v2_dbm=-200)
    for s in range(50):
        r = generate_realization(cfg, s, u_true=[1, 0, 0, 0])
        prior, _ = run_vlep(prune(r.u_true, r), max_iter=200)
        h = r.H_true[:, :, 0]
        err = np.linalg.norm(prior.channel_mean[:, 0] - h) / np.linalg.norm(h)
        assert err < 1e-3


def test_run_vlep_fixed_point():
    cfg = ScenarioConfig.small()
    for s in range(10):
        r = generate_realization(cfg, s)
        model = prune(r.u_true, r)
        if model.n_users == 0:
            continue
        _, info = run_vlep(model, max_iter=2000, tol=1e-6)
        assert info["converged"]
        state = info["state"]
        again = vlep_iteration(model, state)
        delta = np.linalg.norm(again.channel_mean - state.channel_mean, axis=-1)
        assert np.max(delta / (np.linalg.norm(state.channel_mean, axis=-1) + 1e-30)) < 1e-4


def test_pseudo_prior_invariants():
    r = generate_realization(ScenarioConfig(), 1)
    prior, _ = run_vlep(prune(r.u_true, r))
    assert np.all(prior.symbol_var >= 0)
    assert np.all(prior.symbol_second_moment >= np.abs(prior.symbol_mean) ** 2)
    C = prior.channel_cov
    np.testing.assert_allclose(C, np.conj(np.swapaxes(C, -1, -2)), atol=1e-20)
    w = np.linalg.eigvalsh(C)
    assert np.all(w >= -1e-12 * np.abs(w).max(axis=-1, keepdims=True))
    k = 0
    assert isinstance(prior.channel(0, k).mean, np.ndarray)
    assert prior.symbol(k, 0).var == prior.symbol_var[k, 0]


def test_damping_keeps_fixed_point():
    r = generate_realization(ScenarioConfig.small(), 2)
    model = prune(r.u_true, r)
    a, _ = run_vlep(model, max_iter=3000, tol=1e-9)
    b, _ = run_vlep(model, max_iter=3000, tol=1e-9, damping=0.5)
    np.testing.assert_allclose(b.channel_mean, a.channel_mean, rtol=1e-5,
                               atol=1e-5 * np.abs(a.channel_mean).max())


def test_hard_decisions():
    c = np.array([1, -1, 1j, -1j])
    np.testing.assert_array_equal(hard_decisions([0.9 + 0.2j, -0.1 - 2j], c), [1, -1j])


def test_estimator_api():
    r = generate_realization(ScenarioConfig.small(), 3)
    model = receiver_model(r)
    est = VLEPEstimator(max_iter=20)
    assert est.get_params() == {"max_iter": 20, "tol": 1e-4, "damping": 1.0}
    with pytest.raises(NotFittedError):
        est.predict()
    sym = est.predict(model)
    assert sym.shape == (4, 8) and np.all(np.isin(sym, model.constellation))
    assert isinstance(est.pseudo_prior_, PseudoPrior) and est.n_iter_ <= 20
