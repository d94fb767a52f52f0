"""Component-wise iterative maximum-likelihood user activity detection.

The likelihood of an activity hypothesis ``u`` splits into a pilot term
and a data term.  The pilot term is exact: despread observations of
different pilot groups are independent Gaussians with covariance
``C_noise + sum(Xi_k for active k in group)``.  The data term treats the
superposition of active users as Gaussian (central limit argument)
with a per-AP covariance

    B_l = sigma_v2 I + sum_k sigma_x2 (C_lk + m_lk m_lk^H),

where ``(m_lk, C_lk)`` is user ``k``'s pilot-based channel posterior at AP
``l``.  Cross-AP correlations are dropped, so every term is local to an
AP.  The ``-d ln(pi)`` constants are dropped throughout; they do not
affect the argmax.

`iterative_ml` maximises the total by cyclic single-coordinate updates.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from gfcf.gaussian import (
    GaussianStats,
    cholesky,
    gaussian_product,
    hermitize,
    log_gaussian_pdf,
    logdet_and_inv,
    posterior_cov_form,
)
from gfcf.model import check_model


def pilot_posterior(model, l, g, u_hat):
    """Pilot-based channel posteriors of the active users of group ``g`` at AP ``l``.

    Returns ``(C_y, posteriors)`` where ``C_y`` is the covariance of the
    despread observation under ``u_hat`` and ``posteriors`` maps each active
    member ``k`` to its `GaussianStats`.
    """
    N = model.n_antennas
    u = np.asarray(u_hat).astype(bool)
    active = [k for k in model.group_members(g) if u[k]]
    C_noise = model.pilot_noise_var * np.eye(N)
    C_y = C_noise + sum((model.xi[l, k] for k in active), np.zeros((N, N)))
    y = model.y_pilot[l, g]
    posteriors = {}
    for k in active:
        C_obs = hermitize(C_y - model.xi[l, k])
        prior = GaussianStats(np.zeros(N), model.xi[l, k])
        posteriors[k], _ = gaussian_product(y, np.eye(N), C_obs, prior)
    return C_y, posteriors


def data_dispersion(mean, cov, sigma_x2):
    """Second moment ``sigma_x2 (C + m m^H)`` of ``x h`` for zero-mean symbol ``x``."""
    mean = np.asarray(mean)
    return sigma_x2 * (cov + mean[..., :, None] * np.conj(mean[..., None, :]))


def log_likelihood_pilot(model, u_hat):
    N = model.n_antennas
    total = 0.0
    for l in range(model.n_aps):
        for g in range(model.n_groups):
            C_y, _ = pilot_posterior(model, l, g, u_hat)
            total += log_gaussian_pdf(model.y_pilot[l, g], np.zeros(N), C_y) + N * np.log(np.pi)
    return total


def _data_covariances(model, u_hat):
    N = model.n_antennas
    B = np.repeat((model.sigma_v2 * np.eye(N))[None].astype(complex), model.n_aps, axis=0)
    for l in range(model.n_aps):
        for g in range(model.n_groups):
            _, post = pilot_posterior(model, l, g, u_hat)
            for stats in post.values():
                B[l] += data_dispersion(stats.mean, stats.cov, model.sigma_x2)
    return B


def log_likelihood_data(model, u_hat):
    """Block-diagonal CLT data log-likelihood; one factorization per AP."""
    B = _data_covariances(model, u_hat)
    T = model.data_length
    total = 0.0
    for l in range(model.n_aps):
        Lc = cholesky(B[l])
        W = np.linalg.solve(Lc, model.Y[l])
        logdet = 2.0 * np.sum(np.log(np.real(np.diag(Lc))))
        total += -T * logdet - np.real(np.vdot(W, W))
    return total


def total_log_likelihood(model, u_hat):
    """``L_p + L_d`` evaluated from scratch."""
    return log_likelihood_pilot(model, u_hat) + log_likelihood_data(model, u_hat)


class LikelihoodCache:
    """Incremental evaluator of the total log-likelihood.

    Flipping user ``k`` only changes the pilot term and the channel
    posteriors of ``k``'s pilot group, so a proposal recomputes that group
    (for all APs at once) and the per-AP data terms.
    """

    def __init__(self, model, u_hat=None):
        self.model = model
        L, K, N = model.n_aps, model.n_users, model.n_antennas
        self._eye = np.eye(N)
        self._C_noise = model.pilot_noise_var * self._eye
        self._scatter = model.Y @ np.conj(np.swapaxes(model.Y, -1, -2))
        self._members = [model.group_members(g) for g in range(model.n_groups)]
        self.u = np.zeros(K, dtype=bool) if u_hat is None else np.asarray(u_hat).astype(bool).copy()
        self.pilot_terms = np.zeros((L, model.n_groups))
        self.disp = np.zeros((L, K, N, N), dtype=complex)
        for g in range(model.n_groups):
            terms, disp = self._group(self.u, g)
            self.pilot_terms[:, g] = terms
            self.disp[:, self._members[g]] = disp
        self.data_terms = self._data(self.disp)

    def _group(self, u, g):
        m = self.model
        members = self._members[g]
        act = members[u[members]]
        C_y = self._C_noise + m.xi[:, act].sum(axis=1) if act.size else np.broadcast_to(
            self._C_noise, (m.n_aps,) + self._C_noise.shape
        ).astype(complex)
        logdet, C_inv = logdet_and_inv(C_y)
        y = m.y_pilot[:, g]
        quad = np.real(np.einsum("li,lij,lj->l", np.conj(y), C_inv, y))
        disp = np.zeros((m.n_aps, members.size) + self._eye.shape, dtype=complex)
        if act.size:
            xi = m.xi[:, act]
            obs_cov = hermitize(C_y[:, None] - xi)
            obs_mean = np.broadcast_to(y[:, None], xi.shape[:-1])
            mean, cov = posterior_cov_form(obs_mean, obs_cov, np.zeros_like(obs_mean), xi)
            disp[:, u[members]] = data_dispersion(mean, cov, m.sigma_x2)
        return -logdet - quad, disp

    def _data(self, disp):
        m = self.model
        B = m.sigma_v2 * self._eye + disp.sum(axis=1)
        logdet, B_inv = logdet_and_inv(hermitize(B))
        quad = np.real(np.einsum("lij,lji->l", B_inv, self._scatter))
        return -m.data_length * logdet - quad

    @property
    def value(self):
        return float(self.pilot_terms.sum() + self.data_terms.sum())

    def propose(self, k, value):
        """Total log-likelihood with ``u[k] = value``; returns ``(total, proposal)``."""
        g = self.model.user_group[k]
        u = self.u.copy()
        u[k] = bool(value)
        terms, disp_g = self._group(u, g)
        disp = self.disp.copy()
        disp[:, self._members[g]] = disp_g
        data_terms = self._data(disp)
        pilot_terms = self.pilot_terms.copy()
        pilot_terms[:, g] = terms
        total = float(pilot_terms.sum() + data_terms.sum())
        return total, (u, pilot_terms, disp, data_terms)

    def commit(self, proposal):
        self.u, self.pilot_terms, self.disp, self.data_terms = proposal


def iterative_ml(model, max_passes=20, u_init=None):
    """Cyclic coordinate ascent over the binary activity vector.

    Starts from all-inactive (or ``u_init``) and visits users in index order,
    setting each to whichever value gives the larger total log-likelihood;
    ties keep the current value.  Stops after a pass with no change or
    after ``max_passes`` passes.

    Returns ``(u_hat, info)`` with ``info`` holding the final objective,
    the number of passes, a convergence flag and the accepted-update trace.
    """
    cache = LikelihoodCache(model, u_init)
    current = cache.value
    trace = [current]
    n_passes = 0
    converged = False
    for n_passes in range(1, max_passes + 1):
        changed = False
        for k in range(model.n_users):
            flipped, proposal = cache.propose(k, not cache.u[k])
            if flipped > current:
                cache.commit(proposal)
                current = flipped
                trace.append(current)
                changed = True
        if not changed:
            converged = True
            break
    info = {
        "log_likelihood": current,
        "n_passes": n_passes,
        "converged": converged,
        "trace": trace,
    }
    return cache.u.astype(int), info


class IterativeMLDetector(BaseEstimator):
    """Grant-free activity detector by cyclic coordinate-wise ML.

    Parameters
    ----------
    max_passes : int
        Cap on full passes over the users.

    Attributes
    ----------
    u_hat_ : ndarray of int, shape (n_users,)
        Detected activity (1 = active).
    log_likelihood_ : float
        Objective at ``u_hat_``.
    n_passes_ : int
    converged_ : bool
    """

    def __init__(self, max_passes=20):
        self.max_passes = max_passes

    def fit(self, model):
        check_model(model)
        u, info = iterative_ml(model, self.max_passes)
        self.u_hat_ = u
        self.log_likelihood_ = info["log_likelihood"]
        self.n_passes_ = info["n_passes"]
        self.converged_ = info["converged"]
        self.trace_ = info["trace"]
        return self

    def fit_predict(self, model):
        return self.fit(model).u_hat_

    def score(self, model, u_hat=None):
        """Total log-likelihood of ``u_hat`` (default: the fitted one) on ``model``."""
        if u_hat is None:
            check_is_fitted(self, "u_hat_")
            u_hat = self.u_hat_
        return total_log_likelihood(model, u_hat)
