"""Distributed variable-level EP: per-user channel estimates that serve as pseudo priors.

Each user's channel at each AP is estimated while every other user is
treated as Gaussian interference with its current mean and covariance.
The iteration alternates

* an M-step that updates the channel Gaussian of ``(l, k)`` from AP ``l``'s
  despread pilot, AP ``l``'s data block and the fused symbol statistics;
* an interference refresh;
* an E-step that turns each AP's matched-filter output into a scalar
  Gaussian per symbol and fuses the APs under a ``CN(0, sigma_x2)``
  symbol prior.

All arrays are indexed ``[l, k, ...]`` for channels and ``[k, t]`` for
symbols.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from gfcf.gaussian import GaussianStats, ScalarGaussian, combine_cov_info, hermitize, inv_psd
from gfcf.model import check_model


@dataclass
class PseudoPrior:
    """Per-(AP, user) channel Gaussians and per-(user, symbol) scalar Gaussians."""

    channel_mean: np.ndarray  # (L, K, N)
    channel_cov: np.ndarray  # (L, K, N, N)
    symbol_mean: np.ndarray  # (K, T)
    symbol_var: np.ndarray  # (K, T)

    @property
    def symbol_second_moment(self):
        return self.symbol_var + np.abs(self.symbol_mean) ** 2

    @property
    def n_users(self):
        return self.channel_mean.shape[1]

    def channel(self, l, k):
        return GaussianStats(self.channel_mean[l, k], self.channel_cov[l, k])

    def symbol(self, k, t):
        return ScalarGaussian(self.symbol_mean[k, t], self.symbol_var[k, t])

    @classmethod
    def empty(cls, n_aps, n_antennas, data_length):
        return cls(
            np.zeros((n_aps, 0, n_antennas), dtype=complex),
            np.zeros((n_aps, 0, n_antennas, n_antennas), dtype=complex),
            np.zeros((0, data_length), dtype=complex),
            np.zeros((0, data_length)),
        )


def _outer(m):
    return m[..., :, None] * np.conj(m[..., None, :])


def data_interference_cov(channel_mean, channel_cov, sigma_v2, sigma_x2):
    """Noise-plus-interference covariance of every user's data at every AP.

    For user ``k`` at AP ``l``:
    ``sigma_v2 I + sum_{k' != k} sigma_x2 (C_lk' + m_lk' m_lk'^H)``; the
    outer product uses the interferer's own mean.  Returns ``(L, K, N, N)``.
    """
    N = channel_mean.shape[-1]
    disp = sigma_x2 * (channel_cov + _outer(channel_mean))
    total = disp.sum(axis=1, keepdims=True)
    return hermitize(sigma_v2 * np.eye(N) + (total - disp))


def pilot_interference_stats(channel_mean, channel_cov, user_group, n_groups, pilot_noise_var):
    """Mean and covariance of co-pilot interference in each user's despread pilot.

    For ``k`` in group ``g``: mean ``sum_{k' in g, k' != k} m_lk'`` and
    covariance ``C_noise + sum_{k' in g, k' != k} C_lk'``.
    """
    L, K, N = channel_mean.shape
    onehot = np.zeros((K, n_groups))
    onehot[np.arange(K), user_group] = 1.0
    group_mean = np.einsum("lkn,kg->lgn", channel_mean, onehot)
    group_cov = np.einsum("lkij,kg->lgij", channel_cov, onehot)
    mean = group_mean[:, user_group] - channel_mean
    cov = hermitize(pilot_noise_var * np.eye(N) + group_cov[:, user_group] - channel_cov)
    return mean, cov


def e_step(channel_mean, C_data, Y, sigma_x2):
    """Fused Gaussian symbol posteriors from per-AP matched filters.

    Parameters
    ----------
    channel_mean : (L, K, N)
    C_data : (L, K, N, N)
        Interference-plus-noise covariance of each user's data.
    Y : (L, N, T)

    Returns ``(mean (K, T), var (K, T))``.  An AP where the channel mean
    is zero contributes no precision.
    """
    W = np.linalg.solve(C_data, channel_mean[..., None])[..., 0]  # C^-1 m
    prec = np.real(np.einsum("lkn,lkn->lk", np.conj(channel_mean), W))
    info = np.einsum("lkn,lnt->lkt", np.conj(W), Y)  # m^H C^-1 y_t
    var = 1.0 / (1.0 / sigma_x2 + prec.sum(axis=0))
    mean = var[:, None] * info.sum(axis=0)
    T = Y.shape[-1]
    return mean, np.repeat(var[:, None], T, axis=1)


def per_ap_symbol_messages(channel_mean, C_data, Y):
    """Per-AP scalar likelihood messages ``(mean (L,K,T), var (L,K))`` before fusion."""
    W = np.linalg.solve(C_data, channel_mean[..., None])[..., 0]
    prec = np.real(np.einsum("lkn,lkn->lk", np.conj(channel_mean), W))
    info = np.einsum("lkn,lnt->lkt", np.conj(W), Y)
    with np.errstate(divide="ignore", invalid="ignore"):
        var = np.where(prec > 0, 1.0 / prec, np.inf)
        mean = np.where(prec[..., None] > 0, info / prec[..., None], 0.0)
    return mean, var


def m_step(Y, y_pilot, xi, C_data, pilot_mean, pilot_cov, symbol_mean, symbol_second_moment):
    """Channel Gaussian maximising the expected complete-data log-density.

    Batched over any leading dimensions shared by the channel quantities.

    Parameters
    ----------
    Y : (..., N, T)
        Data block at the AP of each channel.
    y_pilot : (..., N)
        Despread pilot of the channel's group at that AP.
    xi : (..., N, N)
        Channel prior covariance.
    C_data : (..., N, N)
        Data interference-plus-noise covariance.
    pilot_mean, pilot_cov : (..., N), (..., N, N)
        Co-pilot interference statistics.  ``pilot_cov=None`` drops the
        pilot term.
    symbol_mean, symbol_second_moment : (..., T)

    Returns ``(mean, cov)`` with
    ``cov = (C_p^-1 + C_d^-1 sum_t r_t + xi^-1)^-1`` and
    ``mean = cov [sum_t conj(m_t) C_d^-1 y_t + C_p^-1 (y_p - m_p)]``.
    """
    Cd_inv = inv_psd(C_data)
    r_sum = np.sum(symbol_second_moment, axis=-1)
    prec = r_sum[..., None, None] * Cd_inv
    ym = np.einsum("...nt,...t->...n", Y, np.conj(symbol_mean))
    info = np.einsum("...ij,...j->...i", Cd_inv, ym)
    if pilot_cov is not None:
        Cp_inv = inv_psd(pilot_cov)
        prec = prec + Cp_inv
        info = info + np.einsum("...ij,...j->...i", Cp_inv, y_pilot - pilot_mean)
    zero = np.zeros(xi.shape[:-1], dtype=complex)
    return combine_cov_info(zero, xi, hermitize(prec), info)


@dataclass
class VLEPState:
    channel_mean: np.ndarray
    channel_cov: np.ndarray
    symbol_mean: np.ndarray
    symbol_var: np.ndarray
    C_data: np.ndarray
    pilot_mean: np.ndarray
    pilot_cov: np.ndarray

    def copy(self):
        return VLEPState(*(np.array(getattr(self, f)) for f in self.__dataclass_fields__))


def _refresh(model, channel_mean, channel_cov):
    C_data = data_interference_cov(channel_mean, channel_cov, model.sigma_v2, model.sigma_x2)
    p_mean, p_cov = pilot_interference_stats(
        channel_mean, channel_cov, model.user_group, model.n_groups, model.pilot_noise_var
    )
    return C_data, p_mean, p_cov


def initial_state(model, symbol_var=None):
    """Channels at their prior ``(0, xi)``, symbols at ``(0, symbol_var)``.

    ``symbol_var`` defaults to ``sigma_x2`` (unit variance in symbol-power
    units).
    """
    L, K, N, T = model.n_aps, model.n_users, model.n_antennas, model.data_length
    mean = np.zeros((L, K, N), dtype=complex)
    cov = np.array(model.xi, dtype=complex)
    var = model.sigma_x2 if symbol_var is None else symbol_var
    C_data, p_mean, p_cov = _refresh(model, mean, cov)
    return VLEPState(
        mean, cov, np.zeros((K, T), dtype=complex), np.full((K, T), float(var)),
        C_data, p_mean, p_cov,
    )


def vlep_iteration(model, state, damping=1.0):
    """One M-step, interference refresh and E-step; returns the new state.

    ``damping`` is the weight of the new channel mean (1 = undamped).
    """
    Yk = np.broadcast_to(model.Y[:, None], (model.n_aps, model.n_users) + model.Y.shape[1:])
    yp = model.y_pilot[:, model.user_group]
    r = state.symbol_var + np.abs(state.symbol_mean) ** 2
    mean, cov = m_step(
        Yk, yp, model.xi, state.C_data, state.pilot_mean, state.pilot_cov,
        np.broadcast_to(state.symbol_mean, (model.n_aps,) + state.symbol_mean.shape),
        np.broadcast_to(r, (model.n_aps,) + r.shape),
    )
    if damping != 1.0:
        mean = damping * mean + (1.0 - damping) * state.channel_mean
    C_data, p_mean, p_cov = _refresh(model, mean, cov)
    s_mean, s_var = e_step(mean, C_data, model.Y, model.sigma_x2)
    return VLEPState(mean, cov, s_mean, s_var, C_data, p_mean, p_cov)


def relative_change(new, old, scale):
    num = np.linalg.norm(new - old, axis=-1)
    den = np.linalg.norm(new, axis=-1) + scale
    return float(np.max(num / den, initial=0.0))


def _mean_scale(model):
    return 1e-9 * np.sqrt(np.real(np.trace(model.xi, axis1=-2, axis2=-1)))


def run_vlep(model, max_iter=50, tol=1e-4, damping=1.0, symbol_var=None):
    """Iterate VL-EP to convergence; returns ``(PseudoPrior, info)``."""
    if model.n_users == 0:
        empty = PseudoPrior.empty(model.n_aps, model.n_antennas, model.data_length)
        return empty, {"n_iter": 0, "converged": True, "deltas": []}
    state = initial_state(model, symbol_var)
    scale = _mean_scale(model)
    deltas = []
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        new = vlep_iteration(model, state, damping)
        deltas.append(relative_change(new.channel_mean, state.channel_mean, scale))
        state = new
        if deltas[-1] < tol:
            converged = True
            break
    prior = PseudoPrior(state.channel_mean, state.channel_cov, state.symbol_mean, state.symbol_var)
    return prior, {"n_iter": n_iter, "converged": converged, "deltas": deltas, "state": state}


def hard_decisions(symbol_mean, constellation):
    """Nearest constellation point to each soft symbol estimate."""
    d = np.abs(np.asarray(symbol_mean)[..., None] - constellation) ** 2
    return constellation[np.argmin(d, axis=-1)]


class VLEPEstimator(BaseEstimator):
    """Distributed VL-EP channel/symbol estimator producing a pseudo prior.

    Parameters
    ----------
    max_iter : int
    tol : float
        Stop when the largest relative change of any channel mean drops
        below ``tol``.
    damping : float
        Weight of the new channel mean in each update; 1 disables damping.

    Attributes
    ----------
    pseudo_prior_ : PseudoPrior
    channel_mean_ : ndarray (L, K, N)
    symbols_ : ndarray (K, T)
        Hard symbol decisions from the fused Gaussian posteriors.
    n_iter_, converged_
    """

    def __init__(self, max_iter=50, tol=1e-4, damping=1.0):
        self.max_iter = max_iter
        self.tol = tol
        self.damping = damping

    def fit(self, model):
        check_model(model)
        prior, info = run_vlep(model, self.max_iter, self.tol, self.damping)
        self.pseudo_prior_ = prior
        self.channel_mean_ = prior.channel_mean
        self.symbols_ = hard_decisions(prior.symbol_mean, model.constellation)
        self.n_iter_ = info["n_iter"]
        self.converged_ = info["converged"]
        self.deltas_ = info["deltas"]
        return self

    def predict(self, model=None):
        """Hard symbol decisions; refits when a model is given."""
        if model is not None:
            self.fit(model)
        check_is_fitted(self, "symbols_")
        return self.symbols_
