"""Pilot-only MMSE channel estimation followed by maximum-ratio combining.

This is the reference the semi-blind receiver has to beat: every user's
channel comes from its despread pilot alone, so co-pilot users
contaminate each other's estimates.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from gfcf.gaussian import hermitize, posterior_cov_form
from gfcf.model import check_model, prune
from gfcf.vlep import hard_decisions


def pilot_mmse(model):
    """Pilot-only MMSE posteriors of every user in ``model``, assumed active.

    Returns ``(mean (L, K, N), cov (L, K, N, N))``.
    """
    L, K, N = model.n_aps, model.n_users, model.n_antennas
    if K == 0:
        return np.zeros((L, 0, N), dtype=complex), np.zeros((L, 0, N, N), dtype=complex)
    g = model.user_group
    same = (g[:, None] == g[None, :]).astype(float) - np.eye(K)
    obs_cov = hermitize(model.pilot_noise_var * np.eye(N) + np.einsum("kj,ljab->lkab", same, model.xi))
    obs_mean = model.y_pilot[:, g]
    return posterior_cov_form(obs_mean, obs_cov, np.zeros_like(obs_mean), model.xi)


def mrc_equalize(channel_mean, Y):
    """Soft symbol estimates ``sum_l h_lk^H y_lt / sum_l |h_lk|^2``, shape ``(K, T)``."""
    num = np.einsum("lkn,lnt->kt", np.conj(channel_mean), Y)
    den = np.sum(np.abs(channel_mean) ** 2, axis=(0, 2))
    den = np.where(den > 0, den, 1.0)
    return num / den[:, None]


def pilot_mmse_baseline(realization, u):
    """Pilot MMSE channels and MRC decisions for the users flagged in ``u``.

    Returns ``(model, channel_mean (L, K, N), symbols (K, T))`` where
    ``model`` is the pruned view whose ``index_map`` maps columns to users.
    """
    model = prune(u, realization)
    mean, _ = pilot_mmse(model)
    symbols = hard_decisions(mrc_equalize(mean, model.Y), model.constellation)
    return model, mean, symbols


class PilotMMSEEstimator(BaseEstimator):
    """Pilot-only MMSE + MRC baseline on a pruned receiver model.

    Attributes
    ----------
    channel_mean_ : ndarray (L, K, N)
    channel_cov_ : ndarray (L, K, N, N)
    symbols_ : ndarray (K, T)
    """

    def fit(self, model):
        check_model(model)
        self.channel_mean_, self.channel_cov_ = pilot_mmse(model)
        self.symbols_ = hard_decisions(mrc_equalize(self.channel_mean_, model.Y), model.constellation)
        return self

    def predict(self, model=None):
        if model is not None:
            self.fit(model)
        check_is_fitted(self, "symbols_")
        return self.symbols_
