"""Per-trial error metrics and empirical CDFs.

Conventions for users on which detection and truth disagree:

* CNMSE runs over the truly active users; a missed user contributes a zero
  estimate, a falsely detected user is ignored.
* SER runs over the data symbols of truly active users; every symbol of a
  missed user counts as wrong.
"""

import math
from dataclasses import dataclass

import numpy as np

from gfcf.exceptions import ContractViolation


def _scatter(values, index_map, n_users, fill):
    """Place per-column values of detected users into a global user axis."""
    out = np.full((n_users,) + values.shape[1:], fill, dtype=values.dtype)
    out[np.asarray(index_map, dtype=int)] = values
    return out


def compute_cnmse(estimates, H_true, u_true, index_map):
    """Channel normalised MSE over truly active users.

    ``estimates`` is ``(L, K, N)`` for the detected users listed in
    ``index_map``; ``H_true`` is ``(L, N, K_total)``.  Returns NaN when no
    user is active.
    """
    active = np.flatnonzero(np.asarray(u_true))
    if active.size == 0:
        return math.nan
    L, N, n_users = H_true.shape
    est = np.zeros((L, n_users, N), dtype=complex)
    if len(index_map):
        est[:, np.asarray(index_map, dtype=int)] = estimates
    truth = np.transpose(H_true, (0, 2, 1))[:, active]
    err = est[:, active] - truth
    return float(np.sum(np.abs(err) ** 2) / np.sum(np.abs(truth) ** 2))


def compute_der(u_hat, u_true):
    """Fraction of users whose detected activity is wrong."""
    u_hat, u_true = np.asarray(u_hat).astype(bool), np.asarray(u_true).astype(bool)
    if u_hat.shape != u_true.shape:
        raise ContractViolation("activity vectors differ in length")
    return float(np.mean(u_hat != u_true)) if u_true.size else 0.0


def compute_ser(decisions, X_true, u_true, index_map):
    """Symbol error rate over the data symbols of truly active users.

    ``decisions`` is ``(K, T)`` for the detected users in ``index_map``.
    Returns 0 when there is nothing to count.
    """
    active = np.flatnonzero(np.asarray(u_true))
    n_users, T = X_true.shape
    if active.size == 0 or T == 0:
        return 0.0
    dec = _scatter(np.asarray(decisions, dtype=complex).reshape(-1, T), index_map, n_users, np.nan)
    wrong = ~(dec[active] == X_true[active])
    return float(np.mean(wrong))


@dataclass
class TrialMetrics:
    algo: str
    cnmse: float
    der: float
    ser: float
    wall_time: float
    status: str = "ok"


class ECDF:
    """Right-continuous empirical CDF: ``F(v) = #{x_i <= v} / n``."""

    def __init__(self, values):
        x = np.sort(np.asarray(values, dtype=float).ravel())
        if x.size == 0:
            raise ContractViolation("ecdf needs at least one value")
        if np.any(np.isnan(x)):
            raise ContractViolation("ecdf values must not be NaN")
        self.x = x
        self.F = np.arange(1, x.size + 1) / x.size

    def __call__(self, v):
        return np.searchsorted(self.x, v, side="right") / self.x.size

    def quantile(self, q):
        """Smallest sample ``x`` with ``F(x) >= q``."""
        q = np.asarray(q, dtype=float)
        idx = np.ceil(q * self.x.size - 1e-12).astype(int) - 1
        return self.x[np.clip(idx, 0, self.x.size - 1)]


def ecdf(values):
    return ECDF(values)
