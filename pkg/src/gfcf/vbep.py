"""Pseudo-prior regularised bilinear VB-EP for joint channel estimation and detection.

With ``z_lk = vec(h_lk x_k^T)`` the data at AP ``l`` is ``y_l = sum_k z_lk + v``.
The factor graph has, per AP, a likelihood factor over all ``z_lk``, a
pilot factor over the channels of each pilot group (carrying the
enhanced channel priors), a Dirac factor tying ``z_lk`` to ``h_lk`` and
``x_k``, and a symbol prior factor per user.

Message representations (leading axes ``l, k`` and ``t`` where present):

* ``fz`` factor(likelihood) -> z and ``dz`` factor(Dirac) -> z: block-diagonal
  over time, covariance form ``(mean (L,K,T,N), cov (L,K,T,N,N))``;
* ``fh`` factor(pilot) -> h: covariance form;
* ``dh`` factor(Dirac) -> h: information form ``(prec (L,K,N,N), info (L,K,N))``,
  the density being ``exp(-h^H prec h + 2 Re(h^H info))``; zero precision
  is the vacuous message;
* ``dx`` factor(Dirac) -> x_kt: scalar information form ``(prec, info)``.

Variable-to-factor messages are products of the other incoming
factor-to-variable messages, so ``z -> likelihood`` is ``dz``,
``z -> Dirac`` is ``fz``, ``h -> Dirac`` is ``fh`` and ``h -> pilot`` is
``dh``.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from gfcf.gaussian import (
    RATIO_FLOOR,
    ScalarGaussian,
    combine_cov_info,
    hermitize,
    inv_psd,
    posterior_cov_form,
    ratio_blocks,
)
from gfcf.model import check_model

log = logging.getLogger(__name__)

SYMBOL_VAR_FLOOR = 1e-12


def _outer(m):
    return m[..., :, None] * np.conj(m[..., None, :])


def _exclusive(n):
    return 1.0 - np.eye(n)


@dataclass
class EnhancedPriors:
    """Channel prior = pseudo prior x true prior; symbol pseudo prior kept apart.

    The discrete constellation prior is combined with the symbol pseudo
    prior only when symbol beliefs are formed.
    """

    channel_mean: np.ndarray  # (L, K, N)
    channel_cov: np.ndarray  # (L, K, N, N)
    symbol_mean: np.ndarray  # (K, T)
    symbol_var: np.ndarray  # (K, T)
    constellation: np.ndarray  # (S,)


def build_enhanced_priors(pseudo, model):
    """Multiply each channel pseudo prior into the true prior ``CN(0, xi)``.

    Pseudo priors with an infinite covariance are flat and leave the true
    prior unchanged.
    """
    vac = np.any(np.isinf(np.real(np.diagonal(pseudo.channel_cov, axis1=-2, axis2=-1))), axis=-1)
    obs_cov = np.where(vac[..., None, None], 0.0, pseudo.channel_cov)
    obs_mean = np.where(vac[..., None], 0.0, pseudo.channel_mean)
    zero = np.zeros_like(obs_mean)
    mean, cov = posterior_cov_form(obs_mean, obs_cov, zero, model.xi)
    mean = np.where(vac[..., None], 0.0, mean)
    cov = np.where(vac[..., None, None], model.xi, cov)
    return EnhancedPriors(mean, cov, pseudo.symbol_mean, pseudo.symbol_var, model.constellation)


@dataclass
class MessageState:
    fz_mean: np.ndarray
    fz_cov: np.ndarray
    dz_mean: np.ndarray
    dz_cov: np.ndarray
    fh_mean: np.ndarray
    fh_cov: np.ndarray
    dh_prec: np.ndarray
    dh_info: np.ndarray
    dx_prec: np.ndarray
    dx_info: np.ndarray
    bh_mean: np.ndarray
    bh_cov: np.ndarray
    bx_prob: np.ndarray  # (L, K, T, S)
    bx_mean: np.ndarray
    bx_second: np.ndarray
    n_floored: int = 0
    floored: np.ndarray = field(default=None)

    @property
    def bx_var(self):
        return np.maximum(self.bx_second - np.abs(self.bx_mean) ** 2, 0.0)


def initial_messages(model, pseudo):
    """Dirac-to-z messages from pseudo-prior moments; every other message vacuous.

    The z message of ``(l, k)`` at time ``t`` has mean ``m_x[k,t] m_h[l,k]``
    and covariance ``r_x[k,t] C_h[l,k] + tau_x[k,t] m_h m_h^H``.  Flat
    (infinite-variance) pseudo priors are replaced by ``CN(0, xi)`` and
    ``CN(0, sigma_x2)``.
    """
    L, K, N, T = model.n_aps, model.n_users, model.n_antennas, model.data_length
    S = model.constellation.size
    m_h, C_h = pseudo.channel_mean, pseudo.channel_cov
    m_x, tau = pseudo.symbol_mean, pseudo.symbol_var
    # flat pseudo priors fall back to the true prior moments
    vac_h = np.any(np.isinf(np.real(np.diagonal(C_h, axis1=-2, axis2=-1))), axis=-1)
    m_h = np.where(vac_h[..., None], 0.0, m_h)
    C_h = np.where(vac_h[..., None, None], model.xi, C_h)
    vac_x = np.isinf(tau)
    m_x = np.where(vac_x, 0.0, m_x)
    tau = np.where(vac_x, model.sigma_x2, tau)
    r = tau + np.abs(m_x) ** 2
    dz_mean = m_x[None, :, :, None] * m_h[:, :, None, :]
    dz_cov = hermitize(
        r[None, :, :, None, None] * C_h[:, :, None]
        + tau[None, :, :, None, None] * _outer(m_h)[:, :, None]
    )
    cz = np.zeros((L, K, T, N), dtype=complex)
    return MessageState(
        fz_mean=cz.copy(),
        fz_cov=np.zeros((L, K, T, N, N), dtype=complex),
        dz_mean=dz_mean,
        dz_cov=dz_cov,
        fh_mean=np.zeros((L, K, N), dtype=complex),
        fh_cov=np.array(model.xi, dtype=complex),
        dh_prec=np.zeros((L, K, N, N), dtype=complex),
        dh_info=np.zeros((L, K, N), dtype=complex),
        dx_prec=np.zeros((L, K, T)),
        dx_info=np.zeros((L, K, T), dtype=complex),
        bh_mean=np.zeros((L, K, N), dtype=complex),
        bh_cov=np.array(model.xi, dtype=complex),
        bx_prob=np.full((L, K, T, S), 1.0 / S),
        bx_mean=np.zeros((L, K, T), dtype=complex),
        bx_second=np.full((L, K, T), model.sigma_x2),
        floored=np.zeros((L, K, T), dtype=bool),
    )


# ---------------------------------------------------------------------------
# update families
# ---------------------------------------------------------------------------


def update_mu_fz_z(model, state):
    """Likelihood -> z messages: ``y_l`` minus the other users' z means, noise plus their covariances."""
    N = model.n_antennas
    excl = _exclusive(model.n_users)
    y = np.swapaxes(model.Y, 1, 2)  # (L, T, N)
    others_mean = np.einsum("kj,ljtn->lktn", excl, state.dz_mean)
    others_cov = np.einsum("kj,ljtab->lktab", excl, state.dz_cov)
    mean = y[:, None] - others_mean
    cov = hermitize(model.sigma_v2 * np.eye(N) + others_cov)
    return mean, cov


def tilde_channel_stats(enhanced, state):
    """Enhanced prior times the Dirac -> h message, per ``(l, k)``."""
    return combine_cov_info(enhanced.channel_mean, enhanced.channel_cov, state.dh_prec, state.dh_info)


def update_mu_fH_h(model, enhanced, state):
    """Pilot factor -> h messages.

    Co-pilot users enter as Gaussian interference with their tilde
    statistics; the resulting pilot likelihood of ``h_lk`` is multiplied
    by the enhanced prior of ``h_lk``.
    """
    N = model.n_antennas
    t_mean, t_cov = tilde_channel_stats(enhanced, state)
    g = model.user_group
    same = (g[:, None] == g[None, :]).astype(float) * _exclusive(model.n_users)
    obs_mean = model.y_pilot[:, g] - np.einsum("kj,ljn->lkn", same, t_mean)
    obs_cov = hermitize(model.pilot_noise_var * np.eye(N) + np.einsum("kj,ljab->lkab", same, t_cov))
    return posterior_cov_form(obs_mean, obs_cov, enhanced.channel_mean, enhanced.channel_cov)


def channel_belief(state):
    """Dirac-side channel belief: pilot-factor message times Dirac -> h message."""
    return combine_cov_info(state.fh_mean, state.fh_cov, state.dh_prec, state.dh_info)


def update_mu_delta_x(state, fz_cov_inv=None):
    """Dirac -> x_kt messages in information form.

    precision ``tr(C_tt^-1 R)`` with ``R = C_bh + m_bh m_bh^H`` and
    information ``m_bh^H C_tt^-1 m_z,t``, where ``(m_z,t, C_tt)`` is the
    time-``t`` block of the z -> Dirac message.
    """
    Cinv = inv_psd(state.fz_cov) if fz_cov_inv is None else fz_cov_inv
    R = state.bh_cov + _outer(state.bh_mean)
    prec = np.real(np.einsum("lktab,lkba->lkt", Cinv, R))
    w = np.einsum("lktab,lktb->lkta", Cinv, state.fz_mean)
    info = np.einsum("lka,lkta->lkt", np.conj(state.bh_mean), w)
    return prec, info


def _symbol_prior_logw(enhanced):
    const = enhanced.constellation
    var = np.maximum(enhanced.symbol_var, SYMBOL_VAR_FLOOR * np.mean(np.abs(const) ** 2))
    d = np.abs(const[None, None, :] - enhanced.symbol_mean[..., None]) ** 2
    return -d / var[..., None]  # (K, T, S); uniform discrete prior adds a constant


def _message_logw(prec, info, const):
    return -prec[..., None] * np.abs(const) ** 2 + 2.0 * np.real(np.conj(const) * info[..., None])


def _normalise(logw):
    logw = logw - np.max(logw, axis=-1, keepdims=True)
    w = np.exp(logw)
    return w / np.sum(w, axis=-1, keepdims=True)


def symbol_to_dirac_logw(enhanced, state):
    """Log-weights of x -> Dirac messages: enhanced symbol prior times the other APs' messages."""
    const = enhanced.constellation
    own = _message_logw(state.dx_prec, state.dx_info, const)  # (L, K, T, S)
    others = np.einsum("lj,jkts->lkts", _exclusive(own.shape[0]), own)
    return _symbol_prior_logw(enhanced)[None] + others, own


def symbol_belief(enhanced, state):
    """Discrete Dirac-side symbol beliefs and their moments.

    Returns ``(prob (L,K,T,S), mean (L,K,T), second_moment (L,K,T))``.
    """
    const = enhanced.constellation
    to_dirac, own = symbol_to_dirac_logw(enhanced, state)
    prob = _normalise(to_dirac + own)
    mean = prob @ const
    second = prob @ (np.abs(const) ** 2)
    return prob, mean, second


def symbol_belief_single(incoming, pseudo, constellation):
    """Posterior over the constellation for one symbol.

    ``incoming`` is a list of `ScalarGaussian` messages, ``pseudo`` the
    symbol pseudo prior (`ScalarGaussian`, may be vacuous) and the
    discrete prior is uniform.  Returns ``(prob, mean, var, second_moment)``.
    """
    const = np.asarray(constellation, dtype=complex)
    logw = np.zeros(const.size)
    for msg in list(incoming) + [pseudo]:
        if msg.is_vacuous:
            continue
        if msg.var == 0:
            hit = np.isclose(const, msg.mean, rtol=0, atol=1e-12 * np.max(np.abs(const)))
            logw = np.where(hit, logw, -np.inf)
            continue
        logw = logw - np.abs(const - msg.mean) ** 2 / msg.var
    if not np.any(np.isfinite(logw)):
        raise ValueError("point-mass messages exclude every constellation point")
    prob = _normalise(logw)
    mean = complex(prob @ const)
    second = float(prob @ np.abs(const) ** 2)
    return prob, mean, max(second - abs(mean) ** 2, 0.0), second


def update_mu_delta_h(state, fz_cov_inv=None):
    """Dirac -> h messages in information form.

    precision ``sum_t r_t C_tt^-1`` and information
    ``sum_t conj(m_t) C_tt^-1 m_z,t`` with ``(m_t, r_t)`` the symbol belief
    moments.
    """
    Cinv = inv_psd(state.fz_cov) if fz_cov_inv is None else fz_cov_inv
    prec = hermitize(np.einsum("lkt,lktab->lkab", state.bx_second, Cinv))
    w = np.einsum("lktab,lktb->lkta", Cinv, state.fz_mean)
    info = np.einsum("lkt,lkta->lka", np.conj(state.bx_mean), w)
    return prec, info


def z_belief_blocks(state):
    """Block-diagonal projection of the Dirac-side belief of ``z = x (x) h``.

    Block ``t``: mean ``m_t m_bh`` and covariance
    ``r_t C_bh + var_t m_bh m_bh^H``.
    """
    mean = state.bx_mean[..., None] * state.bh_mean[:, :, None, :]
    cov = hermitize(
        state.bx_second[..., None, None] * state.bh_cov[:, :, None]
        + state.bx_var[..., None, None] * _outer(state.bh_mean)[:, :, None]
    )
    return mean, cov


def update_mu_delta_z(state, floor=RATIO_FLOOR):
    """Dirac -> z messages: projected belief divided by the z -> Dirac message."""
    b_mean, b_cov = z_belief_blocks(state)
    return ratio_blocks(b_mean, b_cov, state.fz_mean, state.fz_cov, floor)


def _info_to_moments(prec, info):
    cov = inv_psd(prec)
    return np.einsum("...ij,...j->...i", cov, info), cov


def _damp_info(new_prec, new_info, old_prec, old_info, damping):
    if damping == 1.0:
        return new_prec, new_info
    old_flat = np.all(np.abs(old_prec) == 0, axis=(-2, -1))
    new_flat = np.all(np.abs(new_prec) == 0, axis=(-2, -1))
    blend = ~(old_flat | new_flat)
    if not np.any(blend):
        return new_prec, new_info
    prec, info = new_prec.copy(), new_info.copy()
    nm, nc = _info_to_moments(new_prec[blend], new_info[blend])
    om, oc = _info_to_moments(old_prec[blend], old_info[blend])
    mean = damping * nm + (1 - damping) * om
    cov = hermitize(damping * nc + (1 - damping) * oc)
    p = inv_psd(cov)
    prec[blend] = p
    info[blend] = np.einsum("...ij,...j->...i", p, mean)
    return prec, info


def final_symbol_log_belief(enhanced, state):
    """Log-weights of the decision belief ``[mu_x->prior * prod_l mu_x->Dirac_l]^(1/L)``."""
    const = enhanced.constellation
    own = _message_logw(state.dx_prec, state.dx_info, const)
    to_prior = own.sum(axis=0)
    to_dirac, _ = symbol_to_dirac_logw(enhanced, state)
    L = own.shape[0]
    return (to_prior + to_dirac.sum(axis=0)) / L


def symbol_entropy(prob):
    p = np.clip(prob, 1e-300, 1.0)
    return -np.sum(prob * np.log(p), axis=-1)


def vbep_sweep(model, enhanced, state, damping=0.7, floor=RATIO_FLOOR, callback=None):
    """One pass of the eight update lines, each applied to every ``(l, k)``.

    ``callback(family, state)`` is invoked after each line with the
    family name: ``"fz"``, ``"fH"``, ``"bh"``, ``"dx"``, ``"bx"``, ``"dh"``,
    ``"bh2"``, ``"dz"``.
    """
    def notify(name):
        if callback is not None:
            callback(name, state)

    state.fz_mean, state.fz_cov = update_mu_fz_z(model, state)
    notify("fz")
    state.fh_mean, state.fh_cov = update_mu_fH_h(model, enhanced, state)
    notify("fH")
    state.bh_mean, state.bh_cov = channel_belief(state)
    notify("bh")
    Cinv = inv_psd(state.fz_cov)
    state.dx_prec, state.dx_info = update_mu_delta_x(state, Cinv)
    notify("dx")
    state.bx_prob, state.bx_mean, state.bx_second = symbol_belief(enhanced, state)
    notify("bx")
    prec, info = update_mu_delta_h(state, Cinv)
    state.dh_prec, state.dh_info = _damp_info(prec, info, state.dh_prec, state.dh_info, damping)
    notify("dh")
    state.bh_mean, state.bh_cov = channel_belief(state)
    notify("bh2")
    mean, cov, floored = update_mu_delta_z(state, floor)
    if damping != 1.0:
        mean = damping * mean + (1 - damping) * state.dz_mean
        cov = hermitize(damping * cov + (1 - damping) * state.dz_cov)
    state.dz_mean, state.dz_cov = mean, cov
    state.floored = floored
    state.n_floored += int(np.count_nonzero(floored))
    notify("dz")
    return state


@dataclass
class VBEPResult:
    channel_mean: np.ndarray  # (L, K, N)
    channel_cov: np.ndarray
    symbols: np.ndarray  # (K, T)
    symbol_prob: np.ndarray  # (K, T, S)
    state: MessageState
    n_sweeps: int
    converged: bool
    movements: list
    residuals: list = field(default_factory=list)
    best_sweep: int = 0


# a run whose data residual exceeds the best one by this factor has diverged
DIVERGENCE_FACTOR = 1e4


def data_residual(model, channel_mean, symbol_prob):
    """Squared error of the received data against the current estimates.

    Uses the channel belief means and the soft symbol means of the decision
    belief.
    """
    x = symbol_prob @ model.constellation
    pred = np.einsum("lkn,kt->lnt", channel_mean, x)
    return float(np.sum(np.abs(model.Y - pred) ** 2))


def run_vbep(model, enhanced, pseudo, max_sweeps=30, tol=1e-4, damping=0.7,
             floor=RATIO_FLOOR, callback=None, trace=False, keep_best=True):
    """Run VB-EP sweeps until the beliefs settle or ``max_sweeps``.

    Movement per sweep is the larger of the relative change of the channel
    belief means and the absolute change of the decision probabilities.

    With ``keep_best`` the estimates of the sweep with the smallest data
    residual are returned, and the run stops once the residual exceeds the
    best one by ``DIVERGENCE_FACTOR``.  Weak links can otherwise lock onto
    residual interference of strong users and drag the symbols along.

    Returns a `VBEPResult`; channel estimates are the Dirac-side channel
    belief means and symbol decisions the argmax of the final discrete
    symbol belief.  ``state`` is always the last state.
    """
    L, K, N, T = model.n_aps, model.n_users, model.n_antennas, model.data_length
    const = model.constellation
    state = initial_messages(model, pseudo)
    if K == 0:
        return VBEPResult(
            state.bh_mean, state.bh_cov, np.zeros((0, T), dtype=complex),
            np.zeros((0, T, const.size)), state, 0, True, [],
        )
    scale = 1e-9 * np.sqrt(np.real(np.trace(model.xi, axis1=-2, axis2=-1)))
    noise = model.sigma_v2 * model.Y.size
    movements, residuals = [], []
    converged = False
    prev = prev_prob = best = None
    n = 0
    for n in range(1, max_sweeps + 1):
        state = vbep_sweep(model, enhanced, state, damping, floor, callback)
        logw = final_symbol_log_belief(enhanced, state)
        prob = _normalise(logw)
        if prev is not None:
            num = np.linalg.norm(state.bh_mean - prev, axis=-1)
            den = np.linalg.norm(state.bh_mean, axis=-1) + scale
            # pinned channels settle at once while symbols may still move
            movements.append(max(float(np.max(num / den)), float(np.max(np.abs(prob - prev_prob), initial=0.0))))
        prev, prev_prob = state.bh_mean.copy(), prob
        res = data_residual(model, state.bh_mean, prob)
        residuals.append(res)
        if best is None or not keep_best or res <= best[0]:
            best = (res, n, state.bh_mean.copy(), state.bh_cov.copy(), logw, prob)
        if trace:
            ent = symbol_entropy(prob)
            log.info(
                "sweep=%d max_move=%s residual=%s mean_symbol_entropy=%s",
                n, f"{movements[-1]:.9g}" if movements else "nan",
                f"{res / noise:.9g}" if noise > 0 else f"{res:.9g}",
                " ".join(f"{e:.9g}" for e in ent.mean(axis=1)),
            )
        if movements and movements[-1] < tol:
            converged = True
            break
        if keep_best and not res <= DIVERGENCE_FACTOR * max(best[0], noise):
            log.debug("VB-EP diverged at sweep %d; keeping sweep %d", n, best[1])
            break
    _, best_sweep, mean, cov, logw, prob = best
    symbols = const[np.argmax(logw, axis=-1)]
    return VBEPResult(mean, cov, symbols, prob, state, n, converged, movements, residuals, best_sweep)


class PPVBEPEstimator(BaseEstimator):
    """Joint channel estimation and detection by pseudo-prior regularised VB-EP.

    ``fit(model, pseudo_prior)`` takes a `PrunedModel` and the VL-EP
    `PseudoPrior` for the same users.

    Parameters
    ----------
    max_sweeps : int
    tol : float
        Relative channel-belief movement that counts as converged.
    damping : float
        Weight of the new value when damping the Dirac -> h and Dirac -> z
        messages in the moment domain; 1 disables damping.
    keep_best : bool
        Return the sweep with the smallest data residual and stop on
        divergence (see `run_vbep`).
    verbose : bool
        Log one line per sweep.

    Attributes
    ----------
    channel_mean_ : ndarray (L, K, N)
    symbols_ : ndarray (K, T)
    symbol_proba_ : ndarray (K, T, S)
    n_sweeps_, converged_, n_floored_, best_sweep_
    """

    def __init__(self, max_sweeps=30, tol=1e-4, damping=0.7, keep_best=True, verbose=False):
        self.max_sweeps = max_sweeps
        self.tol = tol
        self.damping = damping
        self.keep_best = keep_best
        self.verbose = verbose

    def fit(self, model, pseudo_prior):
        check_model(model)
        enhanced = build_enhanced_priors(pseudo_prior, model)
        res = run_vbep(model, enhanced, pseudo_prior, self.max_sweeps, self.tol,
                       self.damping, trace=self.verbose, keep_best=self.keep_best)
        self.channel_mean_ = res.channel_mean
        self.channel_cov_ = res.channel_cov
        self.symbols_ = res.symbols
        self.symbol_proba_ = res.symbol_prob
        self.n_sweeps_ = res.n_sweeps
        self.converged_ = res.converged
        self.n_floored_ = res.state.n_floored
        self.movements_ = res.movements
        self.best_sweep_ = res.best_sweep
        return self

    def predict(self, model=None, pseudo_prior=None):
        if model is not None:
            self.fit(model, pseudo_prior)
        check_is_fitted(self, "symbols_")
        return self.symbols_

    def predict_proba(self):
        check_is_fitted(self, "symbol_proba_")
        return self.symbol_proba_


def scalar_message(prec, info):
    """`ScalarGaussian` view of an information-form scalar message."""
    if prec <= 0:
        return ScalarGaussian.vacuous()
    return ScalarGaussian(info / prec, 1.0 / prec)
