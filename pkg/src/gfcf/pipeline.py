"""End-to-end receiver: activity detection, pruning, VL-EP, VB-EP, metrics.

Each stage that fails numerically is skipped and the outputs of the last
good stage are kept; the status string records what happened.
"""

import logging
import time
from dataclasses import dataclass

import numpy as np

from gfcf.activity import iterative_ml
from gfcf.baseline import mrc_equalize, pilot_mmse, pilot_mmse_baseline
from gfcf.config import AlgorithmConfig
from gfcf.exceptions import NumericalFailure
from gfcf.metrics import TrialMetrics, compute_cnmse, compute_der, compute_ser
from gfcf.model import prune
from gfcf.vbep import build_enhanced_priors, run_vbep
from gfcf.vlep import hard_decisions, run_vlep

log = logging.getLogger(__name__)

_STAGE_ERRORS = (NumericalFailure, np.linalg.LinAlgError, FloatingPointError)


@dataclass
class PipelineResult:
    u_hat: np.ndarray
    index_map: np.ndarray
    channel_mean: np.ndarray  # (L, K, N) for detected users
    symbols: np.ndarray  # (K, T)
    metrics: TrialMetrics


def _detect(real, algo, params):
    if algo == "pilot-mmse-genie" or (params.genie_activity and algo in ("pp-vb-ep", "vlep-only")):
        return np.asarray(real.u_true, dtype=int)
    u_hat, _ = iterative_ml(prune(np.ones(real.config.n_users, dtype=int), real), params.activity_max_passes)
    return u_hat


def _estimate(real, u_hat, algo, params, verbose):
    """Channel and symbol estimates for the users in ``u_hat``, with the status string."""
    model = prune(u_hat, real)
    if algo in ("pilot-mmse", "pilot-mmse-genie"):
        _, mean, symbols = pilot_mmse_baseline(real, u_hat)
        return model, mean, symbols, "ok"

    mean, _ = pilot_mmse(model)
    const = model.constellation
    symbols = hard_decisions(mrc_equalize(mean, model.Y), const)
    try:
        pseudo, info = run_vlep(model, params.vlep_max_iter, params.vlep_tol, params.vlep_damping)
    except _STAGE_ERRORS as exc:
        log.warning("VL-EP failed (%s); keeping pilot-only estimates", exc)
        return model, mean, symbols, "vlep-failed"
    mean = pseudo.channel_mean
    symbols = hard_decisions(pseudo.symbol_mean, const)
    if algo == "vlep-only":
        return model, mean, symbols, "ok"
    try:
        enhanced = build_enhanced_priors(pseudo, model)
        res = run_vbep(model, enhanced, pseudo, params.vbep_max_sweeps, params.vbep_tol,
                       params.vbep_damping, trace=verbose, keep_best=params.vbep_keep_best)
    except _STAGE_ERRORS as exc:
        log.warning("VB-EP failed (%s); keeping VL-EP estimates", exc)
        return model, mean, symbols, "vbep-failed"
    return model, res.channel_mean, res.symbols, "ok"


def run_pipeline(real, algo="pp-vb-ep", params=None, verbose=False):
    """Run one receiver on one realization and score it against the truth.

    ``algo`` is one of ``pp-vb-ep``, ``vlep-only``, ``pilot-mmse`` or
    ``pilot-mmse-genie``.  Returns a `PipelineResult`.
    """
    params = params or AlgorithmConfig()
    start = time.perf_counter()
    u_hat = _detect(real, algo, params)
    model, mean, symbols, status = _estimate(real, u_hat, algo, params, verbose)
    elapsed = time.perf_counter() - start

    cnmse = compute_cnmse(mean, real.H_true, real.u_true, model.index_map)
    if not np.any(real.u_true):
        status = "no-active-users" if status == "ok" else status
    metrics = TrialMetrics(
        algo=algo,
        cnmse=cnmse,
        der=compute_der(u_hat, real.u_true),
        ser=compute_ser(symbols, real.X_true, real.u_true, model.index_map),
        wall_time=elapsed,
        status=status,
    )
    return PipelineResult(u_hat, model.index_map, mean, symbols, metrics)
