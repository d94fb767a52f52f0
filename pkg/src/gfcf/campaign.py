"""Monte Carlo campaigns over user position setups and per-setup draws.

Seeding: setup ``s`` draws its user positions from
``SeedSequence(seed, spawn_key=(0, s))`` and trial ``t`` of that setup
draws everything else from ``SeedSequence(seed, spawn_key=(1, s, t))``.
A trial's result therefore depends only on ``(seed, s, t)``, not on the
number of setups, trials, workers or the algorithm list.
"""

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from gfcf.metrics import ECDF
from gfcf.pipeline import run_pipeline
from gfcf.scenario import draw_ut_positions, generate_realization

log = logging.getLogger(__name__)

METRICS = ("cnmse", "der", "ser")
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)
CSV_COLUMNS = ("setup", "trial", "algo", "cnmse", "der", "ser", "wall_time")


def fmt(x):
    """Nine significant digits."""
    return f"{float(x):.9g}"


def positions_seed(seed, setup):
    return np.random.SeedSequence(seed, spawn_key=(0, setup))


def trial_seed(seed, setup, trial):
    return np.random.SeedSequence(seed, spawn_key=(1, setup, trial))


def setup_positions(scenario, seed, setup):
    return draw_ut_positions(scenario, np.random.default_rng(positions_seed(seed, setup)))


@dataclass
class TrialRecord:
    setup: int
    trial: int
    algo: str
    cnmse: float
    der: float
    ser: float
    wall_time: float
    status: str


@dataclass
class RunResult:
    config: dict
    records: list
    ecdfs: dict = field(default_factory=dict)  # (metric, algo) -> ECDF over per-setup means
    pooled: dict = field(default_factory=dict)  # (metric, algo) -> ECDF over all trials

    def values(self, metric, algo):
        return np.array([getattr(r, metric) for r in self.records if r.algo == algo])

    def setup_means(self, metric, algo):
        """Per-setup NaN-ignoring mean of ``metric``; setups with no valid value are dropped."""
        by_setup = {}
        for r in self.records:
            if r.algo == algo:
                by_setup.setdefault(r.setup, []).append(getattr(r, metric))
        out = []
        for s in sorted(by_setup):
            v = np.asarray(by_setup[s], dtype=float)
            v = v[~np.isnan(v)]
            if v.size:
                out.append(float(np.mean(v)))
        return np.array(out)


def run_trial(run_config, setup, trial, positions, verbose=False):
    """All selected algorithms on one ``(setup, trial)`` draw."""
    scen = run_config.scenario
    camp = run_config.campaign
    real = generate_realization(scen, trial_seed(camp.seed, setup, trial), ut_positions=positions)
    out = []
    for algo in camp.algos:
        m = run_pipeline(real, algo, run_config.algorithms, verbose).metrics
        out.append(TrialRecord(setup, trial, algo, m.cnmse, m.der, m.ser, m.wall_time, m.status))
    return out


def _safe_trial(run_config, setup, trial, positions, verbose):
    try:
        return run_trial(run_config, setup, trial, positions, verbose)
    except Exception as exc:  # noqa: BLE001 - a bad trial must not stop the campaign
        log.error("setup %d trial %d failed: %s", setup, trial, exc)
        return [
            TrialRecord(setup, trial, algo, math.nan, math.nan, math.nan, 0.0, f"error: {exc}")
            for algo in run_config.campaign.algos
        ]


def run_campaign(run_config, out_dir=None, verbose=False):
    """Run every ``(setup, trial)`` and aggregate.

    Trials are spread over ``campaign.threads`` worker threads; records are
    ordered by ``(setup, trial, algo position)`` regardless.  When
    ``out_dir`` is given the results are written there (see `write_results`).
    """
    camp = run_config.campaign
    positions = [setup_positions(run_config.scenario, camp.seed, s) for s in range(camp.setups)]
    jobs = [(s, t) for s in range(camp.setups) for t in range(camp.trials)]

    def work(job):
        s, t = job
        recs = _safe_trial(run_config, s, t, positions[s], verbose)
        if verbose:
            for r in recs:
                log.info("setup=%d trial=%d algo=%s cnmse=%s der=%s ser=%s status=%s",
                         s, t, r.algo, fmt(r.cnmse), fmt(r.der), fmt(r.ser), r.status)
        return recs

    if camp.threads == 1:
        chunks = [work(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=camp.threads) as pool:
            chunks = list(pool.map(work, jobs))
    records = [r for chunk in chunks for r in chunk]

    result = RunResult(config=run_config.to_dict(), records=records)
    for algo in camp.algos:
        for metric in METRICS:
            means = result.setup_means(metric, algo)
            if means.size:
                result.ecdfs[metric, algo] = ECDF(means)
            pooled = result.values(metric, algo)
            pooled = pooled[~np.isnan(pooled)]
            if pooled.size:
                result.pooled[metric, algo] = ECDF(pooled)
    if out_dir is not None:
        write_results(result, out_dir)
    return result


def _write_ecdf(path, curves):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("algo", "value", "F"))
        for algo, e in curves:
            for x, F in zip(e.x, e.F):
                w.writerow((algo, fmt(x), fmt(F)))


def write_results(result, out_dir):
    """Write ``metrics.csv``, ``ecdf_<metric>.csv``, ``ecdf_<metric>_pooled.csv`` and ``summary.json``.

    The per-setup ECDF files hold one point per setup (the setup's mean);
    the pooled files hold one point per trial.
    """
    os.makedirs(out_dir, exist_ok=True)
    algos = result.config["campaign"]["algos"]
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in result.records:
            w.writerow((r.setup, r.trial, r.algo, fmt(r.cnmse), fmt(r.der), fmt(r.ser), fmt(r.wall_time)))
    for metric in METRICS:
        for suffix, table in (("", result.ecdfs), ("_pooled", result.pooled)):
            curves = [(a, table[metric, a]) for a in algos if (metric, a) in table]
            _write_ecdf(os.path.join(out_dir, f"ecdf_{metric}{suffix}.csv"), curves)

    summary = {"config": result.config, "quantiles": list(QUANTILES), "algorithms": {}}
    for algo in algos:
        entry = {}
        for metric in METRICS:
            for name, table in (("per_setup", result.ecdfs), ("pooled", result.pooled)):
                if (metric, algo) in table:
                    q = table[metric, algo].quantile(QUANTILES)
                    entry.setdefault(metric, {})[name] = [float(fmt(v)) for v in q]
        statuses = {}
        for r in result.records:
            if r.algo == algo:
                statuses[r.status] = statuses.get(r.status, 0) + 1
        entry["status_counts"] = dict(sorted(statuses.items()))
        summary["algorithms"][algo] = entry
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=False)
        fh.write("\n")


def records_as_dicts(result):
    return [asdict(r) for r in result.records]
