import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.models.densities import GammaDensity, MixtureSpec, NormalDensity, Sample, moment, ise, sample_mixture
from src.models.schemas import (
    BandwidthMode,
    CvBandwidth,
    CvCurve,
    ExperimentSpec,
    ExperimentSummary,
    FixedBandwidth,
    MmConfig,
    RepRow,
    SimulationFile,
)
from src.services.bandwidth_service import BandwidthService, default_max_workers, silverman
from src.services.mm_service import FitResult, fit

logger = logging.getLogger(__name__)

# Log-scale ANC surrogate: known Normal(4.375, 0.416), heavy-tailed positive unknown
ANC_SHIFT = 50.0
ANC_SURROGATE = MixtureSpec(
    p=0.4875,
    known=NormalDensity(mu=4.375, sigma=0.416),
    unknown=GammaDensity(alpha=20.0, beta=3.2),
)


def rep_seed(master_seed: int, rep: int) -> int:
    """Seed of replication `rep`, hashed from the master seed"""
    return int(np.random.SeedSequence(master_seed, spawn_key=(rep,)).generate_state(1)[0])


def fit_sample(
    sample: Sample,
    f0,
    mm: MmConfig,
    mode: BandwidthMode,
    bandwidth_service: Optional[BandwidthService] = None,
) -> Tuple[FitResult, Optional[CvCurve]]:
    """Resolve the bandwidth per `mode` and run the MM fit"""
    if isinstance(mode, FixedBandwidth):
        return fit(sample, f0, mm.with_bandwidth(mode.h)), None
    if isinstance(mode, CvBandwidth):
        service = bandwidth_service or BandwidthService()
        selection = service.select(sample, f0, mm, mode.cv)
        cfg = mm.with_bandwidth(selection.h_star)
        start = None if mode.restart else selection.warm_state
        return fit(sample, f0, cfg, start=start, grid=selection.grid), selection.curve
    return fit(sample, f0, mm.with_bandwidth(silverman(sample))), None


def _sd(values: np.ndarray) -> float:
    return float(np.std(values, ddof=1)) if values.size > 1 else 0.0


def aggregate(rows: Sequence[RepRow], p: float) -> Dict[str, Optional[float]]:
    """MSE of p_hat, MISE and mean/sd of p_hat and mu_hat over successful rows"""
    ok = [row for row in rows if row.error is None]
    out: Dict[str, Optional[float]] = dict.fromkeys(["mse_p", "mise", "p_mean", "p_sd", "mu_mean", "mu_sd"])
    p_hat = np.array([row.p_hat for row in ok if row.p_hat is not None])
    if p_hat.size:
        out["mse_p"] = float(np.mean((p_hat - p) ** 2))
        out["p_mean"] = float(np.mean(p_hat))
        out["p_sd"] = _sd(p_hat)
    ises = np.array([row.ise for row in ok if row.ise is not None])
    if ises.size:
        out["mise"] = float(np.mean(ises))
    mu_hat = np.array([row.mu_hat for row in ok if row.mu_hat is not None])
    if mu_hat.size:
        out["mu_mean"] = float(np.mean(mu_hat))
        out["mu_sd"] = _sd(mu_hat)
    return out


class ExperimentService:
    """Seeded replication harness.

    Replications are independent tasks keyed by index; every random draw
    derives from the replication seed, so results do not depend on the
    execution order or on the number of workers.
    """

    def __init__(self, max_workers: Optional[int] = None):
        self.max_workers = max_workers or default_max_workers()
        self.bandwidth_service = BandwidthService(max_workers=1)

    def run_replication(self, spec: ExperimentSpec, rep: int) -> RepRow:
        seed = rep_seed(spec.master_seed, rep)
        row = RepRow(rep=rep, seed=seed)
        try:
            sample = sample_mixture(spec.mixture, spec.n, seed)
            mode = spec.bandwidth
            if isinstance(mode, CvBandwidth):
                mode = mode.model_copy(update={"cv": mode.cv.model_copy(update={"fold_seed": seed})})
            result, _ = fit_sample(sample, spec.mixture.known, spec.mm, mode, self.bandwidth_service)
            row.p_hat = result.p_hat
            row.h = result.bandwidth
            row.n_iters = result.n_iters
            row.stop_reason = result.stop_reason
            if "ise" in spec.outputs:
                row.ise = ise(result.f_hat, spec.mixture.unknown)
            if "mu_hat" in spec.outputs:
                row.mu_hat = moment(result.f_hat, 1)
            if "p_hat" not in spec.outputs:
                row.p_hat = None
        except Exception as e:
            logger.warning(f"Replication {rep} (seed {seed}) of '{spec.name}' failed: {str(e)}")
            row.error = str(e) or type(e).__name__
        return row

    def run_experiment(self, spec: ExperimentSpec) -> ExperimentSummary:
        logger.info(f"Running '{spec.name}': p={spec.mixture.p:g}, n={spec.n}, reps={spec.reps}")
        with ThreadPoolExecutor(self.max_workers) as executor:
            futures = {rep: executor.submit(self.run_replication, spec, rep) for rep in range(spec.reps)}
        rows = [futures[rep].result() for rep in range(spec.reps)]
        n_failed = sum(row.error is not None for row in rows)
        notes = [f"bandwidth mode: {spec.bandwidth.mode}"]
        if n_failed:
            notes.append(f"{n_failed} of {spec.reps} replications failed and are excluded from aggregates")
        summary = ExperimentSummary(spec=spec, rows=rows, n_failed=n_failed, notes=notes, **aggregate(rows, spec.mixture.p))
        logger.info(f"'{spec.name}' done: mean p_hat={summary.p_mean}, MSE={summary.mse_p}, MISE={summary.mise}")
        return summary

    def mse_curve(self, template: ExperimentSpec, p_values: Sequence[float]) -> Tuple[pd.DataFrame, List[ExperimentSummary]]:
        """One experiment per true p; returns the (p, n, MSE, MISE, ...) table and the summaries"""
        summaries = []
        for p in p_values:
            mixture = template.mixture.model_copy(update={"p": float(p)})
            summaries.append(self.run_experiment(template.model_copy(update={"mixture": mixture})))
        return aggregate_table(summaries), summaries

    def run_file(self, simulation: SimulationFile) -> Tuple[pd.DataFrame, List[ExperimentSummary]]:
        base = simulation.experiment
        sizes = simulation.sample_sizes or [base.n]
        p_values = simulation.p_values or [base.mixture.p]
        tables, summaries = [], []
        for n in sizes:
            table, cell = self.mse_curve(base.model_copy(update={"n": int(n)}), p_values)
            tables.append(table)
            summaries.extend(cell)
        return pd.concat(tables, ignore_index=True), summaries


def per_rep_table(summary: ExperimentSummary) -> pd.DataFrame:
    columns = ["rep", "seed", "p_hat", "ise", "mu_hat", "h", "n_iters", "stop_reason", "error"]
    records = [row.model_dump(mode="json") for row in summary.rows]
    table = pd.DataFrame.from_records(records, columns=columns)
    table.insert(0, "p", summary.spec.mixture.p)
    table.insert(1, "n", summary.spec.n)
    return table


def aggregate_table(summaries: Sequence[ExperimentSummary]) -> pd.DataFrame:
    records = [
        {
            "p": s.spec.mixture.p,
            "n": s.spec.n,
            "reps": s.spec.reps,
            "n_failed": s.n_failed,
            "mse_p": s.mse_p,
            "mise": s.mise,
            "p_mean": s.p_mean,
            "p_sd": s.p_sd,
            "mu_mean": s.mu_mean,
            "mu_sd": s.mu_sd,
        }
        for s in summaries
    ]
    return pd.DataFrame.from_records(records)


def generate_anc_surrogate(n: int = 155, seed: int = 0) -> Sample:
    """Synthetic raw ANC-like values whose log(x + 50) follows ANC_SURROGATE"""
    log_sample = sample_mixture(ANC_SURROGATE, n, seed)
    raw = np.exp(log_sample.points) - ANC_SHIFT
    return Sample(raw, seed=seed, provenance=f"anc surrogate ({log_sample.provenance}, shift {ANC_SHIFT:g})", labels=log_sample.labels)


def spearman_trend(table: pd.DataFrame, column: str = "mise") -> float:
    """Rank correlation between the true p and `column` across the table rows"""
    pairs = table[["p", column]].dropna()
    if len(pairs) < 2:
        return math.nan
    return float(pairs["p"].corr(pairs[column], method="spearman"))
