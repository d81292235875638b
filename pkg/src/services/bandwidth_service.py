import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.integrate import trapezoid

from src.models.densities import Sample, make_rng
from src.models.errors import BandwidthSelectionError, ConfigError
from src.models.grid import GridFn
from src.models.schemas import CvConfig, CvCurve, CvPoint, MmConfig
from src.services.mm_service import MmState, default_f_init, default_grid, evaluate_estimate, iterate

logger = logging.getLogger(__name__)


def default_max_workers() -> int:
    return int(os.getenv("SMOOTHMIX_MAX_WORKERS", str(min(8, os.cpu_count() or 1))))


def silverman(sample: Sample) -> float:
    """h = 0.9 min(SD, IQR / 1.34) n^(-1/5), SD with divisor n - 1, type-7 quantiles"""
    x = sample.points
    if x.size < 2:
        raise ConfigError("Silverman's rule needs at least 2 points")
    sd = float(np.std(x, ddof=1))
    q25, q75 = np.quantile(x, [0.25, 0.75], method="linear")
    scale = min(sd, float(q75 - q25) / 1.34)
    if not scale > 0:
        raise ConfigError("Sample has zero scale; Silverman's rule is undefined")
    return 0.9 * scale * x.size ** (-0.2)


def candidate_bandwidths(h_s: float, cfg: CvConfig) -> np.ndarray:
    """h_s + (i / M) l for i = -M..M, in increasing order"""
    if cfg.grid_steps == 0:
        return np.array([h_s])
    steps = np.arange(-cfg.grid_steps, cfg.grid_steps + 1)
    return h_s + steps / cfg.grid_steps * cfg.half_range


def fold_partition(n: int, cfg: CvConfig) -> List[np.ndarray]:
    """Seeded random split of range(n) into K near-equal folds"""
    if cfg.folds > n:
        raise ConfigError(f"Cannot split {n} points into {cfg.folds} folds")
    permutation = make_rng(cfg.fold_seed).permutation(n)
    return [np.sort(fold) for fold in np.array_split(permutation, cfg.folds)]


@dataclass(frozen=True)
class CvSelection:
    h_star: float
    curve: CvCurve
    warm_state: Optional[MmState]
    grid: GridFn


class BandwidthService:
    """Warm-up K-fold cross-validation of the MM bandwidth.

    Every (h, fold) warm-up runs T iterations from the same (p_init, f_init)
    on one grid shared by all candidates, so CV(h) depends only on h and the
    fold split.
    """

    def __init__(self, max_workers: Optional[int] = None):
        self.max_workers = max_workers or default_max_workers()

    def _warmup(self, sample: Sample, f0, cfg_mm: MmConfig, h: float, warmup: int, grid: GridFn) -> MmState:
        states = iterate(sample, f0, cfg_mm.with_bandwidth(h), grid=grid)
        state = next(states)
        for _ in range(warmup):
            state = next(states)
        return state

    def _held_out_sum(self, sample: Sample, fold: np.ndarray, f0, cfg_mm: MmConfig, h: float, warmup: int, grid: GridFn) -> float:
        keep = np.setdiff1d(np.arange(sample.n), fold)
        training = sample.subset(keep)
        state = self._warmup(training, f0, cfg_mm, h, warmup, grid)
        values = evaluate_estimate(training, state.weights, state.alpha, cfg_mm.kernel, h, grid, sample.points[fold])
        return float(np.sum(values))

    def select(self, sample: Sample, f0, cfg_mm: MmConfig, cfg_cv: CvConfig, grid: Optional[GridFn] = None) -> CvSelection:
        h_s = silverman(sample)
        if not cfg_cv.half_range < h_s:
            raise ConfigError(f"half_range {cfg_cv.half_range:g} must be below h_s={h_s:.6g} to keep bandwidths positive")
        bandwidths = candidate_bandwidths(h_s, cfg_cv)
        folds = fold_partition(sample.n, cfg_cv)
        # one f_init for every (h, fold) warm-up, resolved from the full sample
        cfg_mm = cfg_mm.model_copy(update={"f_init": cfg_mm.f_init or default_f_init(sample, f0)})
        if grid is None:
            if cfg_mm.grid is not None:
                grid = GridFn(cfg_mm.grid.lo, cfg_mm.grid.hi, np.zeros(cfg_mm.grid.n_points))
            else:
                grid = default_grid(sample.points, cfg_mm.kernel, float(bandwidths[-1]))
        logger.info(f"Cross-validating {bandwidths.size} bandwidths around h_s={h_s:.6g} with {len(folds)} folds")

        def full_task(h):
            return self._warmup(sample, f0, cfg_mm, h, cfg_cv.warmup, grid)

        def fold_task(h, fold):
            return self._held_out_sum(sample, fold, f0, cfg_mm, h, cfg_cv.warmup, grid)

        with ThreadPoolExecutor(self.max_workers) as executor:
            full = {i: executor.submit(full_task, h) for i, h in enumerate(bandwidths)}
            held = {
                (i, k): executor.submit(fold_task, h, fold)
                for i, h in enumerate(bandwidths)
                for k, fold in enumerate(folds)
            }

        points, warm_states = [], {}
        for i, h in enumerate(bandwidths):
            try:
                state = full[i].result()
                norm = float(trapezoid(state.f.values**2, dx=state.f.grid.step))
                held_out = sum(held[(i, k)].result() for k in range(len(folds)))
                points.append(CvPoint(h=float(h), cv=norm - 2.0 / sample.n * held_out))
                warm_states[i] = state
            except Exception as e:
                logger.warning(f"Bandwidth h={h:.6g} failed during cross-validation: {str(e)}")
                points.append(CvPoint(h=float(h), error=str(e)))

        valid = [i for i, point in enumerate(points) if point.valid]
        if not valid:
            raise BandwidthSelectionError("Every candidate bandwidth failed")
        best = min(valid, key=lambda i: (points[i].cv, points[i].h))
        curve = CvCurve(points=points, h_star=points[best].h, h_silverman=h_s)
        logger.info(f"Selected h*={curve.h_star:.6g} (CV={points[best].cv:.6g})")
        return CvSelection(h_star=curve.h_star, curve=curve, warm_state=warm_states[best], grid=grid)


def cv_bandwidth(sample: Sample, f0, cfg_mm: MmConfig, cfg_cv: CvConfig) -> Tuple[float, CvCurve]:
    selection = BandwidthService().select(sample, f0, cfg_mm, cfg_cv)
    return selection.h_star, selection.curve
