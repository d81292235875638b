"""Numerical check of the sufficient identifiability condition.

The two-component model with known f0 is identifiable over a class of
unknown components whose means all lie on one side of mu_f0 when

    G(mu) = V(mu) / (mu - mu_f0)

is strictly increasing over that mean domain, V being the variance function
of the class. For natural exponential families with power variance
V(mu) = alpha * mu ** gamma this holds (mu_f0 = 0, positive means) exactly
when gamma > 1.
"""
import logging
from typing import Tuple, Union

import numpy as np

from src.models.errors import IdentifiabilityError
from src.models.schemas import IdentifiabilityReport, NefPvfVariance, TabulatedVariance

logger = logging.getLogger(__name__)

# Smallest increment of G between adjacent checkpoints counted as an increase
STRICTNESS_MARGIN = 1e-12


def variance_values(v: Union[NefPvfVariance, TabulatedVariance], mu: np.ndarray) -> np.ndarray:
    if isinstance(v, NefPvfVariance):
        return v.scale * np.power(mu, v.power)
    table_mu = np.asarray(v.mu)
    if mu[0] < table_mu[0] or mu[-1] > table_mu[-1]:
        raise IdentifiabilityError(f"Domain [{mu[0]:g}, {mu[-1]:g}] exceeds the tabulated mu range [{table_mu[0]:g}, {table_mu[-1]:g}]")
    return np.interp(mu, table_mu, np.asarray(v.v))


def _family_notes(v: Union[NefPvfVariance, TabulatedVariance]) -> list:
    notes = []
    if isinstance(v, NefPvfVariance):
        if v.power < 0 or 0 < v.power < 1:
            notes.append(f"no natural exponential family has power variance with gamma={v.power:g}; G evaluated formally")
        if v.power == 1:
            notes.append("gamma=1 is the Poisson (discrete) family, outside the continuous estimator's scope")
    return notes


def check_G_monotone(
    v: Union[NefPvfVariance, TabulatedVariance],
    mu_f0: float,
    domain: Tuple[float, float],
    n_check: int = 1000,
) -> IdentifiabilityReport:
    mu_lo, mu_hi = domain
    if not mu_lo < mu_hi:
        raise IdentifiabilityError(f"Domain needs lo < hi, got ({mu_lo}, {mu_hi})")
    if mu_lo <= mu_f0 <= mu_hi:
        raise IdentifiabilityError(f"Domain ({mu_lo:g}, {mu_hi:g}) must lie entirely above or below mu_f0={mu_f0:g}")
    if n_check < 2:
        raise IdentifiabilityError("Need at least 2 checkpoints")

    mu = np.linspace(mu_lo, mu_hi, n_check)
    variances = variance_values(v, mu)
    if not np.all(variances > 0):
        raise IdentifiabilityError("Variance function must be positive on the domain")
    g = variances / (mu - mu_f0)
    increments = np.diff(g)

    notes = _family_notes(v)
    failing = np.flatnonzero(~(increments > STRICTNESS_MARGIN))
    if failing.size == 0:
        return IdentifiabilityReport(condition_holds=True, notes=notes)

    i = int(failing[0])
    flat = np.abs(increments[failing]) <= STRICTNESS_MARGIN
    if np.any(flat):
        notes.append(f"{int(flat.sum())} of {increments.size} steps are flat within {STRICTNESS_MARGIN:g}")
    logger.info(f"G is not strictly increasing between mu={mu[i]:.6g} and mu={mu[i + 1]:.6g}")
    return IdentifiabilityReport(condition_holds=False, witness=(float(mu[i]), float(mu[i + 1])), notes=notes)
