"""Sampling weights and combined (sampling x complete-record) weights."""
import logging
from dataclasses import dataclass

import numpy as np

from . import glm
from .dataset import complete_rows, expand_design

log = logging.getLogger(__name__)

ANALYSIS_VARS = ("VDI", "Eth", "FamHx", "PetOwn", "AnteVD", "NSib")
DEFAULT_Z_VARS = ("FoodAllergy", "Eth", "MAge")


class DegenerateDesignError(ValueError):
    """No non-case subcohort members, so the sampling weight is undefined."""


class WeightModelError(RuntimeError):
    """The complete-record response model did not converge."""


@dataclass(frozen=True)
class WeightVector:
    """Per-row weights; NaN outside ``defined``."""

    values: np.ndarray
    kind: str  # sampling | combined
    defined: np.ndarray

    def on(self, rows):
        w = self.values[rows]
        if np.any(np.isnan(w)):
            raise ValueError("weights requested on rows where they are undefined")
        return w


def sampling_weights(data, mode="empirical", p=None):
    """Inverse probability of subset membership given the outcome.

    Cases get weight 1.  Non-case subcohort members get n0/m0 in
    ``"empirical"`` mode (n0 non-cases in the cohort, m0 of them in the
    subcohort) or 1/p in ``"design"`` mode.
    """
    y = data.column(data.outcome)
    noncase = y == 0
    values = np.full(data.n, np.nan)
    if mode == "empirical":
        n0 = int(noncase.sum())
        m0 = int(np.sum(noncase & data.subcohort))
        if m0 == 0:
            raise DegenerateDesignError("no non-case subcohort members (m0 = 0)")
        w0 = n0 / m0
    elif mode == "design":
        if p is None or not 0 < p <= 1:
            raise ValueError("design mode needs a selection probability in (0, 1]")
        w0 = 1.0 / p
    else:
        raise ValueError(f"unknown weight mode {mode!r}")
    defined = data.subset.copy()
    values[defined & ~noncase] = 1.0
    values[defined & noncase] = w0
    return WeightVector(values, "sampling", defined)


def complete_record_weights(data, z_vars=DEFAULT_Z_VARS, sampling=None, analysis_vars=ANALYSIS_VARS):
    """Sampling weight times 1 / Pr(complete record | Z), on complete subset records.

    The response model is a logistic regression of the complete-record
    indicator on ``z_vars`` fitted to the subset rows.  Raises
    WeightModelError if that fit does not converge.
    """
    if sampling is None:
        sampling = sampling_weights(data)
    subset_rows = np.flatnonzero(data.subset)
    complete = np.zeros(data.n, bool)
    complete[complete_rows(data, analysis_vars)] = True
    r = complete[subset_rows].astype(float)
    values = np.full(data.n, np.nan)
    defined = complete & data.subset
    if r.min() == 1.0:
        values[defined] = sampling.values[defined]
        return WeightVector(values, "combined", defined)
    X = expand_design(data, subset_rows, list(z_vars))
    try:
        fit = glm.fit(X, r, glm.LOGISTIC)
    except glm.RankDeficientError as exc:
        raise WeightModelError(f"complete-record model: {exc}") from exc
    if not fit.converged:
        raise WeightModelError("complete-record model did not converge")
    prob = glm.predict(fit, X)
    values[subset_rows] = sampling.values[subset_rows] / prob
    values[~defined] = np.nan
    return WeightVector(values, "combined", defined)


def usable_z_vars(data, z_vars=DEFAULT_Z_VARS):
    """Subset of ``z_vars`` fully observed on the subset (others are dropped with a warning)."""
    keep = [z for z in z_vars if np.all(data.observed(z)[data.subset])]
    dropped = sorted(set(z_vars) - set(keep))
    if dropped:
        log.warning("dropping incomplete response-model predictors: %s", ", ".join(dropped))
    return tuple(keep)
