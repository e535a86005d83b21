"""The analysis arms: complete-data check, CCA, IPW and the MI variants.

Every arm estimates the log risk ratio of the exposure from a modified
Poisson regression (log link, robust sandwich variance) adjusting for the
confounders.
"""
import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from . import glm, mi
from .datagen import derive_seed
from .dataset import complete_rows, expand_design
from .weights import (ANALYSIS_VARS, DEFAULT_Z_VARS, DegenerateDesignError, WeightModelError,
                      complete_record_weights, sampling_weights, usable_z_vars)

log = logging.getLogger(__name__)

ANALYSIS_TERMS = ANALYSIS_VARS
N_ANALYSIS_PARAMS = 8
CASE_STUDY_P = 0.30
Z95 = stats.norm.ppf(0.975)

METHOD_NAMES = (
    "CompleteData", "CCA", "Full-IPW",
    "MI-Sub-WO", "MI-Sub-WM", "MI-Sub-WX", "MI-Sub-SS",
    "MI-Int-WO", "MI-Int-WM", "MI-Int-WX", "MI-Int-SS",
    "MI-Full",
)


@dataclass(frozen=True)
class MethodSpec:
    name: str
    imputation: mi.ImputationSpec = None
    weight_mode: str = "empirical"  # empirical | design
    selection_p: float = None
    z_vars: tuple = DEFAULT_Z_VARS

    @property
    def is_mi(self):
        return self.imputation is not None


def method_spec(name, m=50, cycles=10, weight_mode="empirical", selection_p=None,
                predictor_set=mi.DEFAULT_PREDICTORS):
    """Build the MethodSpec for one of ``METHOD_NAMES``."""
    if name not in METHOD_NAMES:
        raise ValueError(f"unknown method {name!r}; valid: {', '.join(METHOD_NAMES)}")
    imp = None
    if name == "MI-Full":
        imp = mi.ImputationSpec("full_cohort", "plain", m, cycles, tuple(predictor_set))
    elif name.startswith("MI-"):
        _, arm, variant = name.split("-")
        sample = "subset_only" if arm == "Sub" else "full_cohort"
        imp = mi.ImputationSpec(sample, variant, m, cycles, tuple(predictor_set))
    return MethodSpec(name, imp, weight_mode, selection_p)


def all_specs(**kw):
    return [method_spec(name, **kw) for name in METHOD_NAMES]


@dataclass(frozen=True)
class MethodResult:
    method: str
    estimate: float
    se: float
    ci: tuple
    converged: bool
    n_analysis: int
    failure: str = None
    df: float = np.inf

    @property
    def rr(self):
        return float(np.exp(self.estimate))


def _failed(name, failure, n=0):
    return MethodResult(name, np.nan, np.nan, (np.nan, np.nan), False, n, failure)


class AnalysisFitError(RuntimeError):
    pass


def fit_analysis(data, rows, weights=None):
    """Modified Poisson fit of the analysis model on ``rows``.

    Returns the exposure coefficient and its robust variance.
    """
    X = expand_design(data, rows, ANALYSIS_TERMS)
    y = data.column(data.outcome)[rows]
    fit = glm.fit(X, y, glm.POISSON, weights)
    if not fit.converged:
        raise AnalysisFitError("analysis model did not converge")
    cov = glm.sandwich_cov(fit, X, y, weights)
    j = X.columns.index(data.exposure)
    return float(fit.coef[j]), float(cov[j, j])


def _single(name, data, rows, weights):
    est, var = fit_analysis(data, rows, weights)
    se = float(np.sqrt(var))
    return MethodResult(name, est, se, (est - Z95 * se, est + Z95 * se), True, len(rows))


def _sampling(data, spec):
    return sampling_weights(data, spec.weight_mode, spec.selection_p)


def _run(data, spec, seed, complete):
    name = spec.name
    if name == "CompleteData":
        source = complete if complete is not None else data
        rows = np.arange(source.n)
        if len(complete_rows(source, ANALYSIS_VARS)) != source.n:
            return _failed(name, "data: analysis variables not fully observed")
        return _single(name, source, rows, None)

    if name == "CCA":
        rows = np.intersect1d(np.flatnonzero(data.subset), complete_rows(data, ANALYSIS_VARS))
        return _single(name, data, rows, _sampling(data, spec).on(rows))

    if name == "Full-IPW":
        z_vars = usable_z_vars(data, spec.z_vars)
        w = complete_record_weights(data, z_vars, _sampling(data, spec))
        rows = np.flatnonzero(w.defined)
        return _single(name, data, rows, w.on(rows))

    imp = replace(spec.imputation, seed=derive_seed(seed, name))
    unweighted = name == "MI-Full"
    sw = None if unweighted else _sampling(data, spec)
    imputed = mi.fcs_impute(data, imp, sw)
    rows = np.arange(data.n) if unweighted else np.flatnonzero(data.subset)
    w = None if unweighted else sw.on(rows)
    ests, variances = [], []
    for completed in imputed.datasets:
        est, var = fit_analysis(completed, rows, w)
        ests.append(est)
        variances.append(var)
    pooled = mi.pool_rubin(ests, variances, complete_df=len(rows) - N_ANALYSIS_PARAMS)
    return MethodResult(name, pooled.estimate, pooled.se, tuple(map(float, pooled.ci)), True,
                        len(rows), None, pooled.df)


def run_method(data, spec, seed=0, complete=None):
    """Run one analysis arm.

    Parameters
    ----------
    data : CohortData
        Observed case-cohort data.
    spec : MethodSpec
    seed : int
        Base seed; MI arms derive their streams from (seed, method name).
    complete : CohortData, optional
        Pre-missingness cohort, used by ``CompleteData``.

    Returns
    -------
    MethodResult
        ``converged`` is False with ``failure`` naming the failing component
        when weights, imputation or the analysis fit break down.
    """
    try:
        return _run(data, spec, seed, complete)
    except mi.ImputationNonConvergence as exc:
        return _failed(spec.name, f"imputation: {exc}")
    except (DegenerateDesignError, WeightModelError) as exc:
        return _failed(spec.name, f"weights: {exc}")
    except AnalysisFitError as exc:
        return _failed(spec.name, f"analysis: {exc}")
    except (glm.RankDeficientError, np.linalg.LinAlgError) as exc:
        return _failed(spec.name, f"analysis: {exc}")


def run_case_study(data, specs=None, seed=0, m=50, selection_p=CASE_STUDY_P):
    """Apply each arm to a case-study dataset with design-based sampling weights.

    ``CompleteData`` is skipped when the exposure is never fully observed.
    """
    if specs is None:
        specs = all_specs(m=m)
    out = []
    for spec in specs:
        spec = replace(spec, weight_mode="design", selection_p=selection_p)
        if spec.name == "CompleteData" and np.any(data.status[:, data.col(data.exposure)]):
            continue
        out.append(run_method(data, spec, seed))
    return out


def forest_table(results):
    """Rows of (method, rr, ci_low, ci_high, converged) on the ratio scale."""
    return [(r.method, float(np.exp(r.estimate)), float(np.exp(r.ci[0])),
             float(np.exp(r.ci[1])), r.converged) for r in results]
