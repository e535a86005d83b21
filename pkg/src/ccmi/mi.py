"""Fully conditional specification (chained equations) imputation and Rubin's rules.

Four ways of carrying the case-cohort sampling weights into the univariate
imputation models are supported:

``WO``
    outcome included as a predictor (a proxy for the weight);
``WM``
    each univariate model fitted with the sampling weights;
``WX``
    ``WO`` plus outcome x analysis-variable interactions;
``SS``
    the whole FCS run repeated separately among cases and non-cases.

``plain`` is ``WO`` on the full cohort, for the unweighted full-MI analysis.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from . import glm
from .datagen import make_rng
from .dataset import BIS_SCHEMA

log = logging.getLogger(__name__)

DEFAULT_PREDICTORS = tuple(v.name for v in BIS_SCHEMA)
VARIANTS = ("WO", "WM", "WX", "SS", "plain")


class ImputationNonConvergence(RuntimeError):
    """A univariate imputation model failed; the replication should be excluded."""

    def __init__(self, variant, imputation, cycle, variable, reason="not converged"):
        super().__init__(f"{variant}: imputation {imputation}, cycle {cycle}, "
                         f"variable {variable}: {reason}")
        self.variant = variant
        self.imputation = imputation
        self.cycle = cycle
        self.variable = variable


@dataclass(frozen=True)
class ImputationSpec:
    sample: str  # subset_only | full_cohort
    variant: str
    m: int = 50
    cycles: int = 10
    predictor_set: tuple = DEFAULT_PREDICTORS
    seed: int = 0
    # False imputes from the MLE itself (no parameter uncertainty); for checks only
    draw_parameters: bool = True

    def __post_init__(self):
        if self.sample not in ("subset_only", "full_cohort"):
            raise ValueError(f"unknown imputation sample {self.sample!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "plain" and self.sample != "full_cohort":
            raise ValueError("the plain variant is for full-cohort imputation only")
        if self.m < 2 or self.cycles < 1:
            raise ValueError("need m >= 2 and cycles >= 1")


@dataclass
class ImputedSet:
    datasets: list
    diagnostics: list = field(default_factory=list)
    rows: np.ndarray = None

    def diagnostics_csv(self):
        lines = ["imputation,cycle,variable,converged,iterations"]
        lines += [f"{i},{c},{v},{int(ok)},{it}" for i, c, v, ok, it in self.diagnostics]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class PooledResult:
    estimate: float
    within_var: float
    between_var: float
    total_var: float
    df: float
    ci: tuple
    m: int

    @property
    def se(self):
        return float(np.sqrt(self.total_var))


def pool_rubin(estimates, variances, complete_df=None, level=0.95):
    """Combine m point estimates and variances with Rubin's rules.

    Degrees of freedom use the Barnard-Rubin small-sample adjustment when
    ``complete_df`` is finite and Rubin's original formula otherwise.
    """
    q = np.asarray(estimates, dtype=float)
    u = np.asarray(variances, dtype=float)
    m = q.size
    if m < 2 or u.size != m:
        raise ValueError("need m >= 2 estimates with matching variances")
    if np.any(u <= 0):
        raise ValueError("variances must be positive")
    qbar = float(q.mean())
    W = float(u.mean())
    B = float(q.var(ddof=1))
    if B < 1e-300 or np.ptp(q) == 0.0:
        B = 0.0
    T = W + (1.0 + 1.0 / m) * B
    if B == 0.0:
        df_old = np.inf
    else:
        r = (1.0 + 1.0 / m) * B / W
        try:
            df_old = (m - 1) * (1.0 + 1.0 / r) ** 2
        except OverflowError:
            df_old = np.inf
    if complete_df is None or not np.isfinite(complete_df):
        df = df_old
    else:
        lam = (1.0 + 1.0 / m) * B / T
        df_obs = (complete_df + 1.0) / (complete_df + 3.0) * complete_df * (1.0 - lam)
        df = df_obs if not np.isfinite(df_old) else 1.0 / (1.0 / df_old + 1.0 / df_obs)
    crit = stats.norm.ppf(0.5 + level / 2) if not np.isfinite(df) else stats.t.ppf(0.5 + level / 2, df)
    half = crit * np.sqrt(T)
    return PooledResult(qbar, W, B, T, float(df), (qbar - half, qbar + half), m)


# --------------------------------------------------------------------------
# FCS machinery

class _Layout:
    """Column layout of the working matrix used during one FCS run."""

    def __init__(self, data, predictors, variant):
        self.data = data
        self.outcome = data.outcome
        self.blocks = {}
        names = ["(Intercept)"]
        for v in predictors:
            var = data.var(v)
            start = len(names)
            if var.kind == "categorical":
                names += [f"{v}={k}" for k in range(1, var.levels)]
            else:
                names.append(v)
            self.blocks[v] = list(range(start, len(names)))
        self.interactions = {}
        if variant == "WX":
            ycol = self.blocks[self.outcome][0]
            for v in predictors:
                role = data.var(v).role
                if role in ("exposure", "confounder"):
                    start = len(names)
                    names += [f"{self.outcome}:{names[c]}" for c in self.blocks[v]]
                    self.interactions[v] = (list(range(start, len(names))), ycol)
        self.names = names
        self.predictors = tuple(predictors)
        self.variant = variant

    def fill(self, Z, v, x):
        var = self.data.var(v)
        cols = self.blocks[v]
        if var.kind == "categorical":
            for k, c in enumerate(cols, start=1):
                Z[:, c] = x == k
        else:
            Z[:, cols[0]] = x
        if v in self.interactions:
            icols, ycol = self.interactions[v]
            for c, ic in zip(cols, icols):
                Z[:, ic] = Z[:, c] * Z[:, ycol]

    def model_columns(self, target):
        drop = {target}
        if self.variant == "SS":
            drop.add(self.outcome)
        cols = [0]
        for v in self.predictors:
            if v not in drop:
                cols += self.blocks[v]
        for v, (icols, _) in self.interactions.items():
            if v != target:
                cols += icols
        return np.array(cols)


def _family_for(var):
    if var.kind == "binary":
        return glm.LOGISTIC
    if var.kind == "categorical":
        return glm.ordinal(var.levels)
    return glm.LINEAR


def _draw_coef(fit, rng, n_obs):
    """Coefficients (and residual sd for linear) from the approximate posterior."""
    cov = fit.model_cov
    try:
        L = np.linalg.cholesky(0.5 * (cov + cov.T))
    except np.linalg.LinAlgError:
        return None, None
    z = rng.standard_normal(L.shape[0])
    if fit.family.name == "linear":
        df = max(n_obs - L.shape[0], 1)
        sigma_hat = np.sqrt(fit.dispersion)
        sigma = sigma_hat * np.sqrt(df / rng.chisquare(df))
        return fit.coef + (sigma / sigma_hat) * (L @ z), sigma
    beta = fit.coef + L @ z
    if fit.family.name == "ordinal":
        k = fit.family.k - 1
        beta[-k:] = np.sort(beta[-k:])
    return beta, None


def _draw_values(family, X, beta, sigma, rng):
    n = X.shape[0]
    if family.name == "logistic":
        return (rng.random(n) < special.expit(X @ beta)).astype(np.float64)
    if family.name == "linear":
        return X @ beta + sigma * rng.standard_normal(n)
    ps = X.shape[1] - 1
    cum = special.expit(beta[ps:][None, :] - (X[:, 1:] @ beta[:ps])[:, None])
    u = rng.random(n)
    return (u[:, None] >= cum).sum(axis=1).astype(np.float64)


def _fcs_stratum(data, rows, spec, weights, rng, imputation, diagnostics, out_values):
    """Run one FCS chain on ``rows`` and write imputations into ``out_values``."""
    layout = _Layout(data, spec.predictor_set, spec.variant)
    V = data.values[rows]
    missing = {v: np.flatnonzero(np.isnan(V[:, data.col(v)])) for v in spec.predictor_set}
    targets = sorted((v for v in spec.predictor_set if missing[v].size),
                     key=lambda v: (missing[v].size, spec.predictor_set.index(v)))
    if len(rows) == 0:
        raise ImputationNonConvergence(spec.variant, imputation, 0, data.exposure, "empty stratum")
    if not targets:
        return

    cur = {}
    for v in spec.predictor_set:
        x = V[:, data.col(v)].copy()
        mis = missing[v]
        if mis.size:
            obs_vals = x[~np.isnan(x)]
            if obs_vals.size == 0:
                raise ImputationNonConvergence(spec.variant, imputation, 0, v, "no observed values")
            x[mis] = rng.choice(obs_vals, size=mis.size)
        cur[v] = x
    Z = np.empty((len(rows), len(layout.names)))
    Z[:, 0] = 1.0
    for v in spec.predictor_set:
        layout.fill(Z, v, cur[v])

    w = None if weights is None else np.ascontiguousarray(weights)
    plan = []
    for v in targets:
        obs = np.setdiff1d(np.arange(len(rows)), missing[v], assume_unique=True)
        plan.append((v, obs, missing[v], layout.model_columns(v), _family_for(data.var(v))))

    starts = {}
    for cycle in range(1, spec.cycles + 1):
        for v, obs, mis, cols, family in plan:
            X = Z[np.ix_(obs, cols)]
            y = cur[v][obs]
            try:
                fit = glm.fit(X, y, family, None if w is None else w[obs], start=starts.get(v))
            except glm.RankDeficientError as exc:
                raise ImputationNonConvergence(spec.variant, imputation, cycle, v, str(exc)) from None
            diagnostics.append((imputation, cycle, v, fit.converged, fit.iterations))
            if not fit.converged:
                reason = "separation" if fit.separated else "iteration limit"
                raise ImputationNonConvergence(spec.variant, imputation, cycle, v, reason)
            starts[v] = fit.coef
            if spec.draw_parameters:
                beta, sigma = _draw_coef(fit, rng, len(obs))
            else:
                beta, sigma = fit.coef, np.sqrt(fit.dispersion)
            if beta is None:
                raise ImputationNonConvergence(spec.variant, imputation, cycle, v,
                                               "covariance not positive definite")
            cur[v][mis] = _draw_values(family, Z[np.ix_(mis, cols)], beta, sigma, rng)
            layout.fill(Z, v, cur[v])

    for v in targets:
        out_values[rows[missing[v]], data.col(v)] = cur[v][missing[v]]


def imputation_rows(data, spec):
    return np.flatnonzero(data.subset) if spec.sample == "subset_only" else np.arange(data.n)


def fcs_impute(data, spec, weights=None):
    """Multiply impute ``data`` by chained equations.

    Parameters
    ----------
    data : CohortData
    spec : ImputationSpec
    weights : WeightVector, optional
        Sampling weights; required for ``WM``.  Rows where the weights are
        undefined (outside the subset) get weight 1.

    Returns
    -------
    ImputedSet
        ``spec.m`` completed datasets.  Only cells on the imputation sample
        are filled; statuses keep recording which cells were missing.

    Raises
    ------
    ImputationNonConvergence
        When any univariate model fails in any cycle.
    """
    rows = imputation_rows(data, spec)
    sub = data.values[rows][:, [data.col(v) for v in spec.predictor_set]]
    if not np.isnan(sub).any():
        return ImputedSet([data] * spec.m, [], rows)

    w_rows = None
    if spec.variant == "WM":
        if weights is None:
            raise ValueError("WM imputation needs sampling weights")
        w_rows = np.where(np.isnan(weights.values[rows]), 1.0, weights.values[rows])

    if spec.variant == "SS":
        y = data.column(data.outcome)[rows]
        strata = [rows[y == 1], rows[y == 0]]
    else:
        strata = [rows]

    datasets, diagnostics = [], []
    for j in range(1, spec.m + 1):
        rng = make_rng("fcs", spec.seed, j)
        values = data.values.copy()
        for stratum in strata:
            sw = None
            if w_rows is not None:
                sw = w_rows[np.searchsorted(rows, stratum)]
            _fcs_stratum(data, stratum, spec, sw, rng, j, diagnostics, values)
        datasets.append(data.replace(values=values))
    return ImputedSet(datasets, diagnostics, rows)
