"""Synthetic case-cohort data: complete cohorts, unintended missingness, subcohort selection.

Variables are generated sequentially along the DAG
Eth -> MAge -> SEIFA -> FamHx -> NSib -> PetOwn -> AnteVD -> VDI -> FoodAllergy,
then missingness is imposed on PetOwn, AnteVD and VDI, and finally the
subcohort is drawn and the exposure is blanked outside the subset.
"""
import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources

import numpy as np
from scipy import optimize, special

from .dataset import BIS_SCHEMA, INTENDED, OBSERVED, UNINTENDED, CohortData

log = logging.getLogger(__name__)

COLS = {v.name: j for j, v in enumerate(BIS_SCHEMA)}
MISSING_VARS = ("PetOwn", "AnteVD", "VDI")
INTERCEPT_RANGE = (-20.0, 20.0)
CALIBRATION_N = 1_000_000
CALIBRATION_TOL = 0.002
#: Risks above 1 - CLAMP_EPS are clamped when clamping is enabled.
CLAMP_EPS = 1e-12


class GenerationError(ValueError):
    """Outcome risk exp(lp) exceeded 1 under the log link."""


class CalibrationError(ValueError):
    pass


def derive_seed(*keys):
    """Stable 128-bit seed from arbitrary keys (base seed, labels, indices)."""
    text = "\x1f".join(str(k) for k in keys)
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=16).digest(), "little")


def make_rng(*keys):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(derive_seed(*keys))))


# --------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class ScenarioConfig:
    label: str
    cohort_n: int
    selection_p: float
    assoc: str  # observed | enhanced
    mechanism: str  # independent | dependent
    missingness: str  # low | high
    interaction: bool = False

    def __post_init__(self):
        if (self.cohort_n, self.selection_p) not in ((1000, 0.3), (10000, 0.1), (10000, 0.2)):
            raise ValueError(f"{self.label}: unsupported (cohort_n, selection_p)")
        if self.assoc not in ("observed", "enhanced"):
            raise ValueError(f"{self.label}: assoc must be observed|enhanced")
        if self.mechanism not in ("independent", "dependent"):
            raise ValueError(f"{self.label}: mechanism must be independent|dependent")
        if self.missingness not in ("low", "high"):
            raise ValueError(f"{self.label}: missingness must be low|high")
        if self.interaction and not (self.cohort_n == 10000 and self.mechanism == "dependent"
                                     and self.missingness == "high" and self.assoc == "enhanced"):
            raise ValueError(f"{self.label}: interaction only with large/dependent/high/enhanced")

    @property
    def size_class(self):
        return "small" if self.cohort_n == 1000 else "large"


_SIZES = {1: (1000, 0.3, "low"), 2: (10000, 0.1, "low"), 3: (10000, 0.2, "low"),
          4: (1000, 0.3, "high"), 5: (10000, 0.1, "high"), 6: (10000, 0.2, "high")}


def _build_scenarios():
    out = {}
    for assoc, a in (("observed", "Obs"), ("enhanced", "Enh")):
        for mech, m in (("dependent", "dep"), ("independent", "indep")):
            for k, (n, p, miss) in _SIZES.items():
                label = f"{a}{m}{k}"
                out[label] = ScenarioConfig(label, n, p, assoc, mech, miss)
    for k in (5, 6):
        n, p, miss = _SIZES[k]
        label = f"Enhdep{k}x"
        out[label] = ScenarioConfig(label, n, p, "enhanced", "dependent", miss, True)
    return out


SCENARIOS = _build_scenarios()


def get_scenario(label):
    try:
        return SCENARIOS[label]
    except KeyError:
        raise KeyError(f"unknown scenario {label!r}; valid: {', '.join(SCENARIOS)}") from None


# --------------------------------------------------------------------------
# parameters

@dataclass(frozen=True)
class ParameterSet:
    """Generating coefficients on the linear-predictor scale.

    Each model is a dict mapping predictor label to coefficient; categorical
    models (SEIFA, NSib) hold one dict per non-reference level.  Missingness
    models are used by the dependent mechanism; ``independent_rates`` by the
    independent one.
    """

    eth_p: float
    mage: dict
    seifa: dict
    famhx: dict
    nsib: dict
    petown: dict
    antevd: dict
    vdi: dict
    outcome: dict
    miss_petown: dict = field(default_factory=dict)
    miss_antevd: dict = field(default_factory=dict)
    miss_vdi: dict = field(default_factory=dict)
    independent_rates: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.eth_p < 1.0:
            raise ValueError("eth_p must lie in (0, 1)")
        if not self.mage["sd"] > 0:
            raise ValueError("MAge residual sd must be positive")

    def to_dict(self):
        return {k: copy.deepcopy(getattr(self, k)) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**copy.deepcopy(d))


def _log_all(d):
    return {k: float(np.log(v)) for k, v in d.items() if not k.startswith("_")}


def load_published(path=None):
    """Raw published parameter table (ratio scale) as a dict."""
    if path is None:
        text = resources.files("ccmi").joinpath("data/params.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return json.loads(text)


def base_parameters(assoc="observed", interaction=False, table=None):
    """ParameterSet for an association setting, before missingness calibration.

    Ratios are converted to the log scale exactly once here; the MAge linear
    model is kept raw.  Dependent-mechanism substantive coefficients are
    doubled on the log scale under enhanced association, with the MAge
    coefficient taken from the enhanced row of the table instead.
    """
    t = load_published() if table is None else table
    enhanced = assoc == "enhanced"

    def pick(model):
        coefs = dict(model["observed"])
        if enhanced:
            coefs.update(model.get("enhanced", {}))
        return _log_all(coefs)

    outcome = dict(t["outcome"]["observed"])
    if enhanced:
        outcome.update(t["outcome"]["enhanced"])
    if interaction:
        outcome.update(t["outcome"]["interaction"])

    miss = {}
    for name in ("miss_petown", "miss_antevd", "miss_vdi"):
        obs = _log_all(t[name]["observed"])
        if enhanced:
            for k in ("FoodAllergy", "Eth"):
                obs[k] = 2.0 * obs[k]
            obs.update(_log_all(t[name].get("enhanced", {})))
        miss[name] = obs

    return ParameterSet(
        eth_p=float(t["eth"]["p"]),
        mage={"(Intercept)": float(t["mage"]["(Intercept)"]), "Eth": float(t["mage"]["Eth"]),
              "sd": float(t["mage"]["sd"])},
        seifa={k: _log_all(v) for k, v in t["seifa"].items()},
        famhx=_log_all(t["famhx"]),
        nsib={k: _log_all(v) for k, v in t["nsib"].items()},
        petown=pick(t["petown"]),
        antevd=pick(t["antevd"]),
        vdi=pick(t["vdi"]),
        outcome=_log_all(outcome),
        **miss,
    )


# --------------------------------------------------------------------------
# generation

def _linpred(coefs, cols, n):
    lp = np.full(n, coefs.get("(Intercept)", 0.0))
    for name, b in coefs.items():
        if name == "(Intercept)":
            continue
        if ":" in name:
            a, c = name.split(":")
            lp += b * cols[a] * cols[c]
        else:
            lp += b * cols[name]
    return lp


def _dummies(cols, name, x, levels=3):
    for k in range(1, levels):
        cols[f"{name}={k}"] = (x == k).astype(np.float64)


def _draw_categorical(rng, lps):
    """Baseline-category logit draw; ``lps`` are the non-reference linear predictors."""
    eta = np.column_stack([np.zeros(len(lps[0]))] + list(lps))
    prob = special.softmax(eta, axis=1)
    u = rng.random(len(lps[0]))
    cum = np.cumsum(prob, axis=1)[:, :-1]
    return (u[:, None] >= cum).sum(axis=1).astype(np.float64)


def generate_complete(params, n, rng, clamp=False):
    """Draw a complete cohort of ``n`` rows; no missing cells, subset flags unset."""
    if n < 1:
        raise ValueError("n must be >= 1")
    c = {}
    c["Eth"] = (rng.random(n) < params.eth_p).astype(np.float64)
    c["MAge"] = params.mage["(Intercept)"] + params.mage["Eth"] * c["Eth"] \
        + params.mage["sd"] * rng.standard_normal(n)
    c["SEIFA"] = _draw_categorical(rng, [_linpred(params.seifa[k], c, n) for k in ("1", "2")])
    _dummies(c, "SEIFA", c["SEIFA"])
    c["FamHx"] = (rng.random(n) < special.expit(_linpred(params.famhx, c, n))).astype(np.float64)
    c["NSib"] = _draw_categorical(rng, [_linpred(params.nsib[k], c, n) for k in ("1", "2")])
    _dummies(c, "NSib", c["NSib"])
    for name, model in (("PetOwn", params.petown), ("AnteVD", params.antevd), ("VDI", params.vdi)):
        c[name] = (rng.random(n) < special.expit(_linpred(model, c, n))).astype(np.float64)
    risk = np.exp(_linpred(params.outcome, c, n))
    over = risk > 1.0
    if over.any():
        if not clamp:
            raise GenerationError(
                f"{int(over.sum())} rows with outcome risk > 1 (max {risk.max():.4f}); "
                "check outcome coefficients or enable clamping")
        log.warning("clamped %d outcome risks above 1", int(over.sum()))
        risk = np.minimum(risk, 1.0 - CLAMP_EPS)
    c["FoodAllergy"] = (rng.random(n) < risk).astype(np.float64)
    values = np.column_stack([c[v.name] for v in BIS_SCHEMA])
    return CohortData(BIS_SCHEMA, values)


def _missing_probs(data, params):
    """Per-row P(M_petown), P(M_antevd | M_petown = 0/1), P(M_vdi | any confounder missing = 0/1)."""
    n = data.n
    cols = {k: data.column(k) for k in ("FoodAllergy", "Eth", "MAge")}
    pet = special.expit(_linpred(params.miss_petown, cols, n))

    def cond(model, key):
        base = {k: v for k, v in model.items() if k != key}
        lp = _linpred(base, cols, n)
        return special.expit(lp), special.expit(lp + model.get(key, 0.0))

    ante0, ante1 = cond(params.miss_antevd, "M_petown")
    vdi0, vdi1 = cond(params.miss_vdi, "M_conf")
    return pet, ante0, ante1, vdi0, vdi1


def _independent_patterns(rates):
    c, e, o = rates["confounder_any"], rates["exposure"], rates["overall"]
    both = c + e - o
    if min(both, o - e, o - c, 1 - o) < -1e-12:
        raise CalibrationError(f"targets {rates} are not jointly attainable")
    r = 1.0 - np.sqrt(1.0 - c)  # per-confounder rate, the two being equal
    return {"p_conf_and_exp": both, "p_conf_only": o - e, "p_exp_only": o - c,
            "p_pet_given_conf_both": r * r / c if c > 0 else 0.0,
            "p_pet_only_given_conf": r * (1 - r) / c if c > 0 else 0.0,
            "per_confounder_rate": r}


def impose_unintended(data, config, params, rng):
    """Mark PetOwn, AnteVD and VDI cells as unintended-missing.

    Dependent mechanism: sequential logistic draws, PetOwn first, then
    AnteVD given M_petown, then VDI given (M_petown or M_antevd).
    Independent mechanism: missingness patterns drawn completely at random so
    that the any-confounder, exposure and overall rates hit their targets,
    with both confounders missing at the same marginal rate.
    """
    n = data.n
    if config.mechanism == "dependent":
        pet_p, a0, a1, v0, v1 = _missing_probs(data, params)
        m_pet = rng.random(n) < pet_p
        m_ante = rng.random(n) < np.where(m_pet, a1, a0)
        m_vdi = rng.random(n) < np.where(m_pet | m_ante, v1, v0)
    else:
        pat = _independent_patterns(params.independent_rates)
        u = rng.random(n)
        t1 = pat["p_conf_and_exp"]
        t2 = t1 + pat["p_conf_only"]
        t3 = t2 + pat["p_exp_only"]
        conf = u < t2
        m_vdi = (u < t1) | ((u >= t2) & (u < t3))
        v = rng.random(n)
        pb, po = pat["p_pet_given_conf_both"], pat["p_pet_only_given_conf"]
        m_pet = conf & (v < pb + po)
        m_ante = conf & ((v < pb) | (v >= pb + po))
    values = data.values.copy()
    status = data.status.copy()
    for name, mask in (("PetOwn", m_pet), ("AnteVD", m_ante), ("VDI", m_vdi)):
        j = COLS[name]
        values[mask, j] = np.nan
        status[mask, j] = UNINTENDED
    return data.replace(values=values, status=status)


def select_subcohort(data, p, rng):
    """Bernoulli(p) subcohort; subset = subcohort or case; exposure intended-missing elsewhere."""
    n = data.n
    subcohort = rng.random(n) < p
    y = data.column(data.outcome)
    subset = subcohort | (y == 1)
    j = data.col(data.exposure)
    values = data.values.copy()
    status = data.status.copy()
    values[~subset, j] = np.nan
    status[~subset, j] = INTENDED
    return data.replace(values=values, status=status, subset=subset, subcohort=subcohort)


@dataclass(frozen=True)
class Replication:
    """One simulated dataset: the pre-missingness cohort and the observed case-cohort data."""

    complete: CohortData
    observed: CohortData


def simulate_dataset(config, params, rng, clamp=False):
    complete = generate_complete(params, config.cohort_n, rng, clamp=clamp)
    with_missing = impose_unintended(complete, config, params, rng)
    observed = select_subcohort(with_missing, config.selection_p, rng)
    # the complete cohort carries the same subset flags, for convenience
    complete = complete.replace(subset=observed.subset, subcohort=observed.subcohort)
    return Replication(complete, observed)


# --------------------------------------------------------------------------
# calibration

def missingness_rates(data, params, config):
    """Expected full-cohort missingness proportions given the cohort covariates.

    Exact conditional expectations (no Bernoulli noise) for the dependent
    mechanism; the targets themselves for the independent one.
    """
    if config.mechanism == "independent":
        return dict(params.independent_rates)
    pet, a0, a1, v0, v1 = _missing_probs(data, params)
    p_none_conf = (1 - pet) * (1 - a0)
    p_conf = 1 - p_none_conf
    return {
        "confounder_any": float(np.mean(p_conf)),
        "exposure": float(np.mean(p_conf * v1 + p_none_conf * v0)),
        "overall": float(np.mean(1 - p_none_conf * (1 - v0))),
    }


def _solve(f, target, lo=INTERCEPT_RANGE[0], hi=INTERCEPT_RANGE[1]):
    """Root of the monotone f(x) = target on [lo, hi] (bracketed bisection/Brent)."""
    flo, fhi = f(lo) - target, f(hi) - target
    if flo * fhi > 0:
        raise CalibrationError(
            f"target {target:.4f} unreachable on [{lo}, {hi}] "
            f"(range {min(flo, fhi) + target:.4f}..{max(flo, fhi) + target:.4f})")
    return optimize.brentq(lambda x: f(x) - target, lo, hi, xtol=1e-7)


def anchors_key(config):
    if config.interaction:
        return "interaction"
    return f"{config.assoc}_{config.missingness}"


def calibrate_intercepts(params, config, targets=None, seed=20240101, n=CALIBRATION_N, cohort=None):
    """Choose the missingness intercepts so the full-cohort targets are met.

    Dependent mechanism: nu0 and tau4 stay at their published anchors;
    tau0 is bisected to the any-confounder rate, then omega4 (outer) and
    omega0 (inner) are bisected to the overall and exposure rates on a
    calibration cohort of ``n`` rows.  Independent mechanism: the rates are
    stored directly.  A zero target switches that model off entirely.
    """
    table = load_published()
    if targets is None:
        targets = table["missingness_targets"][config.missingness]
    targets = {k: float(v) for k, v in targets.items()}
    targets.setdefault("overall", targets["confounder_any"] + targets["exposure"]
                       - targets["confounder_any"] * targets["exposure"])
    if config.mechanism == "independent":
        _independent_patterns(targets)
        return replace(params, independent_rates=targets)

    anchors = table["missingness_anchors"][anchors_key(config)]
    if cohort is None:
        cohort = generate_complete(params, n, make_rng("calibration", seed, config.label))
    mp = dict(params.miss_petown)
    ma = dict(params.miss_antevd)
    mv = dict(params.miss_vdi)
    mp["(Intercept)"] = anchors["nu0"]
    ma["M_petown"] = anchors["tau4"]
    cols = {k: cohort.column(k) for k in ("FoodAllergy", "Eth", "MAge")}
    n_cal = cohort.n

    def lp_without(model, *drop):
        return _linpred({k: v for k, v in model.items() if k not in drop}, cols, n_cal)

    if targets["confounder_any"] <= 0:
        mp["(Intercept)"] = -np.inf
        ma["(Intercept)"] = -np.inf
        p_conf = np.zeros(n_cal)
    else:
        pet = special.expit(_linpred(mp, cols, n_cal))
        lp_a = lp_without(ma, "(Intercept)", "M_petown")

        def p_conf_at(t0):
            return 1 - (1 - pet) * (1 - special.expit(lp_a + t0))

        ma["(Intercept)"] = _solve(lambda t0: p_conf_at(t0).mean(), targets["confounder_any"])
        p_conf = p_conf_at(ma["(Intercept)"])

    if targets["exposure"] <= 0:
        mv["(Intercept)"] = -np.inf
        mv["M_conf"] = 0.0
    else:
        lp_v = lp_without(mv, "(Intercept)", "M_conf")

        def expo(w0, w4):
            return np.mean(p_conf * special.expit(lp_v + w0 + w4)
                           + (1 - p_conf) * special.expit(lp_v + w0))

        def solve_w0(w4):
            return _solve(lambda w0: expo(w0, w4), targets["exposure"])

        def overall(w4):
            w0 = solve_w0(w4)
            return np.mean(1 - (1 - p_conf) * (1 - special.expit(lp_v + w0)))

        w4 = _solve(overall, targets["overall"], lo=-10.0, hi=10.0)
        mv["(Intercept)"] = solve_w0(w4)
        mv["M_conf"] = w4

    calibrated = replace(params, miss_petown=mp, miss_antevd=ma, miss_vdi=mv)
    got = missingness_rates(cohort, calibrated, config)
    for k, v in targets.items():
        if abs(got[k] - v) > CALIBRATION_TOL:
            raise CalibrationError(f"{config.label}: {k} = {got[k]:.4f}, target {v:.4f}")
    return calibrated


@lru_cache(maxsize=64)
def scenario_parameters(label, seed=20240101, n=CALIBRATION_N):
    """Calibrated ParameterSet for a named scenario (cached per process)."""
    config = get_scenario(label)
    params = base_parameters(config.assoc, config.interaction)
    return calibrate_intercepts(params, config, seed=seed, n=n)


def calibration_report(params, config):
    """Calibrated intercepts next to the published anchors, for auditing."""
    anchors = load_published()["missingness_anchors"][anchors_key(config)]
    if config.mechanism == "independent":
        return {"mechanism": "independent", "rates": dict(params.independent_rates),
                "patterns": _independent_patterns(params.independent_rates)}
    got = {"nu0": params.miss_petown["(Intercept)"], "tau0": params.miss_antevd["(Intercept)"],
           "tau4": params.miss_antevd.get("M_petown", 0.0), "omega0": params.miss_vdi["(Intercept)"],
           "omega4": params.miss_vdi.get("M_conf", 0.0)}
    return {"mechanism": "dependent", "calibrated": got, "published": anchors}


# --------------------------------------------------------------------------
# case-study stand-in

STANDIN_N = 786
STANDIN_P = 0.30
# extra completely-at-random missingness on otherwise complete variables
STANDIN_MCAR = {"Eth": 0.004, "FamHx": 0.012, "SEIFA": 0.018, "MAge": 0.001}


def case_study_standin(seed=0, n=STANDIN_N, p=STANDIN_P, label="Obsdep1"):
    """Synthetic case-cohort dataset shaped like the motivating cohort.

    Generated with the calibrated parameters of ``label``; on top of the
    scenario's missingness, a few cells of Eth, FamHx, SEIFA and MAge are
    deleted completely at random so every imputation model type is exercised.
    """
    config = get_scenario(label)
    params = scenario_parameters(label)
    rng = make_rng(seed, "standin")
    complete = generate_complete(params, n, rng)
    data = impose_unintended(complete, config, params, rng)
    values = data.values.copy()
    status = data.status.copy()
    for name, rate in STANDIN_MCAR.items():
        j = data.col(name)
        hit = rng.random(n) < rate
        values[hit, j] = np.nan
        status[hit, j] = UNINTENDED
    data = data.replace(values=values, status=status)
    return select_subcohort(data, p, rng)


STANDIN_SEED = 1074


def load_standin():
    """The bundled stand-in dataset (``case_study_standin(seed=STANDIN_SEED)``)."""
    from .dataset import read_csv
    with resources.as_file(resources.files("ccmi").joinpath("data/bis_standin.csv")) as path:
        return read_csv(path)
