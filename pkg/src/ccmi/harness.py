"""Replication loop, truth values and performance measures with Monte Carlo SEs."""
import csv
import json
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np
from threadpoolctl import threadpool_limits

from . import datagen, glm, methods
from .dataset import expand_design

log = logging.getLogger(__name__)

RECORD_COLUMNS = ("scenario", "rep", "method", "estimate", "se", "ci_low", "ci_high", "converged")
SUMMARY_COLUMNS = ("scenario", "method", "n_used", "rel_bias_pct", "rel_bias_mcse", "emp_se",
                   "emp_se_mcse", "mod_se", "rel_se_error_pct", "coverage_pct", "coverage_mcse",
                   "convergence_rate_pct")


class PartialResultsWarning(UserWarning):
    """Fewer successful replications than requested within the attempt budget."""


@dataclass(frozen=True)
class ReplicationRecord:
    scenario: str
    rep: int
    method: str
    estimate: float
    se: float
    ci_low: float
    ci_high: float
    converged: bool


@dataclass
class ScenarioRun:
    label: str
    records: list
    attempts: int
    successes: int
    arm_converged: dict = field(default_factory=dict)

    def convergence_rates(self):
        """Per-arm convergence percentage over all attempts."""
        return {k: 100.0 * v / self.attempts for k, v in self.arm_converged.items()}


def default_max_generated(config):
    """Attempt budget: 3000 for small high-missingness, 2320 other small, 2056 large."""
    if config.cohort_n == 1000:
        return 3000 if config.missingness == "high" else 2320
    return 2056


def _fmt(x):
    return "NA" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def replicate(config, params, index, base_seed, method_specs):
    """Simulate replication ``index`` and run every arm on it.

    Returns a list of MethodResult in ``method_specs`` order.  Everything is
    determined by (base_seed, scenario label, index).
    """
    rng = datagen.make_rng(base_seed, config.label, "rep", index)
    rep = datagen.simulate_dataset(config, params, rng)
    seed = datagen.derive_seed(base_seed, config.label, "arms", index)
    return [methods.run_method(rep.observed, spec, seed, rep.complete) for spec in method_specs]


def _replicate_task(args):
    config, params, index, base_seed, specs = args
    with threadpool_limits(limits=1):
        results = replicate(config, params, index, base_seed, specs)
    return index, [(r.method, r.estimate, r.se, r.ci[0], r.ci[1], r.converged) for r in results]


def _load_checkpoint(path):
    done = {}
    if path and os.path.exists(path):
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    item = json.loads(line)
                    done[item["index"]] = [tuple(r) for r in item["results"]]
    return done


def run_scenario(config, reps, max_generated=None, base_seed=0, workers=1, m=50, cycles=10,
                 method_names=methods.METHOD_NAMES, params=None, checkpoint=None, progress=None):
    """Run replications until ``reps`` succeed or ``max_generated`` are attempted.

    A replication succeeds only if every arm converged.  Successes are taken
    in index order, so the output does not depend on ``workers``.  With
    ``checkpoint`` set, per-index results are appended to that JSON-lines
    file and reused when the run is resumed.
    """
    if max_generated is None:
        max_generated = default_max_generated(config)
    if reps > max_generated:
        raise ValueError("reps must not exceed max_generated")
    if params is None:
        params = datagen.scenario_parameters(config.label)
    specs = [methods.method_spec(name, m=m, cycles=cycles) for name in method_names]

    results = _load_checkpoint(checkpoint)
    ckpt = open(checkpoint, "a") if checkpoint else None

    def store(index, rows):
        results[index] = rows
        if ckpt:
            ckpt.write(json.dumps({"index": index, "results": rows}) + "\n")
            ckpt.flush()

    def cutoff():
        # index after which no attempt is needed, or None if not reached yet
        wins = 0
        for i in range(max_generated):
            if i not in results:
                return None
            wins += all(r[5] for r in results[i])
            if wins == reps:
                return i + 1
        return max_generated

    try:
        batch = max(workers, 1) * 2
        nxt = 0
        pool = ProcessPoolExecutor(workers) if workers > 1 else None
        try:
            while cutoff() is None:
                todo = []
                while len(todo) < batch and nxt < max_generated:
                    if nxt not in results:
                        todo.append(nxt)
                    nxt += 1
                if not todo:
                    break
                tasks = [(config, params, i, base_seed, specs) for i in todo]
                mapped = pool.map(_replicate_task, tasks) if pool else map(_replicate_task, tasks)
                for index, rows in mapped:
                    store(index, rows)
                    if progress:
                        progress(index, rows)
        finally:
            if pool:
                pool.shutdown()
    finally:
        if ckpt:
            ckpt.close()

    attempts = cutoff() or max_generated
    records, successes = [], 0
    arm_ok = {name: 0 for name in method_names}
    for i in range(attempts):
        rows = results[i]
        for row in rows:
            arm_ok[row[0]] += bool(row[5])
        if all(r[5] for r in rows):
            successes += 1
            records += [ReplicationRecord(config.label, i, *row) for row in rows]
    if successes < reps:
        warnings.warn(f"{config.label}: only {successes} of {reps} replications succeeded "
                      f"in {attempts} attempts", PartialResultsWarning, stacklevel=2)
    return ScenarioRun(config.label, records, attempts, successes, arm_ok)


# --------------------------------------------------------------------------
# truth

@dataclass(frozen=True)
class Truth:
    value: float
    mcse: float
    populations: int = 0
    pop_size: int = 0
    seed: int = None
    n_failed: int = 0


def estimate_truth(config, populations=100, pop_size=100_000, base_seed=0, params=None):
    """True log RR for the analysis model.

    Without an outcome interaction the analysis model is correctly specified
    and the generating exposure coefficient is returned.  Otherwise the mean
    coefficient from unweighted fits to ``populations`` simulated cohorts.
    """
    if params is None:
        params = datagen.base_parameters(config.assoc, config.interaction)
    if not config.interaction:
        return Truth(float(params.outcome["VDI"]), 0.0)
    ests, failed = [], 0
    for k in range(populations):
        rng = datagen.make_rng(base_seed, config.label, "truth", k)
        pop = datagen.generate_complete(params, pop_size, rng)
        X = expand_design(pop, None, methods.ANALYSIS_TERMS)
        fit = glm.fit(X, pop.column(pop.outcome), glm.POISSON)
        if not fit.converged:
            failed += 1
            continue
        ests.append(fit.coef[X.columns.index(pop.exposure)])
    ests = np.asarray(ests)
    mcse = float(ests.std(ddof=1) / np.sqrt(ests.size)) if ests.size > 1 else np.nan
    return Truth(float(ests.mean()), mcse, populations, pop_size, base_seed, failed)


def load_truth(label=None, path=None):
    """Persisted truth values, keyed by scenario label."""
    if path is None:
        text = resources.files("ccmi").joinpath("data/truth.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    table = {k: Truth(**v) for k, v in json.loads(text).items() if not k.startswith("_")}
    return table if label is None else table[label]


def truth_for(config):
    """Truth for ``config``: generating value, or the persisted oracle for interaction scenarios."""
    if config.interaction:
        return load_truth(config.label)
    return estimate_truth(config)


# --------------------------------------------------------------------------
# performance measures

@dataclass(frozen=True)
class PerformanceSummary:
    scenario: str
    method: str
    n_used: int
    bias: float
    bias_mcse: float
    rel_bias_pct: float
    rel_bias_mcse: float
    emp_se: float
    emp_se_mcse: float
    mod_se: float
    mod_se_mcse: float
    rel_se_error_pct: float
    rel_se_error_mcse: float
    coverage_pct: float
    coverage_mcse: float
    convergence_rate_pct: float = float("nan")
    degenerate: bool = False

    def csv_row(self):
        return [self.scenario, self.method, str(self.n_used)] + [
            _fmt(getattr(self, c)) for c in SUMMARY_COLUMNS[3:]]


def performance(estimates, ses, ci_low, ci_high, theta):
    """Performance measures and their Monte Carlo SEs for one method.

    Model-based SE is the square root of the mean variance.  Returns a dict
    of the fields of PerformanceSummary that depend on the estimates.
    """
    est = np.asarray(estimates, float)
    se = np.asarray(ses, float)
    n = est.size
    if n < 2:
        raise ValueError("need at least two replications")
    constant = np.ptp(est) == 0.0
    mean = est[0] if constant else est.mean()
    emp_se = 0.0 if constant else float(est.std(ddof=1))
    bias = float(mean - theta)
    bias_mcse = emp_se / math.sqrt(n)
    var = se ** 2
    mod_se = float(math.sqrt(var.mean()))
    var_var = float(var.var(ddof=1))
    mod_se_mcse = math.sqrt(var_var / (4.0 * n * mod_se ** 2)) if mod_se > 0 else float("nan")
    emp_se_mcse = emp_se / math.sqrt(2.0 * (n - 1))
    degenerate = emp_se == 0.0
    if degenerate:
        rel_se, rel_se_mcse = float("nan"), float("nan")
    else:
        ratio = mod_se / emp_se
        rel_se = 100.0 * (ratio - 1.0)
        rel_se_mcse = 100.0 * ratio * math.sqrt(var_var / (4.0 * n * mod_se ** 4)
                                                + 1.0 / (2.0 * (n - 1)))
    covered = (np.asarray(ci_low) <= theta) & (theta <= np.asarray(ci_high))
    c = float(covered.mean())
    if theta == 0:
        log.warning("true value is zero: relative bias undefined, reporting absolute bias")
        rel, rel_mcse = float("nan"), float("nan")
    else:
        rel = 100.0 * bias / theta
        rel_mcse = 100.0 * bias_mcse / abs(theta)
    return dict(n_used=n, bias=bias, bias_mcse=bias_mcse, rel_bias_pct=rel, rel_bias_mcse=rel_mcse,
                emp_se=emp_se, emp_se_mcse=emp_se_mcse, mod_se=mod_se, mod_se_mcse=mod_se_mcse,
                rel_se_error_pct=rel_se, rel_se_error_mcse=rel_se_mcse,
                coverage_pct=100.0 * c, coverage_mcse=100.0 * math.sqrt(c * (1.0 - c) / n),
                degenerate=degenerate)


def summarize(records, truth, convergence=None):
    """Summaries per (scenario, method), sorted by scenario then method order.

    Parameters
    ----------
    records : iterable of ReplicationRecord
        Non-converged records are ignored.
    truth : dict
        Scenario label -> true value (float or Truth).
    convergence : dict, optional
        Scenario label -> {method: convergence rate in percent}.
    """
    groups = {}
    for r in records:
        if r.converged:
            groups.setdefault((r.scenario, r.method), []).append(r)
    order = {name: i for i, name in enumerate(methods.METHOD_NAMES)}
    out = []
    for (label, name) in sorted(groups, key=lambda k: (k[0], order.get(k[1], len(order)), k[1])):
        rs = sorted(groups[(label, name)], key=lambda r: r.rep)
        if len(rs) < 2:
            log.warning("%s/%s: fewer than two converged replications, not summarized", label, name)
            continue
        theta = truth[label]
        theta = theta.value if isinstance(theta, Truth) else float(theta)
        measures = performance([r.estimate for r in rs], [r.se for r in rs],
                               [r.ci_low for r in rs], [r.ci_high for r in rs], theta)
        rate = float("nan")
        if convergence and label in convergence:
            rate = convergence[label].get(name, float("nan"))
        out.append(PerformanceSummary(label, name, convergence_rate_pct=rate, **measures))
    return out


# --------------------------------------------------------------------------
# CSV

def write_records(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow([r.scenario, r.rep, r.method, _fmt(r.estimate), _fmt(r.se),
                        _fmt(r.ci_low), _fmt(r.ci_high), int(r.converged)])


def _float(text):
    return float("nan") if text == "NA" else float(text)


def read_records(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RECORD_COLUMNS:
            raise ValueError(f"{path}: expected columns {','.join(RECORD_COLUMNS)}")
        return [ReplicationRecord(row["scenario"], int(row["rep"]), row["method"],
                                  _float(row["estimate"]), _float(row["se"]),
                                  _float(row["ci_low"]), _float(row["ci_high"]),
                                  row["converged"] == "1") for row in reader]


def write_summary(summaries, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for s in summaries:
            w.writerow(s.csv_row())


def read_summary(path):
    """Summary CSV rows as dicts with numeric fields converted."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SUMMARY_COLUMNS:
            raise ValueError(f"{path}: expected columns {','.join(SUMMARY_COLUMNS)}")
        rows = []
        for row in reader:
            out = {"scenario": row["scenario"], "method": row["method"], "n_used": int(row["n_used"])}
            out.update({c: _float(row[c]) for c in SUMMARY_COLUMNS[3:]})
            rows.append(out)
    return rows


def convergence_table(run):
    return {run.label: run.convergence_rates()}


def truth_record(truth):
    return asdict(truth)
