"""Command-line interface: ``ccmi <command> [options]``.

Exit codes: 0 success, 2 partial results, 64 usage error, 65 data error.

Options may also come from a JSON file given with ``--config``; keys are the
long option names with dashes replaced by underscores.  Precedence is
built-in defaults < config file < command-line flags.
"""
import argparse
import hashlib
import json
import logging
import os
import sys
import warnings
from datetime import datetime, timezone

import numpy as np

from . import __version__, datagen, harness, methods, plots
from .dataset import BIS_SCHEMA, CSVParseError, SchemaError, read_csv, write_csv

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE, EXIT_DATA = 0, 2, 64, 65

log = logging.getLogger("ccmi")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_seed():
    text = os.environ.get("CCMI_SEED")
    if text is None:
        return 0
    try:
        return int(text)
    except ValueError:
        raise UsageError(f"CCMI_SEED must be an integer, got {text!r}") from None


# --------------------------------------------------------------------------
# manifest

def write_manifest(out_dir, command, settings, scenarios=(), outputs=()):
    """Write ``manifest.json`` into ``out_dir`` (replacing any earlier one)."""
    os.makedirs(out_dir, exist_ok=True)
    config_text = json.dumps(settings, sort_keys=True, default=str)
    manifest = {
        "tool": "ccmi",
        "version": __version__,
        "command": command,
        "config_hash": hashlib.sha256(config_text.encode()).hexdigest(),
        "config": json.loads(config_text),
        "base_seed": settings.get("seed"),
        "scenarios": list(scenarios),
        "started": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "outputs": [os.path.basename(p) for p in outputs],
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return path


def _select_scenarios(selector):
    if selector == "all":
        return list(datagen.SCENARIOS.values())
    labels = [s.strip() for s in selector.split(",") if s.strip()]
    bad = [s for s in labels if s not in datagen.SCENARIOS]
    if bad or not labels:
        raise UsageError(f"unknown scenario {', '.join(bad) or selector!r}; "
                         f"valid: {', '.join(datagen.SCENARIOS)}, all")
    return [datagen.SCENARIOS[s] for s in labels]


def _select_methods(selector):
    if selector == "all":
        return list(methods.METHOD_NAMES)
    names = [s.strip() for s in selector.split(",") if s.strip()]
    bad = [s for s in names if s not in methods.METHOD_NAMES]
    if bad or not names:
        raise UsageError(f"unknown method {', '.join(bad) or selector!r}; "
                         f"valid: {', '.join(methods.METHOD_NAMES)}, all")
    return names


# --------------------------------------------------------------------------
# commands

def cmd_simulate(args):
    configs = _select_scenarios(args.scenario)
    out = args.out
    records_paths = [os.path.join(out, f"{c.label}_records.csv") for c in configs]
    conv_path = os.path.join(out, "convergence.csv")
    summary_path = os.path.join(out, "summary.csv")
    settings = {k: getattr(args, k) for k in ("scenario", "reps", "max_generated", "seed",
                                              "threads", "m", "cycles", "methods")}
    write_manifest(out, "simulate", settings, [c.label for c in configs],
                   records_paths + [conv_path, summary_path])
    names = _select_methods(args.methods)
    all_records, truth, conv = [], {}, {}
    partial = False
    for config, path in zip(configs, records_paths):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", harness.PartialResultsWarning)
            ckpt = os.path.join(out, f"{config.label}_checkpoint.jsonl") if args.checkpoint else None
            run = harness.run_scenario(config, args.reps, args.max_generated, args.seed,
                                       args.threads, args.m, args.cycles, names, checkpoint=ckpt)
        for w in caught:
            if issubclass(w.category, harness.PartialResultsWarning):
                partial = True
                print(f"warning: {w.message}", file=sys.stderr)
        harness.write_records(run.records, path)
        all_records += run.records
        truth[config.label] = harness.truth_for(config)
        conv[config.label] = run.convergence_rates()
        conv[config.label]["_attempts"] = run.attempts
    with open(conv_path, "w") as fh:
        fh.write("scenario,method,attempts,convergence_rate_pct\n")
        for label, rates in conv.items():
            for name in names:
                fh.write(f"{label},{name},{rates['_attempts']},{rates[name]!r}\n")
    summaries = harness.summarize(all_records, truth, conv) if all_records else []
    harness.write_summary(summaries, summary_path)
    return EXIT_PARTIAL if partial else EXIT_OK


def cmd_analyze(args):
    try:
        data = read_csv(args.data, BIS_SCHEMA)
    except SchemaError as exc:
        raise DataError(str(exc)) from None
    except CSVParseError as exc:
        raise DataError(str(exc)) from None
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    names = _select_methods(args.methods)
    forest = os.path.join(args.out, "forest.csv")
    svg = os.path.join(args.out, "forest.svg")
    settings = {k: getattr(args, k) for k in ("data", "methods", "m", "seed", "weights", "p")}
    write_manifest(args.out, "analyze", settings, [], [forest] + ([svg] if args.svg else []))
    specs = [methods.method_spec(n, m=args.m, weight_mode=args.weights, selection_p=args.p)
             for n in names]
    if args.weights == "design":
        results = methods.run_case_study(data, specs, args.seed, selection_p=args.p)
    else:
        results = [methods.run_method(data, s, args.seed) for s in specs
                   if not (s.name == "CompleteData" and data.status[:, data.col(data.exposure)].any())]
    table = methods.forest_table(results)
    with open(forest, "w") as fh:
        fh.write("method,rr,ci_low,ci_high,converged,estimate,se\n")
        for (name, rr, lo, hi, ok), r in zip(table, results):
            fh.write(f"{name},{rr!r},{lo!r},{hi!r},{int(ok)},{r.estimate!r},{r.se!r}\n")
    if args.svg:
        with open(svg, "w") as fh:
            fh.write(plots.forest_plot(table))
    for name, rr, lo, hi, ok in table:
        print(f"{name:14s} RR {rr:.3f} ({lo:.3f}, {hi:.3f})" + ("" if ok else "  [failed]"))
    return EXIT_OK


def cmd_summarize(args):
    records = []
    for path in args.records:
        try:
            records += harness.read_records(path)
        except (OSError, ValueError) as exc:
            raise DataError(str(exc)) from None
    if not records:
        raise DataError("no records")
    labels = sorted({r.scenario for r in records})
    truth = {}
    for label in labels:
        if args.truth:
            table = harness.load_truth(path=args.truth)
            if label in table:
                truth[label] = table[label]
                continue
        truth[label] = harness.truth_for(datagen.get_scenario(label))
    summaries = harness.summarize(records, truth)
    harness.write_summary(summaries, args.out)
    return EXIT_OK


def cmd_truth(args):
    configs = _select_scenarios(args.scenario)
    table = {}
    if os.path.exists(args.out):
        with open(args.out) as fh:
            table = json.load(fh)
    for config in configs:
        t = harness.estimate_truth(config, args.populations, args.pop_size, args.seed)
        table[config.label] = harness.truth_record(t)
        print(f"{config.label}: {t.value!r} (MCSE {t.mcse:.3g}, RR {np.exp(t.value):.4f})")
    with open(args.out, "w") as fh:
        json.dump(table, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return EXIT_OK


def cmd_calibrate(args):
    configs = _select_scenarios(args.scenario)
    report = {}
    for config in configs:
        params = datagen.scenario_parameters(config.label, args.seed, args.n)
        report[config.label] = datagen.calibration_report(params, config)
    text = json.dumps(report, indent=2, sort_keys=True, default=float)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_plot(args):
    if args.measure not in plots.MEASURES:
        raise UsageError(f"unknown measure {args.measure!r}; valid: {', '.join(plots.MEASURES)}")
    try:
        rows = harness.read_summary(args.summary)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from None
    if not rows:
        raise DataError(f"{args.summary}: empty summary")
    with open(args.out, "w") as fh:
        fh.write(plots.dot_plot(rows, args.measure))
    return EXIT_OK


def cmd_generate(args):
    config = _select_scenarios(args.scenario)
    if len(config) != 1:
        raise UsageError("generate takes exactly one scenario")
    config = config[0]
    params = datagen.scenario_parameters(config.label)
    rep = datagen.simulate_dataset(config, params, datagen.make_rng(args.seed, config.label, "generate"))
    write_csv(rep.complete if args.complete else rep.observed, args.out)
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="ccmi", description="Case-cohort multiple imputation simulation toolkit.")
    p.add_argument("--version", action="version", version=f"ccmi {__version__}")
    p.add_argument("--config", help="JSON file of option values")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="run scenario replications")
    s.add_argument("--scenario", required=True, help="label, comma list or 'all'")
    s.add_argument("--reps", type=int, default=None)
    s.add_argument("--max-generated", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--threads", type=int, default=None)
    s.add_argument("--m", type=int, default=None)
    s.add_argument("--cycles", type=int, default=None)
    s.add_argument("--methods", default=None)
    s.add_argument("--checkpoint", action="store_true", help="keep a resumable per-replication log")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate, defaults=dict(reps=2000, threads=1, m=50, cycles=10,
                                                    methods="all"))

    a = sub.add_parser("analyze", help="apply the analysis arms to a cohort CSV")
    a.add_argument("--data", required=True)
    a.add_argument("--methods", default=None)
    a.add_argument("--m", type=int, default=None)
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--weights", choices=("design", "empirical"), default=None)
    a.add_argument("--p", type=float, default=None, help="subcohort selection probability")
    a.add_argument("--svg", action="store_true", help="also write forest.svg")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze, defaults=dict(methods="all", m=50, weights="design",
                                                   p=methods.CASE_STUDY_P))

    m = sub.add_parser("summarize", help="performance measures from records CSVs")
    m.add_argument("--records", nargs="+", required=True)
    m.add_argument("--truth", help="truth JSON (defaults to the shipped values)")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_summarize, defaults={})

    t = sub.add_parser("truth", help="estimate the true log RR by large-population simulation")
    t.add_argument("--scenario", required=True)
    t.add_argument("--populations", type=int, default=None)
    t.add_argument("--pop-size", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_truth, defaults=dict(populations=100, pop_size=100_000))

    c = sub.add_parser("calibrate", help="calibrate missingness intercepts and report them")
    c.add_argument("--scenario", required=True)
    c.add_argument("--n", type=int, default=None)
    c.add_argument("--seed", type=int, default=None)
    c.add_argument("--out")
    c.set_defaults(func=cmd_calibrate, defaults=dict(n=datagen.CALIBRATION_N, seed=20240101))

    g = sub.add_parser("plot", help="dot plot of one performance measure as SVG")
    g.add_argument("--summary", required=True)
    g.add_argument("--measure", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_plot, defaults={})

    e = sub.add_parser("generate", help="emit one synthetic case-cohort dataset as CSV")
    e.add_argument("--scenario", required=True)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--complete", action="store_true", help="write the pre-missingness cohort")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_generate, defaults={})
    return p


def _resolve(args):
    """Fill unset options from the config file, then built-in defaults."""
    file_values = {}
    if args.config:
        try:
            with open(args.config) as fh:
                file_values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"config file: {exc}") from None
        if not isinstance(file_values, dict):
            raise DataError("config file must hold a JSON object")
    for key, value in vars(args).items():
        if value is None:
            if key in file_values:
                setattr(args, key, file_values[key])
            elif key in args.defaults:
                setattr(args, key, args.defaults[key])
    if getattr(args, "seed", "absent") is None:
        args.seed = _default_seed()
    return args


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _resolve(args)
        return args.func(args)
    except UsageError as exc:
        print(f"ccmi: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"ccmi: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
