import json
import math

import numpy as np
import pytest

from ccmi import cli, datagen, harness
from ccmi.cli import EXIT_DATA, EXIT_OK, EXIT_PARTIAL, EXIT_USAGE

CHEAP = "CCA,Full-IPW,MI-Sub-WO"


def sim(out, *extra):
    return cli.main(["simulate", "--scenario", "Obsdep1", "--reps", "2", "--m", "2", "--cycles", "1",
                     "--methods", CHEAP, "--out", str(out), *extra])


def test_simulate_outputs_and_determinism(tmp_path):
    assert sim(tmp_path / "a", "--seed", "3") == EXIT_OK
    assert sim(tmp_path / "b", "--seed", "3") == EXIT_OK
    a = (tmp_path / "a" / "Obsdep1_records.csv").read_bytes()
    assert a == (tmp_path / "b" / "Obsdep1_records.csv").read_bytes()
    assert len(a.decode().strip().splitlines()) == 1 + 2 * 3
    assert sorted(p.name for p in (tmp_path / "a").iterdir()) == [
        "Obsdep1_records.csv", "convergence.csv", "manifest.json", "summary.csv"]
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["base_seed"] == 3 and manifest["scenarios"] == ["Obsdep1"]
    summary = harness.read_summary(tmp_path / "a" / "summary.csv")
    assert [r["method"] for r in summary] == CHEAP.split(",")
    assert all(r["convergence_rate_pct"] == 100.0 for r in summary)


def test_simulate_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("CCMI_SEED", "3")
    assert sim(tmp_path / "env") == EXIT_OK
    assert sim(tmp_path / "flag", "--seed", "3") == EXIT_OK
    assert sim(tmp_path / "other", "--seed", "4") == EXIT_OK
    env = (tmp_path / "env" / "Obsdep1_records.csv").read_bytes()
    assert env == (tmp_path / "flag" / "Obsdep1_records.csv").read_bytes()
    assert env != (tmp_path / "other" / "Obsdep1_records.csv").read_bytes()
    monkeypatch.setenv("CCMI_SEED", "abc")
    assert sim(tmp_path / "bad") == EXIT_USAGE


def test_config_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"reps": 1, "seed": 3, "m": 2, "cycles": 1, "methods": "CCA"}))
    assert cli.main(["--config", str(cfg), "simulate", "--scenario", "Obsdep1",
                     "--out", str(tmp_path / "f")]) == EXIT_OK
    recs = harness.read_records(tmp_path / "f" / "Obsdep1_records.csv")
    assert len(recs) == 1
    assert (tmp_path / "f" / "summary.csv").read_text().count("\n") == 1
    assert cli.main(["--config", str(cfg), "simulate", "--scenario", "Obsdep1", "--reps", "2",
                     "--out", str(tmp_path / "g")]) == EXIT_OK
    assert len(harness.read_records(tmp_path / "g" / "Obsdep1_records.csv")) == 2
    assert json.loads((tmp_path / "g" / "manifest.json").read_text())["config"]["seed"] == 3
    (tmp_path / "broken.json").write_text("{")
    assert cli.main(["--config", str(tmp_path / "broken.json"), "simulate", "--scenario",
                     "Obsdep1", "--out", str(tmp_path / "h")]) == EXIT_DATA


def test_partial_results_exit_code(tmp_path, monkeypatch):
    def never(config, params, index, base_seed, specs):
        from ccmi.methods import MethodResult
        return [MethodResult(s.name, np.nan, np.nan, (np.nan, np.nan), False, 0) for s in specs]

    monkeypatch.setattr(harness, "replicate", never)
    code = cli.main(["simulate", "--scenario", "Obsdep1", "--reps", "1", "--max-generated", "2",
                     "--methods", "CCA", "--out", str(tmp_path)])
    assert code == EXIT_PARTIAL
    assert (tmp_path / "summary.csv").read_text().count("\n") == 1


def test_usage_errors(tmp_path, capsys):
    assert cli.main(["simulate", "--scenario", "Nope1", "--out", str(tmp_path)]) == EXIT_USAGE
    assert "Obsdep1" in capsys.readouterr().err
    assert cli.main(["simulate", "--scenario", "Obsdep1", "--methods", "MI-Foo",
                     "--out", str(tmp_path)]) == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        cli.main(["simulate"])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == EXIT_USAGE


def test_analyze_standin(tmp_path):
    src = tmp_path / "standin.csv"
    from ccmi.dataset import write_csv
    write_csv(datagen.load_standin(), src)
    out = tmp_path / "out"
    args = ["analyze", "--data", str(src), "--m", "5", "--seed", "1", "--svg", "--out", str(out)]
    assert cli.main(args) == EXIT_OK
    lines = (out / "forest.csv").read_text().strip().splitlines()
    assert lines[0] == "method,rr,ci_low,ci_high,converged,estimate,se"
    rows = [l.split(",") for l in lines[1:]]
    assert len(rows) == 11 and "CompleteData" not in [r[0] for r in rows]
    for r in rows:
        if r[4] == "1":
            assert abs(float(r[1]) - math.exp(float(r[5]))) < 1e-12
    svg = (out / "forest.svg").read_bytes()
    assert cli.main(args[:-1] + [str(tmp_path / "again")]) == EXIT_OK
    assert (tmp_path / "again" / "forest.svg").read_bytes() == svg
    assert (tmp_path / "again" / "forest.csv").read_bytes() == (out / "forest.csv").read_bytes()


def test_analyze_single_cca(tmp_path):
    src = tmp_path / "d.csv"
    from ccmi.dataset import write_csv
    write_csv(datagen.load_standin(), src)
    assert cli.main(["analyze", "--data", str(src), "--methods", "CCA",
                     "--out", str(tmp_path / "o")]) == EXIT_OK
    assert len((tmp_path / "o" / "forest.csv").read_text().strip().splitlines()) == 2


def test_analyze_schema_error(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("FoodAllergy,VDI,S\n1,0,1\n")
    assert cli.main(["analyze", "--data", str(bad), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert "Eth" in capsys.readouterr().err
    assert cli.main(["analyze", "--data", str(tmp_path / "none.csv"),
                     "--out", str(tmp_path / "o")]) == EXIT_DATA


def _summary(tmp_path):
    recs = [harness.ReplicationRecord("Obsdep1", i, m, 0.1 + 0.01 * i + 0.001 * k, 0.05,
                                      0.0 + 0.01 * i, 0.2 + 0.01 * i, True)
            for i in range(5) for k, m in enumerate(("CCA", "Full-IPW", "MI-Full"))]
    path = tmp_path / "s.csv"
    harness.write_summary(harness.summarize(recs, {"Obsdep1": 0.148},
                                          {"Obsdep1": {"CCA": 100.0, "Full-IPW": 100.0,
                                                       "MI-Full": 98.0}}), path)
    return path


def test_plot_measures(tmp_path):
    path = _summary(tmp_path)
    for measure in ("rel_bias", "coverage", "emp_se", "mod_se", "rel_se_error", "convergence"):
        out = tmp_path / f"{measure}.svg"
        assert cli.main(["plot", "--summary", str(path), "--measure", measure,
                         "--out", str(out)]) == EXIT_OK
        text = out.read_text()
        assert text.startswith("<svg") and text.count("<circle") >= 2
    svg = (tmp_path / "coverage.svg").read_text()
    assert "stroke-dasharray" in svg and svg.count("<circle") == 3
    again = tmp_path / "again.svg"
    cli.main(["plot", "--summary", str(path), "--measure", "coverage", "--out", str(again)])
    assert again.read_bytes() == (tmp_path / "coverage.svg").read_bytes()


def test_plot_errors(tmp_path):
    path = _summary(tmp_path)
    assert cli.main(["plot", "--summary", str(path), "--measure", "bogus",
                     "--out", str(tmp_path / "x.svg")]) == EXIT_USAGE
    empty = tmp_path / "empty.csv"
    empty.write_text(",".join(harness.SUMMARY_COLUMNS) + "\n")
    assert cli.main(["plot", "--summary", str(empty), "--measure", "coverage",
                     "--out", str(tmp_path / "x.svg")]) == EXIT_DATA


def test_summarize_command(tmp_path):
    assert sim(tmp_path / "r", "--seed", "2") == EXIT_OK
    out = tmp_path / "s.csv"
    assert cli.main(["summarize", "--records", str(tmp_path / "r" / "Obsdep1_records.csv"),
                     "--out", str(out)]) == EXIT_OK
    rows = harness.read_summary(out)
    ref = harness.read_summary(tmp_path / "r" / "summary.csv")
    assert [r["emp_se"] for r in rows] == [r["emp_se"] for r in ref]
    empty = tmp_path / "empty.csv"
    empty.write_text(",".join(harness.RECORD_COLUMNS) + "\n")
    assert cli.main(["summarize", "--records", str(empty), "--out", str(out)]) == EXIT_DATA


def test_generate_and_truth(tmp_path):
    out = tmp_path / "g.csv"
    assert cli.main(["generate", "--scenario", "Obsdep1", "--seed", "5", "--out", str(out)]) == EXIT_OK
    first = out.read_bytes()
    assert cli.main(["generate", "--scenario", "Obsdep1", "--seed", "5", "--out", str(out)]) == EXIT_OK
    assert out.read_bytes() == first
    assert first.decode().count("\n") == 1001
    assert cli.main(["generate", "--scenario", "Obsdep1,Obsdep2", "--out", str(out)]) == EXIT_USAGE
    t = tmp_path / "t.json"
    assert cli.main(["truth", "--scenario", "Enhdep6x", "--populations", "2", "--pop-size", "5000",
                     "--seed", "1", "--out", str(t)]) == EXIT_OK
    table = harness.load_truth(path=t)
    assert table["Enhdep6x"].populations == 2
