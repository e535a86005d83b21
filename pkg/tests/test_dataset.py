import numpy as np
import pytest
from hypothesis import given, strategies as st

from ccmi.dataset import (BIS_SCHEMA, INTENDED, OBSERVED, UNINTENDED, CohortData, CSVParseError,
                          IncompleteRowsError, SchemaError, Variable, complete_rows,
                          expand_design, read_csv, write_csv)

HEADER = "FoodAllergy,VDI,Eth,FamHx,PetOwn,AnteVD,NSib,MAge,SEIFA,S"


def write(tmp_path, lines, name="d.csv"):
    p = tmp_path / name
    p.write_text("\n".join(lines) + "\n")
    return p


def test_read_minimal_csv(tmp_path):
    p = write(tmp_path, [HEADER,
                         "1,1,1,0,1,0,2,31.5,1,1",
                         "0,NA,0,1,,1,0,29.0,2,0",
                         "0,0,1,1,1,1,1,33.25,0,1"])
    d = read_csv(p)
    assert d.n == 3
    assert d.status[1, d.col("VDI")] == INTENDED
    assert d.status[1, d.col("PetOwn")] == UNINTENDED
    assert d.status[0, d.col("VDI")] == OBSERVED
    assert np.isnan(d.values[1, d.col("PetOwn")])
    assert list(d.subcohort) == [True, False, True]


def test_exposure_missing_inside_subset_is_unintended(tmp_path):
    d = read_csv(write(tmp_path, [HEADER, "1,NA,1,0,1,0,2,31.5,1,1"]))
    assert d.status[0, d.col("VDI")] == UNINTENDED


def test_missing_columns_reported(tmp_path):
    p = write(tmp_path, ["FoodAllergy,VDI,S", "1,1,1"])
    with pytest.raises(SchemaError) as err:
        read_csv(p)
    assert "Eth" in err.value.missing_columns and "SEIFA" in err.value.missing_columns


def test_bad_level_and_ragged_rows(tmp_path):
    with pytest.raises(SchemaError):
        read_csv(write(tmp_path, [HEADER, "1,1,1,0,1,0,3,31.5,1,1"]))
    with pytest.raises(CSVParseError) as err:
        read_csv(write(tmp_path, [HEADER, "1,1,1,0,1,0,2,31.5,1,1", "1,1,1"], "r.csv"))
    assert err.value.row == 2
    with pytest.raises(CSVParseError):
        read_csv(write(tmp_path, [HEADER, "1,x,1,0,1,0,2,31.5,1,1"], "x.csv"))


def test_case_outside_subset_rejected(tmp_path):
    with pytest.raises(SchemaError):
        read_csv(write(tmp_path, [HEADER, "1,NA,1,0,1,0,2,31.5,1,0"]))


def test_arrays_are_read_only():
    d = CohortData(BIS_SCHEMA, np.zeros((2, len(BIS_SCHEMA))))
    with pytest.raises(ValueError):
        d.values[0, 0] = 1.0


def _random_cohort(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 40))
    vals = np.column_stack([
        r.integers(0, 2, n), r.integers(0, 2, n), r.integers(0, 2, n), r.integers(0, 2, n),
        r.integers(0, 2, n), r.integers(0, 2, n), r.integers(0, 3, n), r.normal(31, 5, n),
        r.integers(0, 3, n)]).astype(float)
    subcohort = r.random(n) < 0.3
    subset = subcohort | (vals[:, 0] == 1)
    status = np.zeros(vals.shape, np.uint8)
    for j in (1, 4, 5, 7):
        hit = r.random(n) < 0.2
        vals[hit, j] = np.nan
        status[hit, j] = UNINTENDED
    vals[~subset, 1] = np.nan
    status[~subset, 1] = INTENDED
    return CohortData(BIS_SCHEMA, vals, status, subset, subcohort)


@given(st.integers(0, 2 ** 31 - 1))
def test_csv_round_trip(tmp_path_factory, seed):
    d = _random_cohort(seed)
    p = tmp_path_factory.mktemp("rt") / "d.csv"
    write_csv(d, p)
    assert read_csv(p) == d


def test_expand_design_dummies_and_interactions():
    vals = np.array([[1, 1, 1, 0, 1, 0, 2, 30.0, 1],
                     [0, 0, 0, 1, 1, 1, 1, 25.0, 0]], float)
    d = CohortData(BIS_SCHEMA, vals)
    X = expand_design(d, None, ["VDI", "NSib", "VDI:Eth"])
    assert X.columns == ("(Intercept)", "VDI", "NSib=1", "NSib=2", "VDI:Eth")
    assert np.array_equal(X.values, [[1, 1, 0, 1, 1], [1, 0, 1, 0, 0]])


def test_expand_design_rejects_missing_cells():
    vals = np.array([[1, np.nan, 1, 0, 1, 0, 2, 30.0, 1]], float)
    d = CohortData(BIS_SCHEMA, vals)
    with pytest.raises(IncompleteRowsError) as err:
        expand_design(d, None, ["VDI"])
    assert list(err.value.rows) == [0]
    assert list(complete_rows(d, ["Eth"])) == [0]
    assert list(complete_rows(d, ["VDI", "Eth"])) == []


def test_variable_and_schema_validation():
    with pytest.raises(ValueError):
        Variable("x", "ordinalish", "confounder")
    with pytest.raises(SchemaError):
        CohortData((Variable("y", "binary", "outcome"),), np.zeros((1, 1)))
