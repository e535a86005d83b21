"""Cohort data container with three-state cell status, CSV I/O and design expansion."""
import csv
import math
from dataclasses import dataclass

import numpy as np

OBSERVED = 0
UNINTENDED = 1
INTENDED = 2

MISSING_TOKENS = ("", "NA")


class CSVParseError(ValueError):
    """Malformed CSV row; ``row`` is the 1-based data row number."""

    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class SchemaError(ValueError):
    """Values or columns inconsistent with the variable schema."""

    def __init__(self, message, missing_columns=()):
        super().__init__(message)
        self.missing_columns = tuple(missing_columns)


class IncompleteRowsError(ValueError):
    def __init__(self, rows, variables):
        rows = np.asarray(rows)
        shown = ", ".join(str(int(r)) for r in rows[:10])
        more = "" if len(rows) <= 10 else f" (+{len(rows) - 10} more)"
        super().__init__(f"missing values in {sorted(variables)} on rows {shown}{more}")
        self.rows = rows


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str  # binary | categorical | continuous
    role: str  # outcome | exposure | confounder | auxiliary
    levels: int = 2

    def __post_init__(self):
        if self.kind not in ("binary", "categorical", "continuous"):
            raise ValueError(f"{self.name}: unknown kind {self.kind!r}")
        if self.role not in ("outcome", "exposure", "confounder", "auxiliary"):
            raise ValueError(f"{self.name}: unknown role {self.role!r}")
        if self.kind == "binary" and self.levels != 2:
            raise ValueError(f"{self.name}: binary variables have 2 levels")
        if self.kind == "categorical" and self.levels < 2:
            raise ValueError(f"{self.name}: categorical needs >= 2 levels")

    @property
    def is_discrete(self):
        return self.kind != "continuous"


BIS_SCHEMA = (
    Variable("FoodAllergy", "binary", "outcome"),
    Variable("VDI", "binary", "exposure"),
    Variable("Eth", "binary", "confounder"),
    Variable("FamHx", "binary", "confounder"),
    Variable("PetOwn", "binary", "confounder"),
    Variable("AnteVD", "binary", "confounder"),
    Variable("NSib", "categorical", "confounder", 3),
    Variable("MAge", "continuous", "auxiliary", 0),
    Variable("SEIFA", "categorical", "auxiliary", 3),
)


def check_schema(schema):
    roles = [v.role for v in schema]
    if roles.count("outcome") != 1 or roles.count("exposure") != 1:
        raise SchemaError("schema needs exactly one outcome and one exposure")
    names = [v.name for v in schema]
    if len(set(names)) != len(names):
        raise SchemaError("duplicate variable names")
    if {"S", "subcohort"} & set(names):
        raise SchemaError("'S' and 'subcohort' are reserved column names")


class CohortData:
    """Rectangular cohort table.

    ``values`` is an (n, k) float array in schema order with NaN in missing
    cells; ``status`` holds OBSERVED / UNINTENDED / INTENDED per cell.  Arrays
    are made read-only; derive modified copies with :meth:`replace`.
    """

    def __init__(self, schema, values, status=None, subset=None, subcohort=None):
        schema = tuple(schema)
        check_schema(schema)
        values = np.array(values, dtype=np.float64)
        n = values.shape[0]
        if values.shape != (n, len(schema)):
            raise SchemaError(f"values shape {values.shape} does not match schema")
        if status is None:
            status = np.where(np.isnan(values), UNINTENDED, OBSERVED).astype(np.uint8)
        else:
            status = np.array(status, dtype=np.uint8)
        subset = np.ones(n, bool) if subset is None else np.array(subset, dtype=bool)
        subcohort = subset.copy() if subcohort is None else np.array(subcohort, dtype=bool)
        for arr in (values, status, subset, subcohort):
            arr.setflags(write=False)
        self.schema = schema
        self.values = values
        self.status = status
        self.subset = subset
        self.subcohort = subcohort
        self._index = {v.name: j for j, v in enumerate(schema)}

    # basic accessors -----------------------------------------------------
    @property
    def n(self):
        return self.values.shape[0]

    @property
    def names(self):
        return tuple(v.name for v in self.schema)

    @property
    def outcome(self):
        return next(v.name for v in self.schema if v.role == "outcome")

    @property
    def exposure(self):
        return next(v.name for v in self.schema if v.role == "exposure")

    def var(self, name):
        return self.schema[self._index[name]]

    def col(self, name):
        return self._index[name]

    def column(self, name):
        return self.values[:, self._index[name]]

    def observed(self, name):
        return self.status[:, self._index[name]] == OBSERVED

    def missing_counts(self):
        return {v.name: int(np.sum(self.status[:, j] != OBSERVED)) for j, v in enumerate(self.schema)}

    def replace(self, values=None, status=None, subset=None, subcohort=None):
        return CohortData(
            self.schema,
            self.values if values is None else values,
            self.status if status is None else status,
            self.subset if subset is None else subset,
            self.subcohort if subcohort is None else subcohort,
        )

    def take(self, rows):
        rows = np.asarray(rows)
        return CohortData(self.schema, self.values[rows], self.status[rows],
                          self.subset[rows], self.subcohort[rows])

    def validate(self):
        """Raise SchemaError if a structural invariant is violated."""
        y = self.column(self.outcome)
        if np.any(self.status[:, self.col(self.outcome)] != OBSERVED) or np.any(np.isnan(y)):
            raise SchemaError("outcome has missing cells")
        if np.any(self.subset[y == 1] == 0):
            raise SchemaError("every case must be in the subset")
        intended = self.status == INTENDED
        if intended.any():
            j = self.col(self.exposure)
            others = np.delete(intended, j, axis=1)
            if others.any() or np.any(intended[:, j] & self.subset):
                raise SchemaError("intended missingness only on the exposure outside the subset")
        return self

    def __eq__(self, other):
        if not isinstance(other, CohortData):
            return NotImplemented
        return (self.schema == other.schema
                and np.array_equal(self.values, other.values, equal_nan=True)
                and np.array_equal(self.status, other.status)
                and np.array_equal(self.subset, other.subset)
                and np.array_equal(self.subcohort, other.subcohort))

    def __repr__(self):
        return f"CohortData(n={self.n}, subset={int(self.subset.sum())}, missing={self.missing_counts()})"


# --------------------------------------------------------------------------
# CSV

def _parse_cell(text, var, row):
    if text in MISSING_TOKENS:
        return math.nan
    try:
        value = float(text)
    except ValueError:
        raise CSVParseError(f"{var.name}: cannot parse {text!r}", row) from None
    if var.kind == "continuous":
        return value
    if value != int(value) or not 0 <= value < var.levels:
        raise SchemaError(f"row {row}: {var.name}={text!r} outside levels 0..{var.levels - 1}")
    return value


def _parse_flag(text, name, row):
    if text not in ("0", "1"):
        raise SchemaError(f"row {row}: {name} must be 0 or 1, got {text!r}")
    return text == "1"


def read_csv(path, schema=BIS_SCHEMA):
    """Read a cohort CSV.

    Missing cells are the empty string or ``NA``.  Column ``S`` sets the
    subset flag; ``subcohort`` is optional and defaults to ``S``.  Exposure
    cells missing outside the subset are marked INTENDED, all other missing
    cells UNINTENDED.
    """
    schema = tuple(schema)
    check_schema(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVParseError("empty file") from None
        header = [h.strip() for h in header]
        needed = [v.name for v in schema] + ["S"]
        missing = [c for c in needed if c not in header]
        if missing:
            raise SchemaError(f"missing columns: {', '.join(missing)}", missing)
        pos = {h: i for i, h in enumerate(header)}
        has_subcohort = "subcohort" in pos
        rows, subset, subcohort = [], [], []
        for rownum, rec in enumerate(reader, start=1):
            if not rec:
                continue
            if len(rec) != len(header):
                raise CSVParseError(f"expected {len(header)} fields, got {len(rec)}", rownum)
            rows.append([_parse_cell(rec[pos[v.name]].strip(), v, rownum) for v in schema])
            s = _parse_flag(rec[pos["S"]].strip(), "S", rownum)
            subset.append(s)
            subcohort.append(_parse_flag(rec[pos["subcohort"]].strip(), "subcohort", rownum)
                             if has_subcohort else s)
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(schema))
    subset = np.array(subset, dtype=bool)
    status = np.where(np.isnan(values), UNINTENDED, OBSERVED).astype(np.uint8)
    j = [v.role for v in schema].index("exposure")
    status[np.isnan(values[:, j]) & ~subset, j] = INTENDED
    data = CohortData(schema, values, status, subset, np.array(subcohort, dtype=bool))
    return data.validate()


def _fmt(value, var):
    if math.isnan(value):
        return "NA"
    if var.kind == "continuous":
        return repr(float(value))
    return str(int(value))


def write_csv(data, path):
    """Write ``data`` in the format :func:`read_csv` reads (17 significant digits)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(data.names) + ["S", "subcohort"])
        for i in range(data.n):
            writer.writerow([_fmt(data.values[i, j], v) for j, v in enumerate(data.schema)]
                            + [int(data.subset[i]), int(data.subcohort[i])])


# --------------------------------------------------------------------------
# design matrices

@dataclass(frozen=True)
class DesignMatrix:
    columns: tuple
    values: np.ndarray
    row_index: np.ndarray

    @property
    def shape(self):
        return self.values.shape


def _term_vars(term):
    if isinstance(term, (tuple, list)):
        return tuple(term)
    return tuple(term.split(":"))


def _expand_var(var, x):
    if var.kind == "categorical":
        return [f"{var.name}={k}" for k in range(1, var.levels)], [
            (x == k).astype(np.float64) for k in range(1, var.levels)]
    return [var.name], [x.astype(np.float64)]


def expand_design(data, rows=None, terms=()):
    """Build a design matrix with an intercept and dummy-coded categoricals.

    Terms are variable names or interactions written ``"A:B"`` (or tuples).
    Categorical variables expand to K-1 indicators against level 0;
    interactions are products of the expanded columns.
    """
    rows = np.arange(data.n) if rows is None else np.asarray(rows)
    if rows.dtype == bool:
        rows = np.flatnonzero(rows)
    involved = sorted({v for t in terms for v in _term_vars(t)})
    if involved:
        sub = data.values[np.ix_(rows, [data.col(v) for v in involved])]
        bad = np.isnan(sub).any(axis=1)
        if bad.any():
            raise IncompleteRowsError(rows[bad], involved)
    names = ["(Intercept)"]
    cols = [np.ones(len(rows))]
    for term in terms:
        parts = [_expand_var(data.var(v), data.column(v)[rows]) for v in _term_vars(term)]
        tnames, tcols = parts[0]
        for pnames, pcols in parts[1:]:
            tnames = [f"{a}:{b}" for a in tnames for b in pnames]
            tcols = [a * b for a in tcols for b in pcols]
        names.extend(tnames)
        cols.extend(tcols)
    values = np.ascontiguousarray(np.column_stack(cols))
    return DesignMatrix(tuple(names), values, rows)


def complete_rows(data, variables):
    """Indices of rows on which every listed variable is OBSERVED."""
    if not variables:
        return np.arange(data.n)
    ok = np.all(data.status[:, [data.col(v) for v in variables]] == OBSERVED, axis=1)
    return np.flatnonzero(ok)
