"""Experiment data: loading, validation and cell summaries."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Invalid experiment data (bad token, missing column, empty arm, ...)."""


CELLS = ((1, 1), (1, 0), (0, 1), (0, 0))


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ExperimentData:
    """Treatment, intermediate, outcome and covariates for ``n`` units.

    ``x`` always carries an intercept in column 0. ``y`` is ``None`` for
    score-only data.
    """

    z: np.ndarray
    s: np.ndarray
    y: np.ndarray | None
    x: np.ndarray
    covariate_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "z", _frozen(self.z, np.int8))
        object.__setattr__(self, "s", _frozen(self.s, np.int8))
        object.__setattr__(self, "x", _frozen(self.x, float))
        if self.y is not None:
            object.__setattr__(self, "y", _frozen(self.y, float))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def has_outcome(self) -> bool:
        return self.y is not None

    def cell(self, z: int, s: int) -> np.ndarray:
        return (self.z == z) & (self.s == s)

    def require_outcome(self) -> np.ndarray:
        if self.y is None:
            raise DataError("outcome column required for estimation")
        return self.y

    def without_outcome(self) -> "ExperimentData":
        return ExperimentData(self.z, self.s, None, self.x, self.covariate_names)

    def with_outcome(self, y) -> "ExperimentData":
        return ExperimentData(self.z, self.s, y, self.x, self.covariate_names)

    def select_covariates(self, names) -> "ExperimentData":
        """Keep the intercept plus the named covariates, in the given order."""
        idx = [0]
        for nm in names:
            if nm not in self.covariate_names:
                raise DataError(f"unknown covariate {nm!r}")
            idx.append(1 + self.covariate_names.index(nm))
        return ExperimentData(self.z, self.s, self.y, self.x[:, idx], tuple(names))

    def take(self, rows) -> "ExperimentData":
        rows = np.asarray(rows)
        y = None if self.y is None else self.y[rows]
        return ExperimentData(self.z[rows], self.s[rows], y, self.x[rows], self.covariate_names)

    def __eq__(self, other):
        if not isinstance(other, ExperimentData):
            return NotImplemented
        same_y = (self.y is None and other.y is None) or (
            self.y is not None and other.y is not None and np.array_equal(self.y, other.y)
        )
        return (
            same_y
            and self.covariate_names == other.covariate_names
            and np.array_equal(self.z, other.z)
            and np.array_equal(self.s, other.s)
            and np.array_equal(self.x, other.x)
        )

    __hash__ = None


@dataclass(frozen=True)
class CellSummary:
    n_zs: dict
    p1_hat: float
    p0_hat: float

    @property
    def n_treated(self) -> int:
        return self.n_zs[(1, 1)] + self.n_zs[(1, 0)]

    @property
    def n_control(self) -> int:
        return self.n_zs[(0, 1)] + self.n_zs[(0, 0)]


def summarize(data: ExperimentData) -> CellSummary:
    counts = {c: int(np.sum(data.cell(*c))) for c in CELLS}
    n1 = counts[(1, 1)] + counts[(1, 0)]
    n0 = counts[(0, 1)] + counts[(0, 0)]
    return CellSummary(counts, counts[(1, 1)] / n1, counts[(0, 1)] / n0)


def _rank_problem(x, names):
    """Name the first covariate column that is linearly dependent on earlier ones."""
    cols = []
    for j in range(x.shape[1]):
        trial = x[:, cols + [j]]
        if np.linalg.matrix_rank(trial) < len(cols) + 1:
            sub = x[:, cols]
            coef, *_ = np.linalg.lstsq(sub, x[:, j], rcond=None)
            partners = [names[c] for c, v in zip(cols, coef) if abs(v) > 1e-8]
            return names[j], partners
        cols.append(j)
    return None


def build(z, s, y, covariates, names=(), *, add_intercept=True) -> ExperimentData:
    """Validate arrays and assemble an :class:`ExperimentData`."""
    z = np.asarray(z)
    s = np.asarray(s)
    n = z.shape[0]
    cov = np.asarray(covariates, float).reshape(n, -1) if np.size(covariates) else np.empty((n, 0))
    names = tuple(names) if names else tuple(f"x{j + 1}" for j in range(cov.shape[1]))
    for label, v in (("z", z), ("s", s)):
        bad = np.nonzero(~np.isin(v, (0, 1)))[0]
        if bad.size:
            raise DataError(f"column {label}: non-binary value {v[bad[0]]!r} in data row {bad[0] + 1}")
    if not np.isfinite(cov).all():
        r, c = np.argwhere(~np.isfinite(cov))[0]
        raise DataError(f"column {names[c]}: missing or non-finite value in data row {r + 1}")
    if y is not None:
        y = np.asarray(y, float)
        if not np.isfinite(y).all():
            r = int(np.nonzero(~np.isfinite(y))[0][0])
            raise DataError(f"outcome: missing or non-finite value in data row {r + 1}")
    if not (z == 1).any():
        raise DataError("treatment arm (z=1) is empty")
    if not (z == 0).any():
        raise DataError("control arm (z=0) is empty")
    if add_intercept:
        x = np.column_stack([np.ones(n), cov])
        all_names = ("(intercept)",) + names
    else:
        x = cov
        all_names = names
        names = names[1:]
        if x.shape[1] == 0 or not np.all(x[:, 0] == 1.0):
            raise DataError("first covariate column must be the constant 1 when it is declared as the intercept")
    problem = _rank_problem(x, all_names)
    if problem is not None:
        col, partners = problem
        raise DataError(
            f"covariates are rank deficient: column {col} is a linear combination of "
            + (", ".join(partners) if partners else "earlier columns")
        )
    return ExperimentData(z, s, y, x, names)


@dataclass
class Schema:
    """Maps CSV header names to roles."""

    z: str = "z"
    s: str = "s"
    y: str | None = "y"
    covariates: list[str] | None = None
    has_intercept: bool = False
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path) -> "Schema":
        """Read a plain ``key=value`` file (``#`` starts a comment)."""
        kv = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        return cls.from_mapping(kv)

    @classmethod
    def from_mapping(cls, kv) -> "Schema":
        kv = dict(kv)
        out = cls()
        if "z" in kv:
            out.z = kv.pop("z")
        if "s" in kv:
            out.s = kv.pop("s")
        if "y" in kv:
            v = kv.pop("y")
            out.y = v or None
        if "covariates" in kv:
            v = kv.pop("covariates")
            out.covariates = [c.strip() for c in v.split(",") if c.strip()]
        if "intercept" in kv:
            out.has_intercept = kv.pop("intercept").lower() in ("1", "true", "yes")
        out.extra = kv
        return out


def load_csv(path, schema: Schema | None = None, *, read_outcome: bool = True) -> ExperimentData:
    """Load and validate a CSV with a header row.

    Covariates default to every column not mapped to z, s or y. A missing
    outcome column is allowed (score-only workflows); ``read_outcome=False``
    skips it even when present.
    """
    schema = schema or Schema()
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if any(cell.strip() for cell in r)]
    col = {h: j for j, h in enumerate(header)}
    for role in ("z", "s"):
        if getattr(schema, role) not in col:
            raise DataError(f"{path}: missing column {getattr(schema, role)!r} (role {role})")
    y_name = schema.y if read_outcome and schema.y in col else None
    if schema.covariates is None:
        covs = [h for h in header if h not in (schema.z, schema.s, schema.y)]
    else:
        covs = list(schema.covariates)
        for c in covs:
            if c not in col:
                raise DataError(f"{path}: missing covariate column {c!r}")
    for i, r in enumerate(rows, 1):
        if len(r) != len(header):
            raise DataError(f"{path}: data row {i} has {len(r)} fields, header has {len(header)}")

    def binary(name):
        out = np.empty(len(rows), np.int8)
        for i, r in enumerate(rows):
            tok = r[col[name]].strip()
            if tok not in ("0", "1"):
                raise DataError(f"{path}: column {name}: non-binary value {tok!r} in data row {i + 1}")
            out[i] = int(tok)
        return out

    def numeric(name):
        out = np.empty(len(rows))
        for i, r in enumerate(rows):
            tok = r[col[name]].strip()
            try:
                out[i] = float(tok)
            except ValueError:
                raise DataError(f"{path}: column {name}: non-numeric value {tok!r} in data row {i + 1}") from None
            if not np.isfinite(out[i]):
                raise DataError(f"{path}: column {name}: non-finite value in data row {i + 1}")
        return out

    z = binary(schema.z)
    s = binary(schema.s)
    y = numeric(y_name) if y_name else None
    cov = np.column_stack([numeric(c) for c in covs]) if covs else np.empty((len(rows), 0))
    try:
        return build(z, s, y, cov, covs, add_intercept=not schema.has_intercept)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_csv(data: ExperimentData, path) -> None:
    """Write data back to CSV; floats use ``repr`` so a reload is exact."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        head = ["z", "s"] + (["y"] if data.y is not None else []) + list(data.covariate_names)
        w.writerow(head)
        for i in range(data.n):
            row = [int(data.z[i]), int(data.s[i])]
            if data.y is not None:
                row.append(repr(float(data.y[i])))
            row += [repr(float(v)) for v in data.x[i, 1:]]
            w.writerow(row)
