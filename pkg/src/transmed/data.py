"""Observations, datasets, intervention and model-term specifications.

A dataset holds one row per participant with the binary columns
``S, W1, W2, A, Z, M`` and an outcome ``Y`` that is only observed when
``S == 1``. Absent outcomes are stored as NaN so that nothing downstream can
silently treat them as zeros.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Optional, Sequence

import numpy as np

COLUMNS = ("S", "W1", "W2", "A", "Z", "M", "Y")
COVARIATES = ("W1", "W2")

# Variables each nuisance model may condition on (time ordering W -> S -> A -> Z -> M -> Y).
# ``QZ`` is the sequential regression of the marginalized outcome on (A, W, S).
ALLOWED_PARENTS = {
    "A": frozenset({"W1", "W2", "S"}),
    "Z": frozenset({"A", "W1", "W2", "S"}),
    "M": frozenset({"Z", "A", "W1", "W2", "S"}),
    "S": frozenset({"W1", "W2"}),
    "Y": frozenset({"M", "Z", "A", "W1", "W2"}),
    "QZ": frozenset({"A", "W1", "W2", "S"}),
}


class DataError(ValueError):
    """Raised for malformed or invalid input data."""


class CSVParseError(DataError):
    pass


class TermSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Observation:
    s: int
    w1: int
    w2: int
    a: int
    z: int
    m: int
    y: Optional[int] = None

    def __post_init__(self):
        for name in ("s", "w1", "w2", "a", "z", "m"):
            if getattr(self, name) not in (0, 1):
                raise DataError(f"{name} must be 0 or 1, got {getattr(self, name)!r}")
        if self.s == 1 and self.y not in (0, 1):
            raise DataError("y must be 0 or 1 when s=1")
        if self.s == 0 and self.y is not None:
            raise DataError("y must be absent when s=0")


def _readonly(x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x)
    x.setflags(write=False)
    return x


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable column store of observations with optional frequency weights.

    Parameters
    ----------
    s, w1, w2, a, z, m : array_like of {0, 1}
    y : array_like of float
        Outcome, NaN where ``s == 0``.
    weights : array_like of float, optional
        Nonnegative frequency weights (default 1 for every row).
    """

    s: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    a: np.ndarray
    z: np.ndarray
    m: np.ndarray
    y: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(np.asarray(self.s))
        for name in ("s", "w1", "w2", "a", "z", "m"):
            col = np.asarray(getattr(self, name), dtype=float)
            if col.shape != (n,):
                raise DataError(f"column {name} has shape {col.shape}, expected ({n},)")
            if not np.all((col == 0) | (col == 1)):
                raise DataError(f"column {name} contains non-binary values")
            object.__setattr__(self, name, _readonly(col.astype(np.int8)))
        y = np.asarray(self.y, dtype=float)
        if y.shape != (n,):
            raise DataError(f"column y has shape {y.shape}, expected ({n},)")
        source = self.s == 1
        if np.any(source & ~((y == 0) | (y == 1))):
            raise DataError("Y must be 0 or 1 on every s=1 row")
        if np.any(~source & ~np.isnan(y)):
            raise DataError("Y present on an s=0 row")
        object.__setattr__(self, "y", _readonly(y))
        w = np.ones(n) if self.weights is None else np.asarray(self.weights, dtype=float)
        if w.shape != (n,) or not np.all(np.isfinite(w)) or np.any(w < 0):
            raise DataError("weights must be finite and nonnegative, one per row")
        object.__setattr__(self, "weights", _readonly(w))
        if n < 1:
            raise DataError("dataset is empty")
        if w.sum() <= 0:
            raise DataError("frequency weights sum to zero")
        if not np.any(source & (w > 0)):
            raise DataError("no source-site rows (S=1)")
        if not np.any(~source & (w > 0)):
            raise DataError("no target-site rows (S=0)")

    @classmethod
    def from_observations(
        cls, rows: Iterable[Observation], weights: Optional[Sequence[float]] = None
    ) -> "Dataset":
        rows = list(rows)
        cols = {k: [getattr(r, k) for r in rows] for k in ("s", "w1", "w2", "a", "z", "m")}
        y = [np.nan if r.y is None else float(r.y) for r in rows]
        return cls(**cols, y=y, weights=weights)

    def __len__(self) -> int:
        return len(self.s)

    @property
    def n(self) -> int:
        return len(self.s)

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())

    def columns(self) -> dict[str, np.ndarray]:
        """Float columns keyed by upper-case variable name (Y zero-filled where absent)."""
        return {
            "S": self.s.astype(float),
            "W1": self.w1.astype(float),
            "W2": self.w2.astype(float),
            "A": self.a.astype(float),
            "Z": self.z.astype(float),
            "M": self.m.astype(float),
            "Y": np.where(self.s == 1, self.y, 0.0),
        }

    def observations(self) -> Iterator[Observation]:
        for i in range(self.n):
            y = None if self.s[i] == 0 else int(self.y[i])
            yield Observation(
                int(self.s[i]), int(self.w1[i]), int(self.w2[i]),
                int(self.a[i]), int(self.z[i]), int(self.m[i]), y,
            )

    def subset(self, mask: np.ndarray) -> "Dataset":
        return Dataset(
            self.s[mask], self.w1[mask], self.w2[mask], self.a[mask],
            self.z[mask], self.m[mask], self.y[mask], self.weights[mask],
        )

    def with_weights(self, weights: np.ndarray) -> "Dataset":
        return Dataset(self.s, self.w1, self.w2, self.a, self.z, self.m, self.y, weights)

    def cell_codes(self) -> np.ndarray:
        """Integer code in [0, 128) identifying each row's full binary configuration."""
        y = np.where(self.s == 1, self.y, 0.0).astype(np.int64)
        code = np.zeros(self.n, dtype=np.int64)
        for col in (self.s, self.w1, self.w2, self.a, self.z, self.m, y):
            code = code * 2 + col
        return code

    def collapse(self) -> "Dataset":
        """Merge identical rows, summing their weights.

        Every estimator in this package is a function of the weighted empirical
        distribution, so the collapsed dataset (at most 96 distinct rows) gives
        the same estimates as the original.
        """
        codes = self.cell_codes()
        uniq, first, inverse = np.unique(codes, return_index=True, return_inverse=True)
        w = np.bincount(inverse, weights=self.weights, minlength=len(uniq))
        keep = w > 0
        out = self.subset(first[keep])
        return out.with_weights(w[keep])

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, k), getattr(other, k), equal_nan=(k == "y"))
            for k in ("s", "w1", "w2", "a", "z", "m", "y", "weights")
        )

    __hash__ = None


@dataclass(frozen=True)
class InterventionSpec:
    """Counterfactual mean selector ``psi(a, a_star)`` with mediator site ``s_ref``."""

    a: int
    a_star: int
    s_ref: int = 0

    def __post_init__(self):
        for name in ("a", "a_star", "s_ref"):
            if getattr(self, name) not in (0, 1):
                raise ValueError(f"{name} must be 0 or 1")


def effect_specs(s_ref: int = 0) -> dict[str, InterventionSpec]:
    """The three specs needed for the direct and indirect contrasts."""
    return {
        "10": InterventionSpec(1, 0, s_ref),
        "00": InterventionSpec(0, 0, s_ref),
        "11": InterventionSpec(1, 1, s_ref),
    }


Term = tuple[str, ...]


def parse_term(text: str) -> Term:
    """``"A*W2"`` -> ``("A", "W2")``; ``"1"`` -> ``()``."""
    text = text.strip()
    if text in ("", "1"):
        return ()
    parts = tuple(p.strip().upper() for p in text.replace(":", "*").split("*"))
    return tuple(sorted(set(parts), key=parts.index))


def format_term(term: Term) -> str:
    return "*".join(term) if term else "1"


def _normalize_terms(terms) -> tuple[Term, ...]:
    out = []
    for t in terms:
        t = parse_term(t) if isinstance(t, str) else tuple(t)
        if t and t not in out:
            out.append(t)
    return tuple(out)


@dataclass(frozen=True)
class TermSpec:
    """Design terms for each nuisance regression.

    Each entry is a tuple of product terms; the intercept is implicit and
    always included. ``QZ`` holds the terms of the sequential regression of the
    marginalized outcome on (A, W, S). ``gstar_M`` / ``gstar_Z``, when given,
    are the terms of separate mediator and intermediate fits used only to build
    the stochastic intervention; otherwise the ``M`` and ``Z`` fits are reused.
    """

    A: tuple[Term, ...] = ()
    Z: tuple[Term, ...] = ()
    M: tuple[Term, ...] = ()
    S: tuple[Term, ...] = ()
    Y: tuple[Term, ...] = ()
    QZ: tuple[Term, ...] = ()
    gstar_M: Optional[tuple[Term, ...]] = None
    gstar_Z: Optional[tuple[Term, ...]] = None

    def __post_init__(self):
        for name in ("A", "Z", "M", "S", "Y", "QZ", "gstar_M", "gstar_Z"):
            terms = getattr(self, name)
            if terms is None:
                continue
            terms = _normalize_terms(terms)
            object.__setattr__(self, name, terms)
            model = {"gstar_M": "M", "gstar_Z": "Z"}.get(name, name)
            for t in terms:
                bad = set(t) - ALLOWED_PARENTS[model]
                if bad:
                    raise TermSpecError(
                        f"{name} model term {format_term(t)} uses {sorted(bad)}, "
                        f"which are not causally prior to {model}"
                    )

    def check_variant(self, variant: str) -> None:
        """Raise if a restricted fit would let A act directly on M or Y."""
        if variant not in ("restricted", "unrestricted"):
            raise ValueError(f"unknown variant {variant!r}")
        if variant == "restricted":
            for name in ("M", "Y", "gstar_M"):
                terms = getattr(self, name) or ()
                if any("A" in t for t in terms):
                    raise TermSpecError(f"restricted variant forbids A in the {name} terms")

    def replace(self, **changes) -> "TermSpec":
        values = {k: getattr(self, k) for k in self.__dataclass_fields__}
        values.update(changes)
        return TermSpec(**values)

    def unrestricted(self) -> "TermSpec":
        """Copy with a main effect of A added to the mediator and outcome models."""

        def add(ts):
            return tuple(ts) + ((("A",),) if ("A",) not in ts else ())

        changes = {"M": add(self.M), "Y": add(self.Y)}
        if self.gstar_M is not None:
            changes["gstar_M"] = add(self.gstar_M)
        return self.replace(**changes)

    def to_dict(self) -> dict[str, list[str]]:
        out = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            if v is not None:
                out[k] = ["1"] + [format_term(t) for t in v]
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Sequence[str]]) -> "TermSpec":
        return cls(**{k: tuple(v) for k, v in d.items()})


# --------------------------------------------------------------------------
# CSV


def _parse_bit(cell: str, row: int, col: str) -> int:
    cell = cell.strip()
    if cell not in ("0", "1"):
        try:
            float(cell)
        except ValueError:
            raise CSVParseError(f"row {row}, column {col}: cannot parse {cell!r}") from None
        raise DataError(f"row {row}, column {col}: non-binary value {cell!r}")
    return int(cell)


def load_csv(path) -> Dataset:
    """Read a ``S,W1,W2,A,Z,M,Y`` CSV file; an empty Y cell means absent."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip().upper() for h in next(reader)]
        except StopIteration:
            raise CSVParseError(f"{path}: empty file") from None
        if tuple(header) != COLUMNS:
            raise CSVParseError(f"{path}: header must be {','.join(COLUMNS)}, got {','.join(header)}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(COLUMNS):
                raise CSVParseError(f"row {lineno}: expected {len(COLUMNS)} fields, got {len(rec)}")
            bits = [_parse_bit(c, lineno, name) for c, name in zip(rec[:6], COLUMNS)]
            ycell = rec[6].strip()
            if bits[0] == 0:
                if ycell:
                    raise DataError(f"row {lineno}: Y present on an S=0 row")
                y = np.nan
            else:
                if not ycell:
                    raise DataError(f"row {lineno}: Y missing on an S=1 row")
                y = float(_parse_bit(ycell, lineno, "Y"))
            rows.append(bits + [y])
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.array(rows, dtype=float)
    if not np.any(arr[:, 0] == 0):
        raise DataError("no target-site rows (S=0)")
    if not np.any(arr[:, 0] == 1):
        raise DataError("no source-site rows (S=1)")
    return Dataset(*arr[:, :6].T, y=arr[:, 6])


def write_csv(dataset: Dataset, path) -> Path:
    """Write ``dataset`` in the ``S,W1,W2,A,Z,M,Y`` format (frequency weights are not stored)."""
    if not np.all(dataset.weights == 1):
        raise DataError("only unit-weight datasets can be written as CSV")
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(COLUMNS) + "\n")
        for s, w1, w2, a, z, m, y in zip(
            dataset.s, dataset.w1, dataset.w2, dataset.a, dataset.z, dataset.m, dataset.y
        ):
            ycell = "" if s == 0 else str(int(y))
            fh.write(f"{s},{w1},{w2},{a},{z},{m},{ycell}\n")
    return path


# --------------------------------------------------------------------------
# positivity screen


def validate(dataset: Dataset) -> list[str]:
    """Report empirical positivity violations.

    Checks that every observed (S, W) cell shows both levels of A, every
    (S=1, W, A) cell shows both levels of Z, and every (S=1, Z, W) cell shows
    both levels of M. Rows with zero weight are ignored. Returns an empty list
    when the screen passes.
    """
    keep = dataset.weights > 0
    s, w1, w2 = dataset.s[keep], dataset.w1[keep], dataset.w2[keep]
    a, z, m = dataset.a[keep], dataset.z[keep], dataset.m[keep]
    problems = []

    def screen(mask_vars, names, target, label):
        keys = np.stack(mask_vars, axis=1)
        for key in sorted({tuple(k) for k in keys.tolist()}):
            sel = np.all(keys == key, axis=1)
            levels = np.unique(target[sel])
            if len(levels) < 2:
                cell = ", ".join(f"{n}={v}" for n, v in zip(names, key))
                problems.append(f"{label} takes only the value {int(levels[0])} in cell ({cell})")

    screen([s, w1, w2], ("S", "W1", "W2"), a, "A")
    src = s == 1
    screen([s[src], w1[src], w2[src], a[src]], ("S", "W1", "W2", "A"), z[src], "Z")
    screen([s[src], z[src], w1[src], w2[src]], ("S", "Z", "W1", "W2"), m[src], "M")
    return problems
