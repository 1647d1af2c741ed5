"""The three simulation data-generating mechanisms.

Each mechanism draws ``W1 -> W2 -> S -> A -> Z -> M -> Y`` from logistic
structural equations. The canonical numbering is the appendix one; the main
text swaps mechanisms 1 and 2, so :func:`get_dgm` accepts either labeling.

Sampling uses the counter-based Philox generator with the counter advanced to
the row index, so row ``i`` of a sample is the same no matter how the rows are
split into chunks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations, product
from typing import Mapping, Optional

import numpy as np
from scipy.special import expit

from .data import Dataset, Term, TermSpec, parse_term

VARIABLE_ORDER = ("W1", "W2", "S", "A", "Z", "M", "Y")
PARENTS = {
    "W1": (),
    "W2": ("W1",),
    "S": ("W1", "W2"),
    "A": ("W1", "W2", "S"),
    "Z": ("A", "W1", "W2", "S"),
    "M": ("Z", "A", "W1", "W2", "S"),
    "Y": ("M", "Z", "A", "W1", "W2"),
}
# One Philox counter step yields four 64-bit words; two steps cover the seven draws of a row.
_DRAWS_PER_ROW = 8

LABELINGS = ("appendix", "main")
# main-text id -> appendix id; mechanism 3 appears only in the appendix
MAIN_TO_APPENDIX = {1: 2, 2: 1, 3: 3}


def _table(spec: Mapping[str, float]) -> dict[Term, float]:
    out: dict[Term, float] = {}
    for text, coef in spec.items():
        t = tuple(sorted(parse_term(text)))
        out[t] = out.get(t, 0.0) + coef
    return out


_COMMON = {
    "W1": {"1": 0.0},
    "W2": {"1": 0.4, "W1": 0.2},
    "S": {"1": -1.0, "W2": 3.0},
    "A": {"1": 0.0},
}

_TABLES = {
    1: {
        **_COMMON,
        "Z": {"A": -3, "S": -0.2, "W2": 2, "A*W2": 0.2, "A*S": -0.2, "W2*S": 0.2,
              "A*W2*S": 2, "1": -0.2},
        "M": {"Z": 1, "W2*Z": 6, "W2": -2, "1": -2},
        "Y": {"1": math.log(1.2), "Z": math.log(40), "M": -math.log(30),
              "W2": -math.log(1.2), "W2*Z": -math.log(40)},
    },
    2: {
        **_COMMON,
        "Z": {"A": -0.1, "S": -0.2, "W2": 0.2, "A*W2": 5, "A*S": 0.14, "W2*S": 0.2,
              "A*W2*S": -0.2, "1": -1},
        "M": {"Z": 1, "Z*W2": 3, "Z*S": 0.2, "W2*S": -0.2, "W2*Z": 2, "S": 0.2,
              "Z*W2*S": -0.2, "W2": -1, "1": -2},
        "Y": {"Z": -6, "Z*W2": 0.2, "Z*M": 2, "W2*M": 2, "W2": -2, "M": 4,
              "Z*W2*M": 1, "1": -0.2},
    },
    3: {
        **_COMMON,
        "Z": {"A": -3, "S": 2, "W2": 2, "A*W2": 0.2, "A*S": -0.2, "W2*S": 0.2,
              "A*W2*S": 2, "1": -0.2},
        "M": {"Z": 3, "Z*W2": -0.2, "Z*S": 0.2, "W2*S": -0.2, "W2*Z": 2, "S": 0.2,
              "Z*W2*S": -0.2, "W2": -1, "1": -2},
        "Y": {"Z": -6, "Z*W2": 0.2, "Z*M": 2, "W2*M": 2, "W2": -0.2, "M": 4,
              "Z*W2*M": 1, "1": -0.2},
    },
}


@dataclass(frozen=True)
class DgmSpec:
    """Logistic structural equations keyed by response variable.

    ``coefficients[var]`` maps a product term (sorted tuple of parent names,
    ``()`` for the intercept) to its coefficient on the logit scale.
    """

    id: int
    coefficients: Mapping[str, Mapping[Term, float]] = field(repr=False)
    labeling: str = "appendix"

    def linear_predictor(self, var: str, values: Mapping[str, np.ndarray]) -> np.ndarray:
        eta = 0.0
        for term, coef in self.coefficients[var].items():
            x = 1.0
            for v in term:
                x = x * values[v]
            eta = eta + coef * x
        return eta

    def terms(self, var: str) -> tuple[Term, ...]:
        """Non-intercept terms of the structural equation for ``var``."""
        return tuple(t for t in self.coefficients[var] if t)


def get_dgm(id: int, labeling: str = "appendix") -> DgmSpec:
    if labeling not in LABELINGS:
        raise ValueError(f"labeling must be one of {LABELINGS}")
    if id not in (1, 2, 3):
        raise ValueError(f"unknown data-generating mechanism {id!r}")
    canonical = MAIN_TO_APPENDIX[id] if labeling == "main" else id
    tables = {var: _table(t) for var, t in _TABLES[canonical].items()}
    return DgmSpec(canonical, tables, "appendix")


def custom_dgm(tables: Mapping[str, Mapping[str, float]], base: int = 1) -> DgmSpec:
    """Mechanism ``base`` with some structural equations replaced.

    ``tables`` maps a variable name to ``{term: coefficient}`` with terms
    written like ``"A*W2"`` and ``"1"`` for the intercept.
    """
    merged = dict(_TABLES[base])
    for var, t in tables.items():
        if var not in PARENTS:
            raise ValueError(f"unknown variable {var!r}")
        merged[var] = t
    coefs = {var: _table(t) for var, t in merged.items()}
    for var, table in coefs.items():
        for term in table:
            bad = set(term) - set(PARENTS[var])
            if bad:
                raise ValueError(f"{var} equation uses non-parents {sorted(bad)}")
    return DgmSpec(0, coefs, "custom")


def conditional_prob(dgm: DgmSpec, variable: str, **parents) -> float | np.ndarray:
    """``P(variable = 1 | parents)`` from the structural equation.

    Every parent that appears in the equation must be supplied (as a scalar or
    array); parents without a coefficient may be omitted.
    """
    if variable not in dgm.coefficients:
        raise ValueError(f"unknown variable {variable!r}")
    needed = {v for t in dgm.coefficients[variable] for v in t}
    values = {k.upper(): v for k, v in parents.items()}
    missing = needed - set(values)
    if missing:
        raise ValueError(f"missing parent values for {variable}: {sorted(missing)}")
    return expit(dgm.linear_predictor(variable, values))


def _philox(seed, start_row: int) -> np.random.Generator:
    key = np.random.SeedSequence(seed).generate_state(2, dtype=np.uint64)
    bg = np.random.Philox(key=key)
    bg.advance(start_row * (_DRAWS_PER_ROW // 4))
    return np.random.Generator(bg)


def sample(dgm: DgmSpec, n: int, seed, start: int = 0) -> Dataset:
    """Draw rows ``start .. start + n - 1`` of the stream identified by ``seed``.

    ``seed`` is anything accepted by :class:`numpy.random.SeedSequence`
    (an int or a sequence of ints).
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    u = _philox(seed, start).random((n, _DRAWS_PER_ROW))
    vals: dict[str, np.ndarray] = {}
    for j, var in enumerate(VARIABLE_ORDER):
        p = expit(dgm.linear_predictor(var, vals)) * np.ones(n)
        vals[var] = (u[:, j] < p).astype(float)
    y = np.where(vals["S"] == 1, vals["Y"], np.nan)
    return Dataset(vals["S"], vals["W1"], vals["W2"], vals["A"], vals["Z"], vals["M"], y)


def joint_table(dgm: DgmSpec) -> dict[str, np.ndarray]:
    """All 128 binary configurations with their probabilities under ``dgm``."""
    grid = np.array(list(product((0, 1), repeat=len(VARIABLE_ORDER))), dtype=float)
    vals = {v: grid[:, j] for j, v in enumerate(VARIABLE_ORDER)}
    prob = np.ones(len(grid))
    for var in VARIABLE_ORDER:
        p1 = expit(dgm.linear_predictor(var, vals)) * np.ones(len(grid))
        prob = prob * np.where(vals[var] == 1, p1, 1 - p1)
    vals["prob"] = prob
    return vals


def exact_dataset(dgm: DgmSpec) -> Dataset:
    """The true distribution as a 128-row frequency-weighted dataset.

    S=0 configurations keep their two Y-specific rows (with Y dropped), so
    every one of the 2^7 configurations is present with its true probability.
    """
    t = joint_table(dgm)
    y = np.where(t["S"] == 1, t["Y"], np.nan)
    return Dataset(t["S"], t["W1"], t["W2"], t["A"], t["Z"], t["M"], y, weights=t["prob"])


def correct_terms(dgm: DgmSpec, qz_terms: Optional[tuple[Term, ...]] = None) -> TermSpec:
    """Term lists that reproduce the structural equations exactly.

    The outcome-sequential regression (``QZ``) is saturated in (A, W2, S),
    which contains the true conditional mean whenever the Z, M and Y
    equations depend on W only through W2.
    """
    if qz_terms is None:
        qz_terms = tuple(
            tuple(t) for r in range(1, 4) for t in combinations(("A", "W2", "S"), r)
        )
    return TermSpec(
        A=dgm.terms("A"),
        Z=dgm.terms("Z"),
        M=dgm.terms("M"),
        S=dgm.terms("S"),
        Y=dgm.terms("Y"),
        QZ=qz_terms,
    )

