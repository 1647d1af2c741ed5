"""Weighted logistic regression by iteratively reweighted least squares.

Responses may be fractional (any value in [0, 1]); the fit then maximizes the
Bernoulli quasi-likelihood. A fixed offset is added to the linear predictor,
which is how the targeting fluctuations are expressed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from scipy.special import expit, xlogy

from .data import Dataset, Term, format_term

MAX_ITER = 100
DEVIANCE_TOL = 1e-10
SCORE_TOL = 1e-8
RIDGE = 1e-8
_PROB_EPS = 1e-9
_COND_MAX = 1e14
# |X beta| beyond this with fitted probabilities at the clip bound signals separation
_SEPARATION_ETA = 20.0


class GLMError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    values: np.ndarray
    labels: tuple[str, ...]

    @property
    def shape(self):
        return self.values.shape


def build_design(
    data: Union[Dataset, Mapping[str, np.ndarray]],
    terms: Sequence[Term],
    overrides: Optional[Mapping[str, float]] = None,
) -> DesignMatrix:
    """Intercept plus one column per product term.

    ``overrides`` pins variables to a fixed value in every row, which is how
    counterfactual predictions (e.g. ``A = a``, ``S = 0``) are formed.
    """
    cols = data.columns() if isinstance(data, Dataset) else data
    n = len(next(iter(cols.values())))
    overrides = dict(overrides or {})
    for v, val in overrides.items():
        if val not in (0, 1):
            raise GLMError(f"override {v}={val!r} must be 0 or 1")
    out = np.ones((n, len(terms) + 1))
    for j, term in enumerate(terms, start=1):
        for var in term:
            if var in overrides:
                if overrides[var] == 0:
                    out[:, j] = 0.0
            elif var in cols:
                out[:, j] *= cols[var]
            else:
                raise GLMError(f"unknown variable {var!r} in term {format_term(term)}")
    return DesignMatrix(out, ("1",) + tuple(format_term(t) for t in terms))


@dataclass(frozen=True, eq=False)
class LogisticFit:
    coef: np.ndarray
    converged: bool
    iterations: int
    deviance: float
    max_score: float
    labels: tuple[str, ...] = ()
    ridge: bool = False
    message: str = ""


def _values(X) -> np.ndarray:
    return X.values if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)


def _deviance(y, p, w):
    return 2.0 * float(np.sum(w * (xlogy(y, y) - xlogy(y, p) + xlogy(1 - y, 1 - y) - xlogy(1 - y, 1 - p))))


def fit_logistic(
    X,
    y,
    weights=None,
    offset=None,
    max_iter: int = MAX_ITER,
) -> LogisticFit:
    """Maximize the weighted Bernoulli log-likelihood ``sum w [y eta - log(1 + e^eta)]``.

    ``eta = X @ coef + offset``. Returns a fit flagged ``converged=False`` when
    the iteration limit is hit, under complete separation, or when the weighted normal
    equations were singular and a small ridge had to be added.
    """
    Xv = _values(X)
    labels = X.labels if isinstance(X, DesignMatrix) else ()
    n, p = Xv.shape
    y = np.asarray(y, dtype=float)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    off = np.zeros(n) if offset is None else np.broadcast_to(np.asarray(offset, dtype=float), (n,))
    if y.shape != (n,) or w.shape != (n,):
        raise GLMError("responses and weights must have one entry per design row")
    for name, arr in (("design", Xv), ("response", y), ("weights", w), ("offset", off)):
        if np.any(np.isnan(arr)):
            raise GLMError(f"NaN in {name}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise GLMError("weights must be finite and nonnegative")
    if np.any((y < 0) | (y > 1)):
        raise GLMError("responses must lie in [0, 1]")
    keep = w > 0
    if not np.all(keep):
        Xv, y, w, off = Xv[keep], y[keep], w[keep], off[keep]
    if not np.all(np.isfinite(off)):
        raise GLMError("offset must be finite on positive-weight rows")

    beta = np.zeros(p)
    eta = off.copy()
    mu = expit(eta)
    dev = _deviance(y, mu, w)
    used_ridge = False
    converged = False
    score = Xv.T @ (w * (y - mu))
    it = 0
    for it in range(1, max_iter + 1):
        mu_c = np.clip(mu, _PROB_EPS, 1 - _PROB_EPS)
        wk = w * mu_c * (1 - mu_c)
        info = (Xv * wk[:, None]).T @ Xv
        try:
            # rank deficiency shows up on the first pass; later ill-conditioning is checked at exit
            if (it == 1 or used_ridge) and np.linalg.cond(info) > _COND_MAX:
                raise np.linalg.LinAlgError
            step = np.linalg.solve(info, score)
            if not np.all(np.isfinite(step)):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            used_ridge = True
            step = np.linalg.solve(info + RIDGE * np.eye(p), score)
        # step halving keeps the deviance monotone
        for _ in range(30):
            cand = beta + step
            eta_c = Xv @ cand + off
            mu_new = expit(eta_c)
            dev_new = _deviance(y, mu_new, w)
            if np.isfinite(dev_new) and dev_new <= dev + 1e-12 * max(1.0, abs(dev)):
                break
            step = step / 2
        beta, eta, mu = cand, eta_c, mu_new
        score = Xv.T @ (w * (y - mu))
        change = abs(dev - dev_new)
        dev = dev_new
        if change < DEVIANCE_TOL and np.max(np.abs(score)) <= SCORE_TOL:
            converged = True
            break
    ill = False
    separated = ""
    if converged and not used_ridge:
        mu_c = np.clip(mu, _PROB_EPS, 1 - _PROB_EPS)
        ill = np.linalg.cond((Xv * (w * mu_c * (1 - mu_c))[:, None]).T @ Xv) > _COND_MAX
        at_bound = (mu < _PROB_EPS) | (mu > 1 - _PROB_EPS)
        if np.any(np.abs(Xv @ beta) > _SEPARATION_ETA) and np.any(at_bound):
            # complete separation has no finite optimum; in quasi-separation the
            # other cells are still estimated and the empty cells sit at 0 or 1
            separated = "complete" if np.all(at_bound) else "quasi"
    max_score = float(np.max(np.abs(score))) if p else 0.0
    msg = ""
    if used_ridge:
        msg = "singular weighted normal equations; ridge applied"
    elif ill:
        msg = "ill-conditioned information matrix at the solution (quasi-separation)"
    elif separated == "complete":
        msg = "complete separation: every fitted probability is numerically 0 or 1"
    elif not converged:
        msg = f"no convergence after {it} iterations (max |score| = {max_score:.3g})"
    elif separated == "quasi":
        msg = "quasi-separation: some fitted probabilities are numerically 0 or 1"
    return LogisticFit(
        coef=beta,
        converged=converged and not used_ridge and not ill and separated != "complete",
        iterations=it,
        deviance=dev,
        max_score=max_score,
        labels=labels,
        ridge=used_ridge,
        message=msg,
    )


def linear_predictor(fit: LogisticFit, X) -> np.ndarray:
    Xv = _values(X)
    if Xv.shape[1] != len(fit.coef):
        raise GLMError(f"design has {Xv.shape[1]} columns, fit has {len(fit.coef)} coefficients")
    return Xv @ fit.coef


def predict_prob(fit: LogisticFit, X, offset=None) -> np.ndarray:
    """``expit(X @ coef [+ offset])``, not clipped."""
    eta = linear_predictor(fit, X)
    if offset is not None:
        eta = eta + offset
    return expit(eta)


def log_likelihood(coef, X, y, weights=None, offset=None) -> float:
    Xv = _values(X)
    eta = Xv @ np.asarray(coef, dtype=float)
    if offset is not None:
        eta = eta + offset
    w = np.ones(len(eta)) if weights is None else np.asarray(weights, dtype=float)
    return float(np.sum(w * (np.asarray(y) * eta - np.logaddexp(0.0, eta))))


def score(coef, X, y, weights=None, offset=None) -> np.ndarray:
    """Analytic gradient of :func:`log_likelihood`."""
    Xv = _values(X)
    eta = Xv @ np.asarray(coef, dtype=float)
    if offset is not None:
        eta = eta + offset
    w = np.ones(len(eta)) if weights is None else np.asarray(weights, dtype=float)
    return Xv.T @ (w * (np.asarray(y) - expit(eta)))
