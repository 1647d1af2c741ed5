"""Nuisance regressions and the per-row quantities every estimator consumes."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .data import Dataset, InterventionSpec, Term, TermSpec
from .glm import LogisticFit, build_design, fit_logistic, predict_prob

VARIANTS = ("restricted", "unrestricted")


class NuisanceError(RuntimeError):
    pass


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class Model:
    """A fitted logistic regression together with the terms it was fit on."""

    terms: tuple[Term, ...]
    fit: LogisticFit

    def prob(self, cols: Mapping[str, np.ndarray], **overrides) -> np.ndarray:
        return predict_prob(self.fit, build_design(cols, self.terms, overrides))


@dataclass(frozen=True, eq=False)
class NuisanceFits:
    variant: str
    terms: TermSpec
    A: Model
    Z: Model
    M: Model
    S: Model
    Y: Model
    p_S0: float
    gstar_M: Model
    gstar_Z: Model
    diagnostics: tuple[str, ...] = ()

    @property
    def converged(self) -> bool:
        return not self.diagnostics


def _fit(dataset: Dataset, cols, terms, response: str, mask=None) -> Model:
    w = dataset.weights if mask is None else np.where(mask, dataset.weights, 0.0)
    X = build_design(cols, terms)
    return Model(tuple(terms), fit_logistic(X, cols[response], weights=w))


def fit_nuisance(
    dataset: Dataset,
    terms: TermSpec,
    variant: str = "restricted",
    reuse: Optional[NuisanceFits] = None,
) -> NuisanceFits:
    """Fit the A, Z, M, S and outcome regressions.

    The outcome model uses only source-site rows (S=1); every other model uses
    all rows. Frequency weights are respected throughout. ``reuse`` lets the
    A, Z and S fits of another variant on the same data be shared.
    """
    terms.check_variant(variant)
    cols = dataset.columns()
    src = dataset.s == 1
    ys = dataset.y[src & (dataset.weights > 0)]
    if len(np.unique(ys)) < 2:
        raise NuisanceError("all source-site outcomes are identical; outcome model is degenerate")

    def shared(name):
        if reuse is not None and getattr(reuse.terms, name) == getattr(terms, name):
            return getattr(reuse, name)
        return _fit(dataset, cols, getattr(terms, name), name)

    fit_A, fit_Z, fit_S = shared("A"), shared("Z"), shared("S")
    fit_M = _fit(dataset, cols, terms.M, "M")
    fit_Y = _fit(dataset, cols, terms.Y, "Y", mask=src)
    g_M = fit_M if terms.gstar_M is None else _fit(dataset, cols, terms.gstar_M, "M")
    if terms.gstar_Z is None:
        g_Z = fit_Z
    elif reuse is not None and reuse.terms.gstar_Z == terms.gstar_Z:
        g_Z = reuse.gstar_Z
    else:
        g_Z = _fit(dataset, cols, terms.gstar_Z, "Z")
    p_S0 = float(dataset.weights[~src].sum() / dataset.weights.sum())
    diags = []
    for name, model in (("A", fit_A), ("Z", fit_Z), ("M", fit_M), ("S", fit_S), ("Y", fit_Y),
                        ("gstar_M", g_M), ("gstar_Z", g_Z)):
        if not model.fit.converged:
            diags.append(f"{name} model: {model.fit.message}")
    if diags:
        warnings.warn("; ".join(diags), ConvergenceWarning, stacklevel=2)
    return NuisanceFits(variant, terms, fit_A, fit_Z, fit_M, fit_S, fit_Y, p_S0, g_M, g_Z, tuple(diags))


def _covariate_cols(w1, w2) -> dict[str, np.ndarray]:
    w1, w2 = np.broadcast_arrays(np.asarray(w1, dtype=float), np.asarray(w2, dtype=float))
    return {"W1": np.atleast_1d(w1), "W2": np.atleast_1d(w2)}


def stochastic_intervention(fits: NuisanceFits, w1, w2, spec: InterventionSpec) -> np.ndarray:
    """``g*(M=1 | W)``: the mediator law at site ``s_ref`` with ``A`` set to ``a_star``.

    Sums ``P(M=1 | Z=z, [A=a*,] W, S=s_ref) P(Z=z | A=a*, W, S=s_ref)`` over z.
    """
    cols = _covariate_cols(w1, w2)
    fix = {"A": spec.a_star, "S": spec.s_ref}
    pz1 = fits.gstar_Z.prob(cols, **fix)
    pm_z1 = fits.gstar_M.prob(cols, Z=1, **fix)
    pm_z0 = fits.gstar_M.prob(cols, Z=0, **fix)
    return pm_z1 * pz1 + pm_z0 * (1 - pz1)


def marginal_z(fits: NuisanceFits, w1, w2, z, s) -> np.ndarray:
    """``p_Z(z | W, S=s)`` with the instrument averaged out under ``p_A``."""
    if fits.variant != "restricted":
        raise NuisanceError("the marginal Z density is only used by the restricted variant")
    cols = _covariate_cols(w1, w2)
    z = np.broadcast_to(np.asarray(z, dtype=float), cols["W1"].shape)
    pa1 = fits.A.prob(cols, S=s)
    out = 0.0
    for a, pa in ((1, pa1), (0, 1 - pa1)):
        pz1 = fits.Z.prob(cols, A=a, S=s)
        out = out + np.where(z == 1, pz1, 1 - pz1) * pa
    return out


@dataclass(frozen=True, eq=False)
class NuisancePredictions:
    """Per-row factors of the weights and efficient influence curves for one spec.

    Names read ``<density>_<conditioning>``: e.g. ``pZ_a_s0`` is
    ``p_Z(Z_i | A=a, W_i, S=0)`` at the observed ``Z_i``. Outcome regressions
    are evaluated at the observed (Z, W) and, for the unrestricted variant, at
    the observed A.
    """

    spec: InterventionSpec
    variant: str
    gstar1: np.ndarray  # g*(M=1 | W)
    gstar_obs: np.ndarray  # g*(M_i | W)
    pZ_a_s0: np.ndarray
    pZ_a_s1: np.ndarray
    pZ_marg_s1: Optional[np.ndarray]
    pA_a_s0: np.ndarray
    pA_a_s1: np.ndarray
    pS0_w: np.ndarray
    pS1_w: np.ndarray
    pM_obs: np.ndarray  # p_M(M_i | Z_i, [A=a,] W, S=1)
    qY_obs: np.ndarray
    qY_m0: np.ndarray
    qY_m1: np.ndarray
    p_S0: float
    extras: dict = field(default_factory=dict)

    def gstar(self, m) -> np.ndarray:
        return np.where(np.asarray(m) == 1, self.gstar1, 1 - self.gstar1)


def _clip(p, floor):
    return np.clip(p, floor, 1 - floor) if floor > 0 else p


def predict_all(
    fits: NuisanceFits, dataset: Dataset, spec: InterventionSpec, clip: float = 0.0
) -> NuisancePredictions:
    """Evaluate every nuisance factor needed for ``spec`` on each row of ``dataset``.

    ``clip`` bounds the density factors that appear in ratios to
    ``[clip, 1 - clip]``; outcome regressions are never clipped.
    """
    cols = dataset.columns()
    a, s_ref = spec.a, spec.s_ref
    z, m = cols["Z"], cols["M"]
    at = lambda p, v: np.where(v == 1, p, 1 - p)  # noqa: E731

    gstar1 = stochastic_intervention(fits, cols["W1"], cols["W2"], spec)
    pz0 = fits.Z.prob(cols, A=a, S=0)
    pz1 = fits.Z.prob(cols, A=a, S=1)
    pa_s0 = fits.A.prob(cols, S=0)
    pa_s1 = fits.A.prob(cols, S=1)
    ps1 = fits.S.prob(cols)
    if fits.variant == "restricted":
        pm = fits.M.prob(cols, S=1)
        pz_marg = marginal_z(fits, cols["W1"], cols["W2"], z, 1)
    else:
        pm = fits.M.prob(cols, A=a, S=1)
        pz_marg = None
    qy = fits.Y.prob(cols)
    qy0 = fits.Y.prob(cols, M=0)
    qy1 = fits.Y.prob(cols, M=1)

    return NuisancePredictions(
        spec=spec,
        variant=fits.variant,
        gstar1=gstar1,
        gstar_obs=_clip(at(gstar1, m), clip),
        pZ_a_s0=_clip(at(pz0, z), clip),
        pZ_a_s1=_clip(at(pz1, z), clip),
        pZ_marg_s1=None if pz_marg is None else _clip(pz_marg, clip),
        pA_a_s0=_clip(at(pa_s0, a), clip),
        pA_a_s1=_clip(at(pa_s1, a), clip),
        pS0_w=_clip(1 - ps1, clip),
        pS1_w=_clip(ps1, clip),
        pM_obs=_clip(at(pm, m), clip),
        qY_obs=qy,
        qY_m0=qy0,
        qY_m1=qy1,
        p_S0=fits.p_S0,
    )
