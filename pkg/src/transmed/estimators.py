"""Stabilized IPTW, one-step estimating-equation and TMLE estimators.

Each estimator returns ``psi(a, a*)`` for one :class:`InterventionSpec` along
with its per-row influence-curve values. Direct and indirect effects are
differences of two such estimates, and their influence curves are the
differences of the component curves.

All sums are frequency-weighted, so a collapsed dataset (unique rows with
counts) gives the same answer as the expanded one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit, logit

from .data import Dataset, InterventionSpec, TermSpec, effect_specs
from .glm import build_design, fit_logistic, predict_prob
from .nuisance import NuisanceFits, NuisancePredictions, fit_nuisance, predict_all

ESTIMATORS = ("tmle_eff", "tmle_gen", "ee_eff", "ee_gen", "iptw")
VARIANT_OF = {
    "tmle_eff": "restricted",
    "ee_eff": "restricted",
    "iptw": "restricted",
    "tmle_gen": "unrestricted",
    "ee_gen": "unrestricted",
}
Z_CRIT = 1.959963984540054
# Offsets for the targeting step are formed from predictions bounded away from 0 and 1.
_OFFSET_EPS = 1e-9


class EstimationError(RuntimeError):
    pass


class PositivityError(EstimationError):
    pass


class BootstrapError(EstimationError):
    pass


def wmean(x, w) -> float:
    return float(np.dot(w, x) / np.sum(w))


def ic_standard_error(ic, weights=None) -> float:
    """Sample standard deviation of ``ic`` divided by sqrt(n), frequency-weighted."""
    ic = np.asarray(ic, dtype=float)
    w = np.ones(len(ic)) if weights is None else np.asarray(weights, dtype=float)
    n = w.sum()
    if n <= 1:
        return float("nan")
    mu = np.dot(w, ic) / n
    var = np.dot(w, (ic - mu) ** 2) / (n - 1)
    return float(np.sqrt(var / n))


def wald_ci(est, se) -> tuple[float, float]:
    if se is None or not np.isfinite(se):
        return (float("nan"), float("nan"))
    return (est - Z_CRIT * se, est + Z_CRIT * se)


@dataclass(eq=False)
class EstimateResult:
    psi: float
    ic: np.ndarray
    se_ic: float
    estimator: str
    variant: str
    spec: InterventionSpec
    diagnostics: dict = field(default_factory=dict)


@dataclass(eq=False)
class EffectEstimate:
    effect: str
    estimate: float
    ic: np.ndarray
    se_ic: float
    se_boot: Optional[float] = None
    estimator: str = ""

    @property
    def ci_ic(self) -> tuple[float, float]:
        return wald_ci(self.estimate, self.se_ic)

    @property
    def ci_boot(self) -> tuple[float, float]:
        return wald_ci(self.estimate, self.se_boot)


def _ratio(num, den, indicator, what):
    """``num / den`` on rows where ``indicator`` is set, 0 elsewhere."""
    bad = indicator & ~(den > 0)
    if np.any(bad):
        row = int(np.flatnonzero(bad)[0])
        raise PositivityError(f"zero {what} denominator at row {row}")
    out = np.zeros(len(num))
    out[indicator] = num[indicator] / den[indicator]
    return out


# --------------------------------------------------------------------------
# weights


def iptw_weights(preds: NuisancePredictions, dataset: Dataset) -> np.ndarray:
    """Inverse-probability weights with indicator ``I(S=1, A=a)``.

    The mediator density in the denominator is whatever ``preds`` carries; the
    IPTW estimator is always run on restricted-variant predictions.
    """
    ind = (dataset.s == 1) & (dataset.a == preds.spec.a)
    num = preds.gstar_obs * preds.pZ_a_s0 * preds.pS0_w
    den = preds.pM_obs * preds.pZ_a_s1 * preds.pA_a_s1 * preds.pS1_w * preds.p_S0
    return _ratio(num, den, ind, "weight")


def outcome_weights(preds: NuisancePredictions, dataset: Dataset) -> np.ndarray:
    """Weights of the outcome residual in the efficient influence curve.

    Restricted: indicator ``I(S=1)`` with the marginal ``p_Z(Z | W, S=1)``.
    Unrestricted: identical to :func:`iptw_weights` (indicator ``I(S=1, A=a)``).
    """
    if preds.variant == "unrestricted":
        return iptw_weights(preds, dataset)
    ind = dataset.s == 1
    num = preds.gstar_obs * preds.pZ_a_s0 * preds.pS0_w
    den = preds.pM_obs * preds.pZ_marg_s1 * preds.pS1_w * preds.p_S0
    return _ratio(num, den, ind, "outcome weight")


def intermediate_weights(preds: NuisancePredictions, dataset: Dataset) -> np.ndarray:
    """``I(S=0, A=a) / (p_A(a | W, S=0) P(S=0))``."""
    ind = (dataset.s == 0) & (dataset.a == preds.spec.a)
    return _ratio(np.ones(len(ind)), preds.pA_a_s0 * preds.p_S0, ind, "treatment")


# --------------------------------------------------------------------------
# IPTW


def estimate_iptw(
    dataset: Dataset, preds: NuisancePredictions, spec: Optional[InterventionSpec] = None
) -> EstimateResult:
    """Weighted outcome mean among S=1, A=a rows, stabilized by the mean weight."""
    spec = spec or preds.spec
    w = dataset.weights
    H = iptw_weights(preds, dataset)
    mean_H = wmean(H, w)
    if not mean_H > 0:
        raise EstimationError("no effective observations: all weights are zero")
    y = np.where(dataset.s == 1, dataset.y, 0.0)
    psi = float(np.dot(w, H * y) / np.dot(w, H))
    ic = H / mean_H * (y - psi)
    return EstimateResult(
        psi, ic, ic_standard_error(ic, w), "iptw", preds.variant, spec,
        {"mean_weight": mean_H, "max_weight": float(H.max())},
    )


# --------------------------------------------------------------------------
# efficient influence curve


@dataclass(eq=False)
class EICComponents:
    D_Y: np.ndarray
    D_Z: np.ndarray
    D_W: np.ndarray
    qY_obs: np.ndarray
    qM: np.ndarray
    qZ: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.D_Y + self.D_Z + self.D_W


def marginalize_outcome(preds: NuisancePredictions, qY_m0=None, qY_m1=None) -> np.ndarray:
    """``sum_m Qbar_Y(m, Z, [A,] W) g*(m | W)`` per row."""
    q0 = preds.qY_m0 if qY_m0 is None else qY_m0
    q1 = preds.qY_m1 if qY_m1 is None else qY_m1
    return q1 * preds.gstar1 + q0 * (1 - preds.gstar1)


def regress_intermediate(dataset: Dataset, qM: np.ndarray, terms, a: int):
    """Regress ``qM`` on (A, W, S) over all rows and predict at ``A = a``.

    Returns the predictions and the fit.
    """
    cols = dataset.columns()
    fit = fit_logistic(build_design(cols, terms), qM, weights=dataset.weights)
    return predict_prob(fit, build_design(cols, terms, {"A": a})), fit


def eic_components(
    dataset: Dataset,
    preds: NuisancePredictions,
    psi: float,
    qz_terms=None,
    qY_obs=None,
    qM=None,
    qZ=None,
) -> EICComponents:
    """Evaluate the three orthogonal pieces of the efficient influence curve.

    ``qM`` and ``qZ`` are computed from ``preds`` when not supplied (``qZ``
    then needs ``qz_terms``). The restricted or unrestricted form follows
    ``preds.variant``.
    """
    a = preds.spec.a
    y = np.where(dataset.s == 1, dataset.y, 0.0)
    qY_obs = preds.qY_obs if qY_obs is None else qY_obs
    if qM is None:
        qM = marginalize_outcome(preds)
    if qZ is None:
        if qz_terms is None:
            raise ValueError("qz_terms are required to form the intermediate regression")
        qZ, _ = regress_intermediate(dataset, qM, qz_terms, a)
    H_Y = outcome_weights(preds, dataset)
    H_Z = intermediate_weights(preds, dataset)
    D_Y = (y - qY_obs) * H_Y
    D_Z = (qM - qZ) * H_Z
    D_W = (qZ - psi) * (dataset.s == 0) / preds.p_S0
    return EICComponents(D_Y, D_Z, D_W, qY_obs, qM, qZ)


def estimate_ee(
    dataset: Dataset,
    preds: NuisancePredictions,
    qz_terms,
    spec: Optional[InterventionSpec] = None,
) -> EstimateResult:
    """One-step estimator: plug-in plus the mean of the estimated influence curve.

    The curve is affine in ``psi``, so this is the exact root of its empirical
    mean.
    """
    spec = spec or preds.spec
    w = dataset.weights
    target = dataset.s == 0
    qM = marginalize_outcome(preds)
    qZ, qz_fit = regress_intermediate(dataset, qM, qz_terms, spec.a)
    psi0 = wmean(qZ[target], w[target])
    pieces0 = eic_components(dataset, preds, psi0, qM=qM, qZ=qZ)
    psi = psi0 + wmean(pieces0.total, w)
    pieces = eic_components(dataset, preds, psi, qM=qM, qZ=qZ)
    ic = pieces.total
    est = "ee_eff" if preds.variant == "restricted" else "ee_gen"
    return EstimateResult(
        psi, ic, ic_standard_error(ic, w), est, preds.variant, spec,
        {
            "psi_plugin": psi0,
            "one_step_residual": psi - psi0 - wmean(pieces0.D_Y + pieces0.D_Z, w) - wmean(pieces0.D_W, w),
            "mean_D_Y": wmean(pieces0.D_Y, w),
            "mean_D_Z": wmean(pieces0.D_Z, w),
            "mean_D_W_plugin": wmean(pieces0.D_W, w),
            "mean_eic": wmean(ic, w),
            "qz_converged": qz_fit.converged,
        },
    )


def _bounded_logit(p):
    return logit(np.clip(p, _OFFSET_EPS, 1 - _OFFSET_EPS))


def _fluctuate(response, offset, weights, what):
    """Intercept-only weighted logistic fit with a fixed offset."""
    keep = weights > 0
    fit = fit_logistic(np.ones((int(keep.sum()), 1)), response[keep], weights[keep], offset[keep])
    if not fit.converged:
        raise EstimationError(f"{what} fluctuation did not converge: {fit.message}")
    return float(fit.coef[0])


def estimate_tmle(
    dataset: Dataset,
    preds: NuisancePredictions,
    qz_terms,
    spec: Optional[InterventionSpec] = None,
) -> EstimateResult:
    """Two-stage targeted substitution estimator.

    1. Update the outcome regression by a weighted intercept fluctuation on the
       logit scale, using the outcome weights of the efficient influence curve.
    2. Marginalize the updated outcome regression over ``g*``.
    3. Regress that on (A, W, S), predict at ``A = a``, and update it with a
       second intercept fluctuation weighted by ``I(S=0, A=a) / p_A``.
    4. Average the updated prediction over the target site.
    """
    spec = spec or preds.spec
    w = dataset.weights
    y = np.where(dataset.s == 1, dataset.y, 0.0)
    target = dataset.s == 0

    H_Y = outcome_weights(preds, dataset)
    if not np.any((H_Y > 0) & (w > 0)):
        raise EstimationError("no effective observations for the outcome fluctuation")
    eps_Y = _fluctuate(y, _bounded_logit(preds.qY_obs), w * H_Y, "outcome")
    qY_obs = expit(_bounded_logit(preds.qY_obs) + eps_Y)
    qY_m0 = expit(_bounded_logit(preds.qY_m0) + eps_Y)
    qY_m1 = expit(_bounded_logit(preds.qY_m1) + eps_Y)
    qM = marginalize_outcome(preds, qY_m0, qY_m1)

    qZ0, qz_fit = regress_intermediate(dataset, qM, qz_terms, spec.a)
    H_Z = intermediate_weights(preds, dataset)
    if not np.any((H_Z > 0) & (w > 0)):
        raise EstimationError("no effective observations for the intermediate fluctuation")
    eps_Z = _fluctuate(qM, _bounded_logit(qZ0), w * H_Z, "intermediate")
    qZ = expit(_bounded_logit(qZ0) + eps_Z)

    psi = wmean(qZ[target], w[target])
    pieces = eic_components(dataset, preds, psi, qY_obs=qY_obs, qM=qM, qZ=qZ)
    ic = pieces.total
    est = "tmle_eff" if preds.variant == "restricted" else "tmle_gen"
    return EstimateResult(
        psi, ic, ic_standard_error(ic, w), est, preds.variant, spec,
        {
            "eps_Y": eps_Y,
            "eps_Z": eps_Z,
            "mean_D_Y": wmean(pieces.D_Y, w),
            "mean_D_Z": wmean(pieces.D_Z, w),
            "mean_D_W": wmean(pieces.D_W, w),
            "mean_eic": wmean(ic, w),
            "qz_converged": qz_fit.converged,
        },
    )


# --------------------------------------------------------------------------
# contrasts


def effects(
    psi_10: EstimateResult, psi_00: EstimateResult, psi_11: EstimateResult, weights=None
) -> tuple[EffectEstimate, EffectEstimate]:
    """Direct effect ``psi(1,0) - psi(0,0)`` and indirect effect ``psi(1,1) - psi(1,0)``."""
    ids = {psi_10.estimator, psi_00.estimator, psi_11.estimator}
    if len(ids) != 1:
        raise ValueError(f"mismatched estimator ids {sorted(ids)}")
    est = ids.pop()
    sde_ic = psi_10.ic - psi_00.ic
    sie_ic = psi_11.ic - psi_10.ic
    sde = EffectEstimate("SDE", psi_10.psi - psi_00.psi, sde_ic, ic_standard_error(sde_ic, weights), estimator=est)
    sie = EffectEstimate("SIE", psi_11.psi - psi_10.psi, sie_ic, ic_standard_error(sie_ic, weights), estimator=est)
    return sde, sie


@dataclass(eq=False)
class EstimatorEffects:
    """Everything one estimator produced on one dataset."""

    estimator: str
    components: dict[str, EstimateResult] = field(default_factory=dict)
    SDE: Optional[EffectEstimate] = None
    SIE: Optional[EffectEstimate] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def fit_variants(
    dataset: Dataset,
    terms: TermSpec,
    unrestricted_terms: Optional[TermSpec] = None,
    estimators: Sequence[str] = ESTIMATORS,
) -> dict[str, NuisanceFits]:
    variants = {VARIANT_OF[e] for e in estimators}
    fits: dict[str, NuisanceFits] = {}
    if "restricted" in variants:
        fits["restricted"] = fit_nuisance(dataset, terms, "restricted")
    if "unrestricted" in variants:
        fits["unrestricted"] = fit_nuisance(
            dataset,
            unrestricted_terms or terms.unrestricted(),
            "unrestricted",
            reuse=fits.get("restricted"),
        )
    return fits


def run_estimator(
    name: str, dataset: Dataset, preds: NuisancePredictions, qz_terms
) -> EstimateResult:
    if name == "iptw":
        res = estimate_iptw(dataset, preds)
    elif name.startswith("ee"):
        res = estimate_ee(dataset, preds, qz_terms)
    elif name.startswith("tmle"):
        res = estimate_tmle(dataset, preds, qz_terms)
    else:
        raise ValueError(f"unknown estimator {name!r}")
    if not np.isfinite(res.psi):
        raise EstimationError(f"{name} produced a non-finite estimate")
    return res


def estimate_effects(
    dataset: Dataset,
    terms: TermSpec,
    estimators: Sequence[str] = ESTIMATORS,
    s_ref: int = 0,
    clip: float = 0.0,
    unrestricted_terms: Optional[TermSpec] = None,
    raise_errors: bool = True,
    fits: Optional[Mapping[str, NuisanceFits]] = None,
) -> dict[str, EstimatorEffects]:
    """Fit nuisances once and run each estimator for psi(1,0), psi(0,0), psi(1,1).

    With ``raise_errors=False`` an estimator that fails is reported through
    :attr:`EstimatorEffects.error` instead of aborting the others. ``fits``
    (from :func:`fit_variants`) skips the nuisance fitting.
    """
    for e in estimators:
        if e not in VARIANT_OF:
            raise ValueError(f"unknown estimator {e!r}; choose from {ESTIMATORS}")
    if fits is None:
        fits = fit_variants(dataset, terms, unrestricted_terms, estimators)
    specs = effect_specs(s_ref)
    preds = {
        (variant, key): predict_all(f, dataset, spec, clip)
        for variant, f in fits.items()
        for key, spec in specs.items()
    }
    out: dict[str, EstimatorEffects] = {}
    for e in estimators:
        variant = VARIANT_OF[e]
        qz = fits[variant].terms.QZ
        res = EstimatorEffects(e)
        try:
            for key in specs:
                res.components[key] = run_estimator(e, dataset, preds[(variant, key)], qz)
            res.SDE, res.SIE = effects(
                res.components["10"], res.components["00"], res.components["11"], dataset.weights
            )
        except (EstimationError, FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
            if raise_errors:
                raise
            res.error = f"{type(exc).__name__}: {exc}"
        out[e] = res
    return out


# --------------------------------------------------------------------------
# bootstrap


@dataclass(eq=False)
class BootstrapResult:
    se: dict[str, dict[str, float]]
    estimates: dict[str, np.ndarray]  # estimator -> (B_ok, 2) array of (SDE, SIE)
    failures: dict[str, int]
    errors: dict[str, str] = field(default_factory=dict)


def resample_weights(dataset: Dataset, rng: np.random.Generator) -> np.ndarray:
    """Counts for one nonparametric bootstrap draw of ``n`` rows with replacement."""
    w = dataset.weights
    n = int(round(w.sum()))
    if not np.allclose(w, np.round(w)):
        raise BootstrapError("bootstrap needs integer frequency weights")
    if np.all(w == 1):
        return np.bincount(rng.integers(0, dataset.n, size=n), minlength=dataset.n).astype(float)
    return rng.multinomial(n, w / w.sum()).astype(float)


def bootstrap_se(
    dataset: Dataset,
    terms: TermSpec,
    B: int,
    seed,
    estimators: Sequence[str] = ESTIMATORS,
    s_ref: int = 0,
    clip: float = 0.0,
    unrestricted_terms: Optional[TermSpec] = None,
    max_failure_rate: float = 0.2,
) -> BootstrapResult:
    """Standard deviation of the effect estimates over ``B`` full re-fits.

    Each resample redraws ``n`` rows with replacement and re-runs nuisance
    fitting and estimation. Failed resamples are dropped and counted; an
    estimator with more than ``max_failure_rate`` failures gets a NaN SE and
    an entry in ``errors``.
    """
    if B < 2:
        raise ValueError("bootstrap needs B >= 2")
    rng = np.random.default_rng(seed)
    draws = {e: [] for e in estimators}
    failures = {e: 0 for e in estimators}
    for _ in range(B):
        counts = resample_weights(dataset, rng)
        try:
            boot = dataset.with_weights(counts)
            res = estimate_effects(
                boot, terms, estimators, s_ref, clip, unrestricted_terms, raise_errors=False
            )
        except Exception:  # noqa: BLE001 - any failed refit drops the resample
            for e in estimators:
                failures[e] += 1
            continue
        for e in estimators:
            r = res[e]
            if r.ok and np.isfinite(r.SDE.estimate) and np.isfinite(r.SIE.estimate):
                draws[e].append((r.SDE.estimate, r.SIE.estimate))
            else:
                failures[e] += 1
    se, estimates, errors = {}, {}, {}
    for e in estimators:
        arr = np.array(draws[e], dtype=float).reshape(-1, 2)
        estimates[e] = arr
        if failures[e] > max_failure_rate * B or len(arr) < 2:
            errors[e] = f"{failures[e]} of {B} bootstrap resamples failed"
            se[e] = {"SDE": float("nan"), "SIE": float("nan")}
        else:
            sd = arr.std(axis=0, ddof=1)
            se[e] = {"SDE": float(sd[0]), "SIE": float(sd[1])}
    return BootstrapResult(se, estimates, failures, errors)
