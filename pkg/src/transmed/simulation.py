"""Replicated simulation studies: bias, efficiency, coverage, RMSE, out-of-bounds.

A replication samples one dataset, fits every configured estimator under the
chosen misspecification scenario and records effect estimates with IC and
(optionally) bootstrap standard errors. Records are plain dicts so they can
cross process boundaries; :func:`summarize` reduces them in replication order
so the output does not depend on how the work was scheduled.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import TermSpec, effect_specs
from .dgp import LABELINGS, DgmSpec, correct_terms, get_dgm, sample
from .estimators import ESTIMATORS, VARIANT_OF, bootstrap_se, estimate_effects, fit_variants
from .nuisance import ConvergenceWarning, NuisanceFits, stochastic_intervention
from .truth import TruthReport, true_psi, truth_report

SCENARIOS = {
    "none": (),
    "y": ("Y",),
    "yz": ("Y", "Z"),
    "ym": ("Y", "M"),
    "ys": ("Y", "S"),
    "zms": ("Z", "M", "S"),
}
EFFECTS = ("SDE", "SIE")
EFF_SCALES = ("sd", "var")
TARGETS = ("data_dependent", "fixed")
SUMMARY_COLUMNS = (
    "estimator", "effect", "bias", "eff_ic", "eff_boot", "cover_ic", "cover_boot",
    "rmse", "pct_oob", "failures",
)
MISSPECIFIED_TERMS = (("W1",),)


class ConfigError(ValueError):
    pass


def apply_misspecification(terms: TermSpec, scenario: str, keep_gstar: bool = True) -> TermSpec:
    """Replace each model named by ``scenario`` with intercept + W1.

    With ``keep_gstar`` the stochastic intervention keeps being computed from
    the original mediator and intermediate models, so the target of inference
    does not move with the misspecification.
    """
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; choose from {sorted(SCENARIOS)}")
    names = SCENARIOS[scenario]
    if not names:
        return terms
    changes = {name: MISSPECIFIED_TERMS for name in names}
    if keep_gstar:
        if "M" in names and terms.gstar_M is None:
            changes["gstar_M"] = terms.M
        if "Z" in names and terms.gstar_Z is None:
            changes["gstar_Z"] = terms.Z
    return terms.replace(**changes)


@dataclass(frozen=True)
class SimConfig:
    dgm: int = 2
    labeling: str = "appendix"
    n: int = 5000
    reps: int = 200
    boot: int = 100
    seed: int = 1
    s_ref: int = 0
    estimators: tuple[str, ...] = ESTIMATORS
    scenario: str = "none"
    eff_scale: str = "sd"
    clip: float = 0.0
    keep_gstar: bool = True
    target: str = "data_dependent"

    def __post_init__(self):
        if self.dgm not in (1, 2, 3):
            raise ConfigError(f"dgm must be 1, 2 or 3, got {self.dgm!r}")
        if self.labeling not in LABELINGS:
            raise ConfigError(f"labeling must be one of {LABELINGS}")
        if self.labeling == "main" and self.dgm == 3:
            raise ConfigError("mechanism 3 has no main-text label; use --labeling appendix")
        if self.n < 10:
            raise ConfigError("n must be at least 10")
        if self.reps < 1:
            raise ConfigError("reps must be at least 1")
        if self.boot < 0 or self.boot == 1:
            raise ConfigError("boot must be 0 (disabled) or at least 2")
        if self.s_ref not in (0, 1):
            raise ConfigError("s_ref must be 0 or 1")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; choose from {sorted(SCENARIOS)}")
        if self.eff_scale not in EFF_SCALES:
            raise ConfigError(f"eff_scale must be one of {EFF_SCALES}")
        if self.target not in TARGETS:
            raise ConfigError(f"target must be one of {TARGETS}")
        if not 0 <= self.clip < 0.5:
            raise ConfigError("clip must lie in [0, 0.5)")
        if not self.estimators:
            raise ConfigError("at least one estimator is required")
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad:
            raise ConfigError(f"unknown estimators {bad}; choose from {ESTIMATORS}")
        object.__setattr__(self, "estimators", tuple(self.estimators))

    def dgm_spec(self) -> DgmSpec:
        return get_dgm(self.dgm, self.labeling)

    def terms(self) -> TermSpec:
        return apply_misspecification(correct_terms(self.dgm_spec()), self.scenario, self.keep_gstar)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["estimators"] = list(self.estimators)
        return d

    @classmethod
    def from_dict(cls, d) -> "SimConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("estimators"), str):
            d["estimators"] = tuple(e.strip() for e in d["estimators"].split(",") if e.strip())
        elif "estimators" in d:
            d["estimators"] = tuple(d["estimators"])
        return cls(**d)


def rep_seed(seed: int, rep_index: int) -> list[int]:
    return [int(seed), int(rep_index)]


def _out_of_bounds(psis: dict, sde: float, sie: float) -> bool:
    if any(not (0.0 <= p <= 1.0) for p in psis.values()):
        return True
    return not (-1.0 <= sde <= 1.0 and -1.0 <= sie <= 1.0)


def data_dependent_targets(dgm: DgmSpec, fits: NuisanceFits, s_ref: int) -> dict[str, float]:
    """``Psi_{g_n}(P_0)`` for each spec: the true law with the fitted intervention ``g_n``."""
    out = {}
    for key, spec in effect_specs(s_ref).items():
        g = lambda w1, w2, spec=spec: stochastic_intervention(fits, w1, w2, spec)  # noqa: E731
        out[key] = true_psi(dgm, spec, gstar1=g)
    return out


def run_replication(config: SimConfig, rep_index: int, terms: Optional[TermSpec] = None) -> dict:
    """One sampled dataset, all configured estimators, with per-estimator failures recorded.

    Each estimator entry carries ``target``: the data-dependent parameter
    evaluated with that estimator's own fitted intervention law.
    """
    dgm = config.dgm_spec()
    terms = terms or config.terms()
    record: dict = {"rep": rep_index, "estimators": {}, "error": None}
    try:
        data = sample(dgm, config.n, rep_seed(config.seed, rep_index)).collapse()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            fits = fit_variants(data, terms, estimators=config.estimators)
            targets = {v: data_dependent_targets(dgm, f, config.s_ref) for v, f in fits.items()}
            res = estimate_effects(
                data, terms, config.estimators, config.s_ref, config.clip, raise_errors=False,
                fits=fits,
            )
            boot = None
            if config.boot:
                boot = bootstrap_se(
                    data, terms, config.boot, rep_seed(config.seed, rep_index) + [1],
                    config.estimators, config.s_ref, config.clip,
                )
    except Exception as exc:  # noqa: BLE001 - a failed replication is data, not a crash
        record["error"] = f"{type(exc).__name__}: {exc}"
        return record
    for e in config.estimators:
        r = res[e]
        if not r.ok:
            record["estimators"][e] = {"error": r.error}
            continue
        psis = {k: c.psi for k, c in r.components.items()}
        tgt = targets[VARIANT_OF[e]]
        entry = {
            "error": None,
            "psi": psis,
            "target": {"SDE": tgt["10"] - tgt["00"], "SIE": tgt["11"] - tgt["10"]},
            "oob": _out_of_bounds(psis, r.SDE.estimate, r.SIE.estimate),
            "diagnostics": {
                k: {d: v for d, v in c.diagnostics.items() if isinstance(v, (int, float))}
                for k, c in r.components.items()
            },
        }
        for eff in (r.SDE, r.SIE):
            se_boot = None
            if boot is not None:
                se_boot = boot.se[e][eff.effect]
                if e in boot.errors:
                    entry["boot_error"] = boot.errors[e]
            entry[eff.effect] = {"estimate": eff.estimate, "se_ic": eff.se_ic, "se_boot": se_boot}
        record["estimators"][e] = entry
    return record


def _run_chunk(args):
    config, indices = args
    return [run_replication(config, i) for i in indices]


def run_study(config: SimConfig, threads: int = 1) -> list[dict]:
    """All replications, returned in replication order whatever ``threads`` is."""
    if threads < 1:
        raise ConfigError("threads must be at least 1")
    idx = list(range(config.reps))
    if threads == 1 or config.reps == 1:
        return [run_replication(config, i) for i in idx]
    n_chunks = min(config.reps, threads * 4)
    chunks = [idx[k::n_chunks] for k in range(n_chunks)]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(_run_chunk, [(config, c) for c in chunks]))
    by_rep = {r["rep"]: r for part in parts for r in part}
    return [by_rep[i] for i in idx]


@dataclass
class SummaryRow:
    estimator: str
    effect: str
    bias: float
    eff_ic: float
    eff_boot: float
    cover_ic: float
    cover_boot: float
    rmse: float
    pct_oob: float
    failures: int
    n_ok: int = 0
    mean_estimate: float = float("nan")
    mean_target: float = float("nan")
    emp_var: float = float("nan")
    eff_emp: float = float("nan")


@dataclass
class SimSummary:
    config: dict
    truth: dict
    rows: list[SummaryRow] = field(default_factory=list)
    eff_scale: str = "sd"
    failed_replications: int = 0

    def row(self, estimator: str, effect: str) -> SummaryRow:
        for r in self.rows:
            if r.estimator == estimator and r.effect == effect:
                return r
        raise KeyError((estimator, effect))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, c)) for c in SUMMARY_COLUMNS])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "truth": self.truth,
            "eff_scale": self.eff_scale,
            "failed_replications": self.failed_replications,
            "rows": [{k: _json_num(v) for k, v in asdict(r).items()} for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def _json_num(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def efficiency(n: int, se: np.ndarray, bound: float, scale: str = "sd") -> float:
    """Estimator spread relative to the efficiency bound, in percent.

    ``scale="sd"`` compares standard deviations, ``100 sqrt(mean(n se^2) / bound)``;
    ``scale="var"`` compares variances, ``100 mean(n se^2) / bound``.
    """
    se = np.asarray(se, dtype=float)
    se = se[np.isfinite(se)]
    if len(se) == 0:
        return float("nan")
    ratio = np.mean(n * se**2) / bound
    return float(100 * (math.sqrt(ratio) if scale == "sd" else ratio))


def _coverage(est, se, truth):
    ok = np.isfinite(se)
    if not np.any(ok):
        return float("nan")
    return float(np.mean(np.abs(est[ok] - truth) <= 1.959963984540054 * se[ok]))


def summarize(
    records: Sequence[dict], truth: TruthReport, config: SimConfig
) -> SimSummary:
    """Reduce replication records to one row per estimator and effect."""
    records = sorted(records, key=lambda r: r["rep"])
    failed_reps = sum(r["error"] is not None for r in records)
    rows = []
    any_ok = False
    for e in config.estimators:
        ok = [r["estimators"][e] for r in records if r["error"] is None and r["estimators"][e]["error"] is None]
        failures = len(records) - len(ok)
        for effect in EFFECTS:
            if not ok:
                nan = float("nan")
                rows.append(SummaryRow(e, effect, nan, nan, nan, nan, nan, nan, nan, failures))
                continue
            any_ok = True
            bound = truth.bound(effect)
            est = np.array([x[effect]["estimate"] for x in ok])
            if config.target == "fixed":
                t = np.full(len(ok), truth.truth(effect))
            else:
                t = np.array([x["target"][effect] for x in ok])
            se_ic = np.array([x[effect]["se_ic"] for x in ok], dtype=float)
            se_boot = np.array(
                [np.nan if x[effect]["se_boot"] is None else x[effect]["se_boot"] for x in ok], dtype=float
            )
            oob = np.array([x["oob"] for x in ok], dtype=bool)
            # spread of the error about the (possibly data-dependent) target
            emp_var = float(np.var(est - t, ddof=1)) if len(est) > 1 else float("nan")
            eff_emp = float("nan")
            if np.isfinite(emp_var):
                ratio = config.n * emp_var / bound
                eff_emp = 100 * (math.sqrt(ratio) if config.eff_scale == "sd" else ratio)
            rows.append(
                SummaryRow(
                    estimator=e,
                    effect=effect,
                    bias=float(np.mean(est - t)),
                    eff_ic=efficiency(config.n, se_ic, bound, config.eff_scale),
                    eff_boot=efficiency(config.n, se_boot, bound, config.eff_scale),
                    cover_ic=_coverage(est, se_ic, t),
                    cover_boot=_coverage(est, se_boot, t),
                    rmse=float(np.sqrt(np.mean((est - t) ** 2))),
                    pct_oob=float(100 * np.mean(oob)),
                    failures=failures,
                    n_ok=len(ok),
                    mean_estimate=float(np.mean(est)),
                    mean_target=float(np.mean(t)),
                    emp_var=emp_var,
                    eff_emp=eff_emp,
                )
            )
    if not any_ok:
        raise ValueError("no successful replications to summarize")
    return SimSummary(config.to_dict(), truth.to_dict(), rows, config.eff_scale, failed_reps)


def simulate(config: SimConfig, threads: int = 1) -> tuple[SimSummary, list[dict]]:
    records = run_study(config, threads)
    truth = truth_report(config.dgm_spec(), config.s_ref)
    return summarize(records, truth, config), records
