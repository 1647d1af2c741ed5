"""Exact truths and efficiency bounds by enumerating the binary joint law.

Every quantity here is computed from the structural equations of a
:class:`~transmed.dgp.DgmSpec` and never from fitted models, so it serves as
the reference for bias, coverage and efficiency.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache
from itertools import product

import numpy as np

from .data import InterventionSpec, effect_specs
from .dgp import DgmSpec, conditional_prob, exact_dataset, get_dgm, joint_table
from .nuisance import NuisancePredictions

CONTRASTS = {"SDE": ("10", "00"), "SIE": ("11", "10")}


def _p(dgm: DgmSpec, var: str, value, **parents):
    p1 = conditional_prob(dgm, var, **parents)
    out = np.where(np.asarray(value) == 1, p1, 1 - p1)
    # constant equations broadcast to the shape of the supplied parents
    shapes = [np.shape(v) for v in parents.values()] + [np.shape(value)]
    return np.broadcast_to(out, np.broadcast_shapes(*shapes)) if shapes else out


def _pr(dgm, var, **parents):
    return _p(dgm, var, 1, **parents)


class _Truth:
    """True conditional laws of one mechanism, vectorized over covariate arrays.

    The restricted quantities (mediator and outcome laws that omit ``A``) are
    obtained from the structural ones by averaging over ``A`` with Bayes'
    rule, so they are correct even if a custom mechanism lets ``A`` act on
    ``M`` or ``Y`` directly.
    """

    def __init__(self, dgm: DgmSpec):
        self.dgm = dgm

    def pW(self, w1, w2):
        return _p(self.dgm, "W1", w1) * _p(self.dgm, "W2", w2, w1=w1)

    def pS1(self, w1, w2):
        return _pr(self.dgm, "S", w1=w1, w2=w2)

    def pA1(self, w1, w2, s):
        return _pr(self.dgm, "A", w1=w1, w2=w2, s=s)

    def pA(self, a, w1, w2, s):
        return _p(self.dgm, "A", a, w1=w1, w2=w2, s=s)

    def pZ(self, z, a, w1, w2, s):
        return _p(self.dgm, "Z", z, a=a, w1=w1, w2=w2, s=s)

    def pM(self, m, z, a, w1, w2, s):
        return _p(self.dgm, "M", m, z=z, a=a, w1=w1, w2=w2, s=s)

    def qY(self, m, z, a, w1, w2):
        return _pr(self.dgm, "Y", m=m, z=z, a=a, w1=w1, w2=w2)

    def p_S0(self):
        return sum(self.pW(w1, w2) * (1 - self.pS1(w1, w2)) for w1, w2 in product((0, 1), repeat=2))

    def pZ_marg(self, z, w1, w2, s):
        return sum(self.pZ(z, a, w1, w2, s) * self.pA(a, w1, w2, s) for a in (0, 1))

    def _pA_given_zw(self, a, z, w1, w2, s):
        return self.pZ(z, a, w1, w2, s) * self.pA(a, w1, w2, s) / self.pZ_marg(z, w1, w2, s)

    def pM_restricted(self, m, z, w1, w2, s):
        return sum(self.pM(m, z, a, w1, w2, s) * self._pA_given_zw(a, z, w1, w2, s) for a in (0, 1))

    def qY_restricted(self, m, z, w1, w2):
        # E[Y | M=m, Z=z, W, S=1] averages over A given (m, z, w) in the source site
        num = den = 0.0
        for a in (0, 1):
            joint = self.pM(m, z, a, w1, w2, 1) * self._pA_given_zw(a, z, w1, w2, 1)
            num = num + joint * self.qY(m, z, a, w1, w2)
            den = den + joint
        return num / den

    def gstar(self, m, w1, w2, spec: InterventionSpec):
        a_star, s = spec.a_star, spec.s_ref
        return sum(
            self.pM(m, z, a_star, w1, w2, s) * self.pZ(z, a_star, w1, w2, s) for z in (0, 1)
        )


def true_psi(dgm: DgmSpec, spec: InterventionSpec, gstar1=None) -> float:
    """Identified ``psi(a, a*)`` by summing over (w1, w2, z, m).

    ``sum_w P(w | S=0) sum_z P(z | a, w, S=0) sum_m g*(m | w) E[Y | m, z, a, w]``
    with ``P(w | S=0)`` from Bayes' rule.

    Parameters
    ----------
    gstar1 : callable, optional
        ``gstar1(w1, w2) -> P(M=1)`` replacing the true intervention law. With
        an estimated law this gives the data-dependent target
        ``Psi_{g_n}(P_0)``.
    """
    t = _Truth(dgm)
    a = spec.a
    total = 0.0
    p_s0 = t.p_S0()
    for w1, w2, z, m in product((0, 1), repeat=4):
        pw_s0 = t.pW(w1, w2) * (1 - t.pS1(w1, w2)) / p_s0
        if gstar1 is None:
            g = t.gstar(m, w1, w2, spec)
        else:
            g1 = float(np.asarray(gstar1(w1, w2)).reshape(-1)[0])
            g = g1 if m == 1 else 1 - g1
        total += float(pw_s0 * t.pZ(z, a, w1, w2, 0) * g * t.qY(m, z, a, w1, w2))
    return total


def eic_at_truth(dgm: DgmSpec, spec: InterventionSpec, variant: str = "restricted") -> tuple[np.ndarray, np.ndarray]:
    """Efficient influence curve at the truth on each of the 128 configurations.

    Returns ``(D, prob)`` where ``prob`` are the configuration probabilities
    in :func:`~transmed.dgp.joint_table` order.
    """
    t = _Truth(dgm)
    j = joint_table(dgm)
    S, W1, W2, A, Z, M, Y = (j[v] for v in ("S", "W1", "W2", "A", "Z", "M", "Y"))
    a = spec.a
    psi = true_psi(dgm, spec)
    p_s0 = t.p_S0()
    pS1 = t.pS1(W1, W2)
    g_obs = t.gstar(M, W1, W2, spec)
    g1 = t.gstar(1, W1, W2, spec)
    num = g_obs * t.pZ(Z, a, W1, W2, 0) * (1 - pS1)
    if variant == "restricted":
        qY_obs = t.qY_restricted(M, Z, W1, W2)
        q_m = lambda z: g1 * t.qY_restricted(1, z, W1, W2) + (1 - g1) * t.qY_restricted(0, z, W1, W2)  # noqa: E731
        den = t.pM_restricted(M, Z, W1, W2, 1) * t.pZ_marg(Z, W1, W2, 1) * pS1 * p_s0
        ind_Y = S == 1
    elif variant == "unrestricted":
        qY_obs = t.qY(M, Z, a, W1, W2)
        q_m = lambda z: g1 * t.qY(1, z, a, W1, W2) + (1 - g1) * t.qY(0, z, a, W1, W2)  # noqa: E731
        den = t.pM(M, Z, a, W1, W2, 1) * t.pZ(Z, a, W1, W2, 1) * t.pA(a, W1, W2, 1) * pS1 * p_s0
        ind_Y = (S == 1) & (A == a)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    qM = q_m(Z)
    qZ = t.pZ(1, a, W1, W2, 0) * q_m(1) + t.pZ(0, a, W1, W2, 0) * q_m(0)
    D_Y = np.where(ind_Y, (Y - qY_obs) * num / den, 0.0)
    D_Z = np.where((S == 0) & (A == a), (qM - qZ) / (t.pA(a, W1, W2, 0) * p_s0), 0.0)
    D_W = np.where(S == 0, (qZ - psi) / p_s0, 0.0)
    return D_Y + D_Z + D_W, j["prob"]


def efficiency_bound(
    dgm: DgmSpec, contrast: str = "SDE", variant: str = "restricted", s_ref: int = 0
) -> float:
    """Variance of the influence-curve contrast at the truth (per observation)."""
    if contrast not in CONTRASTS:
        raise ValueError(f"contrast must be one of {tuple(CONTRASTS)}")
    specs = effect_specs(s_ref)
    k1, k2 = CONTRASTS[contrast]
    d1, prob = eic_at_truth(dgm, specs[k1], variant)
    d2, _ = eic_at_truth(dgm, specs[k2], variant)
    d = d1 - d2
    mean = float(np.dot(prob, d))
    return float(np.dot(prob, (d - mean) ** 2))


@dataclass(frozen=True)
class TruthReport:
    dgm: int
    labeling: str
    s_ref: int
    psi_10: float
    psi_00: float
    psi_11: float
    sde_true: float
    sie_true: float
    eff_bound_sde: float
    eff_bound_sie: float
    unrestricted_var_sde: float
    unrestricted_var_sie: float

    @property
    def psi(self) -> dict[str, float]:
        return {"10": self.psi_10, "00": self.psi_00, "11": self.psi_11}

    def truth(self, effect: str) -> float:
        return {"SDE": self.sde_true, "SIE": self.sie_true}[effect]

    def bound(self, effect: str) -> float:
        return {"SDE": self.eff_bound_sde, "SIE": self.eff_bound_sie}[effect]

    def to_dict(self) -> dict:
        return asdict(self)


def compute_truth(dgm: DgmSpec, s_ref: int = 0) -> TruthReport:
    specs = effect_specs(s_ref)
    psi = {k: true_psi(dgm, spec) for k, spec in specs.items()}
    return TruthReport(
        dgm=dgm.id,
        labeling=dgm.labeling,
        s_ref=s_ref,
        psi_10=psi["10"],
        psi_00=psi["00"],
        psi_11=psi["11"],
        sde_true=psi["10"] - psi["00"],
        sie_true=psi["11"] - psi["10"],
        eff_bound_sde=efficiency_bound(dgm, "SDE", "restricted", s_ref),
        eff_bound_sie=efficiency_bound(dgm, "SIE", "restricted", s_ref),
        unrestricted_var_sde=efficiency_bound(dgm, "SDE", "unrestricted", s_ref),
        unrestricted_var_sie=efficiency_bound(dgm, "SIE", "unrestricted", s_ref),
    )


@lru_cache(maxsize=None)
def _cached_truth(canonical_id: int, s_ref: int) -> TruthReport:
    return compute_truth(get_dgm(canonical_id), s_ref)


def truth_report(dgm: DgmSpec | int, s_ref: int = 0, labeling: str = "appendix") -> TruthReport:
    """Truth for a preset mechanism (cached) or any :class:`DgmSpec`.

    The ``dgm`` field of the report always carries the appendix numbering.
    """
    if isinstance(dgm, int):
        dgm = get_dgm(dgm, labeling)
    if dgm.labeling == "appendix" and dgm.id in (1, 2, 3):
        return _cached_truth(dgm.id, s_ref)
    return compute_truth(dgm, s_ref)


def oracle_predictions(dgm: DgmSpec, spec: InterventionSpec, variant: str = "restricted") -> NuisancePredictions:
    """:class:`NuisancePredictions` filled with true values on :func:`exact_dataset` rows."""
    t = _Truth(dgm)
    d = exact_dataset(dgm)
    c = d.columns()
    W1, W2, A, Z, M = c["W1"], c["W2"], c["A"], c["Z"], c["M"]
    a = spec.a
    pS1 = t.pS1(W1, W2)
    if variant == "restricted":
        pM = t.pM_restricted(M, Z, W1, W2, 1)
        qy = lambda m: t.qY_restricted(m, Z, W1, W2)  # noqa: E731
        qY_obs = t.qY_restricted(M, Z, W1, W2)
        pz_marg = t.pZ_marg(Z, W1, W2, 1)
    else:
        pM = t.pM(M, Z, a, W1, W2, 1)
        qy = lambda m: t.qY(m, Z, A, W1, W2)  # noqa: E731
        qY_obs = t.qY(M, Z, A, W1, W2)
        pz_marg = None
    return NuisancePredictions(
        spec=spec,
        variant=variant,
        gstar1=t.gstar(1, W1, W2, spec),
        gstar_obs=t.gstar(M, W1, W2, spec),
        pZ_a_s0=t.pZ(Z, a, W1, W2, 0),
        pZ_a_s1=t.pZ(Z, a, W1, W2, 1),
        pZ_marg_s1=pz_marg,
        pA_a_s0=t.pA(a, W1, W2, 0),
        pA_a_s1=t.pA(a, W1, W2, 1),
        pS0_w=1 - pS1,
        pS1_w=pS1,
        pM_obs=pM,
        qY_obs=qY_obs,
        qY_m0=qy(0),
        qY_m1=qy(1),
        p_S0=float(t.p_S0()),
    )


def true_intermediate(dgm: DgmSpec, spec: InterventionSpec, variant: str = "restricted") -> np.ndarray:
    """True ``E[Qbar_M | A=a, W, S]`` on :func:`exact_dataset` rows."""
    t = _Truth(dgm)
    c = exact_dataset(dgm).columns()
    W1, W2, S = c["W1"], c["W2"], c["S"]
    A = c["A"]
    a = spec.a
    g1 = t.gstar(1, W1, W2, spec)

    def q_m(z):
        if variant == "restricted":
            q1, q0 = t.qY_restricted(1, z, W1, W2), t.qY_restricted(0, z, W1, W2)
        else:
            q1, q0 = t.qY(1, z, A, W1, W2), t.qY(0, z, A, W1, W2)
        return g1 * q1 + (1 - g1) * q0

    return t.pZ(1, a, W1, W2, S) * q_m(1) + t.pZ(0, a, W1, W2, S) * q_m(0)


def monte_carlo_psi(
    dgm: DgmSpec, spec: InterventionSpec, n: int, seed=0, chunk: int = 1_000_000
) -> tuple[float, float]:
    """Simulate the counterfactual outcome directly; returns (mean, Monte Carlo SE).

    Target-site units are drawn by rejection on ``S``. For each, ``Z`` is drawn
    under ``A = a``, a mediator is drawn from the intervention law (its own
    ``Z`` under ``A = a*`` at site ``s_ref``), and ``Y`` from its equation.
    """
    rng = np.random.default_rng(seed)
    total = total_sq = 0.0
    got = 0
    while got < n:
        k = min(chunk, n - got)
        m = int(k / 0.3) + 1000
        w1 = (rng.random(m) < _pr(dgm, "W1")).astype(float)
        w2 = (rng.random(m) < _pr(dgm, "W2", w1=w1)).astype(float)
        s = (rng.random(m) < _pr(dgm, "S", w1=w1, w2=w2)).astype(float)
        keep = np.flatnonzero(s == 0)[:k]
        w1, w2 = w1[keep], w2[keep]
        k = len(keep)
        zero, ones = np.zeros(k), np.ones(k)
        a, a_star, s_ref = spec.a * ones, spec.a_star * ones, spec.s_ref * ones
        z = (rng.random(k) < _pr(dgm, "Z", a=a, w1=w1, w2=w2, s=zero)).astype(float)
        z_star = (rng.random(k) < _pr(dgm, "Z", a=a_star, w1=w1, w2=w2, s=s_ref)).astype(float)
        m_star = (rng.random(k) < _pr(dgm, "M", z=z_star, a=a_star, w1=w1, w2=w2, s=s_ref)).astype(float)
        y = (rng.random(k) < _pr(dgm, "Y", m=m_star, z=z, a=a, w1=w1, w2=w2)).astype(float)
        total += y.sum()
        total_sq += (y * y).sum()
        got += k
    mean = total / got
    var = total_sq / got - mean**2
    return float(mean), float(np.sqrt(var / got))
