import math
import random

import numpy as np
import pytest

from transmed import simulation as sim
from transmed.dgp import correct_terms, exact_dataset, get_dgm
from transmed.estimators import ESTIMATORS
from transmed.simulation import (
    MISSPECIFIED_TERMS,
    ConfigError,
    SimConfig,
    apply_misspecification,
    efficiency,
    run_replication,
    run_study,
    simulate,
    summarize,
)
from transmed.truth import truth_report

SMALL = dict(dgm=1, labeling="main", n=800, reps=4, boot=0, seed=3)


def test_misspecification_recipe():
    ts = correct_terms(get_dgm(1, "main"))
    assert apply_misspecification(ts, "none") == ts
    y = apply_misspecification(ts, "y")
    assert y.Y == MISSPECIFIED_TERMS == (("W1",),)
    assert (y.A, y.Z, y.M, y.S) == (ts.A, ts.Z, ts.M, ts.S)
    z = apply_misspecification(ts, "zms")
    assert z.Z == z.M == z.S == MISSPECIFIED_TERMS
    assert z.A == ts.A and z.Y == ts.Y
    # the intervention law keeps the correct mediator and intermediate models
    assert z.gstar_M == ts.M and z.gstar_Z == ts.Z
    loose = apply_misspecification(ts, "zms", keep_gstar=False)
    assert loose.gstar_M is None and loose.gstar_Z is None
    with pytest.raises(ConfigError):
        apply_misspecification(ts, "bogus")


@pytest.mark.parametrize(
    "bad",
    [dict(reps=0), dict(dgm=3, labeling="main"), dict(dgm=4), dict(boot=1), dict(scenario="x"),
     dict(estimators=("nope",)), dict(eff_scale="pct"), dict(s_ref=2), dict(clip=0.7), dict(n=5)],
)
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        SimConfig(**bad)


def test_config_round_trip():
    c = SimConfig(dgm=3, labeling="appendix", estimators=("iptw", "tmle_eff"), scenario="ym")
    assert SimConfig.from_dict(c.to_dict()) == c
    assert SimConfig.from_dict({"estimators": "iptw,ee_eff"}).estimators == ("iptw", "ee_eff")
    with pytest.raises(ConfigError, match="unknown config keys"):
        SimConfig.from_dict({"colour": 1})


def test_replication_determinism():
    cfg = SimConfig(**SMALL)
    a = run_replication(cfg, 2)
    b = run_replication(cfg, 2)
    assert a == b
    assert a["error"] is None
    assert run_replication(cfg, 1) != a
    entry = a["estimators"]["tmle_eff"]
    assert set(entry) >= {"psi", "target", "oob", "diagnostics", "SDE", "SIE"}


def test_study_order_independent_of_threads():
    cfg = SimConfig(**SMALL)
    assert run_study(cfg, 1) == run_study(cfg, 2)


def test_failed_replication_is_recorded(monkeypatch):
    cfg = SimConfig(**SMALL)

    def broken(*a, **k):
        raise RuntimeError("sampler exploded")

    monkeypatch.setattr(sim, "sample", broken)
    rec = run_replication(cfg, 0)
    assert "sampler exploded" in rec["error"]


def _record(rep, est, se, target, oob=False):
    entry = {
        "error": None, "psi": {"10": 0.5, "00": 0.5, "11": 0.5}, "oob": oob,
        "target": {"SDE": target, "SIE": target}, "diagnostics": {},
        "SDE": {"estimate": est, "se_ic": se, "se_boot": se},
        "SIE": {"estimate": est, "se_ic": se, "se_boot": None},
    }
    return {"rep": rep, "error": None, "estimators": {"iptw": entry}}


def test_summary_exact_estimates():
    cfg = SimConfig(**{**SMALL, "estimators": ("iptw",)})
    truth = truth_report(1, 0, "main")
    recs = [_record(i, 0.1, 0.02, 0.1) for i in range(5)]
    row = summarize(recs, truth, cfg).row("iptw", "SDE")
    assert row.bias == 0 and row.rmse == 0 and row.cover_ic == 1 and row.pct_oob == 0
    assert np.isnan(summarize(recs, truth, cfg).row("iptw", "SIE").cover_boot)


def test_summary_two_records():
    cfg = SimConfig(**{**SMALL, "estimators": ("iptw",)})
    truth = truth_report(1, 0, "main")
    d = 0.03
    recs = [_record(0, 0.2 + d, d, 0.2), _record(1, 0.2 - d, d, 0.2, oob=True)]
    row = summarize(recs, truth, cfg).row("iptw", "SDE")
    assert row.cover_ic == 1.0
    assert row.rmse == pytest.approx(d, rel=1e-12)
    assert row.bias == pytest.approx(0.0, abs=1e-15)
    assert row.pct_oob == 50.0


def test_summary_fixed_target_uses_truth():
    cfg = SimConfig(**{**SMALL, "estimators": ("iptw",), "target": "fixed"})
    truth = truth_report(1, 0, "main")
    recs = [_record(0, truth.sde_true + 0.01, 0.01, 99.0)]
    assert summarize(recs, truth, cfg).row("iptw", "SDE").bias == pytest.approx(0.01, abs=1e-15)


def test_summary_requires_success():
    cfg = SimConfig(**{**SMALL, "estimators": ("iptw",)})
    with pytest.raises(ValueError, match="no successful"):
        summarize([{"rep": 0, "error": "x", "estimators": {}}], truth_report(1), cfg)


def test_efficiency_scales():
    assert efficiency(100, np.array([0.1, 0.1]), 0.25, "var") == pytest.approx(400.0)
    assert efficiency(100, np.array([0.1, 0.1]), 0.25, "sd") == pytest.approx(200.0)
    assert math.isnan(efficiency(100, np.array([np.nan]), 0.25))


@pytest.fixture(scope="module")
def small_study():
    return simulate(SimConfig(**{**SMALL, "reps": 6}))


def test_summary_invariants(small_study):
    summary, records = small_study
    assert [r.estimator for r in summary.rows] == [e for e in ESTIMATORS for _ in range(2)]
    for r in summary.rows:
        assert 0 <= r.cover_ic <= 1
        assert r.rmse >= abs(r.bias)
        assert 0 <= r.pct_oob <= 100
    header = summary.to_csv().splitlines()[0]
    assert header == "estimator,effect,bias,eff_ic,eff_boot,cover_ic,cover_boot,rmse,pct_oob,failures"
    assert '"rows"' in summary.to_json()


def test_summary_permutation_invariant(small_study):
    summary, records = small_study
    shuffled = list(records)
    random.Random(0).shuffle(shuffled)
    cfg = SimConfig(**{**SMALL, "reps": 6})
    again = summarize(shuffled, truth_report(1, 0, "main"), cfg)
    assert again.to_csv() == summary.to_csv()


def test_exact_distribution_replication_hits_truth(monkeypatch):
    dgm = get_dgm(2, "main")
    monkeypatch.setattr(sim, "sample", lambda *a, **k: exact_dataset(dgm))
    cfg = SimConfig(dgm=2, labeling="main", n=1000, reps=1, boot=0)
    rec = run_replication(cfg, 0)
    truth = truth_report(dgm)
    for e in ESTIMATORS:
        entry = rec["estimators"][e]
        assert entry["error"] is None
        assert not entry["oob"]
        for key, value in entry["psi"].items():
            assert value == pytest.approx(truth.psi[key], abs=1e-6)
        assert entry["SDE"]["estimate"] == pytest.approx(truth.sde_true, abs=1e-6)
        assert entry["target"]["SDE"] == pytest.approx(truth.sde_true, abs=1e-9)
