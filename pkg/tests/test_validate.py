import json
import math

import numpy as np
import pytest

from sdsm import validate as V
from sdsm.rng import Stream
from test_localtime import frozen_record

CHEAP = {"seed": 3, "checks": [
    {"id": "chi"},
    {"id": "jump_chain", "replicates": 5000, "seed": 4},
    {"id": "ellipticity", "replicates": 20, "seed": 5},
    {"id": "calibration", "replicates": 300, "seed": 6},
]}


def test_empty_manifest():
    assert V.run_suite({}) == []
    assert V.run_suite({"checks": []}) == []
    assert V.run_suite({"checks": [{"id": "chi", "enabled": False}]}) == []


def test_corrupted_offspring_law_fails_model_check_first():
    manifest = {"seed": 1,
                "model": {"d": 1, "c": {"family": "constant_c", "matrix": 1.0},
                          "h": {"family": "gaussian_h", "amplitude": 0.6316187777460647, "scale": 1.4142135623730951},
                          "offspring": [0.4, 0.2, 0.4]},
                "checks": [{"id": "moments", "replicates": 10}, {"id": "chi"}]}
    reports = V.run_suite(manifest)
    assert reports[0].check_id == "model.validation" and not reports[0].passed
    assert "p_1" in reports[0].error
    crit = [r for r in reports if r.check_id == "moments"]
    assert crit and not crit[0].passed and crit[0].kind == "error"
    assert all(r.passed for r in reports if r.check_id.startswith("chi"))
    assert not V.suite_passed(reports)


def test_suite_is_deterministic_and_ordered():
    a = V.run_suite(CHEAP)
    b = V.run_suite(dict(CHEAP, checks=list(reversed(CHEAP["checks"]))))
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]
    ids = [r.check_id.split(".")[0].split("[")[0] for r in a]
    assert ids[0] == "model"
    assert ids.index("calibration") < ids.index("chi") < ids.index("ellipticity") < ids.index("jump_chain")
    assert V.suite_passed(a)


def test_unknown_check_recorded_as_error():
    reports = V.run_suite({"checks": [{"id": "nonsense"}, {"id": "chi"}]})
    err = [r for r in reports if r.check_id == "nonsense"]
    assert err and err[0].kind == "error" and not err[0].passed
    assert any(r.check_id == "chi[d=1]" and r.passed for r in reports)


def test_report_json_roundtrip():
    r = V.CheckReport("x", math.inf, 0.0, math.nan, 1.5, True, 3, [1, 2], "tolerance", 6,
                      {"a": np.array([1.0, 2.0])})
    text = json.dumps(r.to_dict())
    back = V.CheckReport.from_dict(json.loads(text))
    assert back.statistic == math.inf and math.isnan(back.se) and back.details["a"] == [1.0, 2.0]


def test_gates():
    assert V.z_report("a", 1.0, 0.0, 0.34, 10, [1]).passed
    assert not V.z_report("a", 1.0, 0.0, 0.33, 10, [1]).passed
    assert V.z_report("v", 1.0, 0.0, 0.21, 10, [1], gate=V.VAR_GATE).passed
    assert V.tolerance_report("t", 1.0 + 9e-7, 1.0, 1e-6).passed
    assert not V.tolerance_report("t", 1.0 + 2e-6, 1.0, 1e-6).passed


def test_order_fit():
    dts = [1e-3, 5e-4, 2.5e-4]
    r = V.order_report("o", dts, [3.0 * d ** 0.7 for d in dts])
    assert r.statistic == pytest.approx(0.7) and r.passed
    assert not V.order_report("o", dts, [d ** 0.3 for d in dts]).passed
    assert math.isnan(V.fit_slope(dts, [1.0, 0.0, 1.0]))


def test_variance_se_for_gaussian_samples():
    x = Stream(1).normal(40_000)
    v, se = V.variance_se(x)
    assert v == pytest.approx(1.0, abs=5 * se)
    assert se == pytest.approx(math.sqrt(2 / x.size), rel=0.05)


def test_calibration_selftest_passes_and_detects_bias():
    assert V.calibration_selftest(500, 50, seed=2).passed
    # an overconfident gate (SE halved) fails the same nulls far more often than 1%
    st = Stream(2)
    fails = 0
    for k in range(500):
        x = 1.5 + 2.0 * st.substream(k).normal(50)
        mean, se = V.mean_and_se(x)
        fails += not V.z_report("c", mean, 1.5, se / 2, 50, [2]).passed
    assert fails / 500 > 0.05


def test_null_set_frozen_and_skipped():
    rec = frozen_record(0.0)
    ok = V.null_set_check(rec, ([5.0], [6.0]))
    assert ok.passed and ok.statistic == 0.0
    skipped = V.null_set_check(rec, ([-1.0], [1.0]))
    assert skipped.kind == "skipped"
    moved = frozen_record(0.0)
    moved.snapshots = [moved.snapshots[0]] + [np.array([[5.5]]) for _ in moved.snapshots[1:]]
    bad = V.null_set_check(moved, ([5.0], [6.0]))
    assert not bad.passed and bad.statistic > 0


def test_small_spde_check_runs():
    spec = {"id": "spde", "replicates": 4, "seed": 1,
            "params": {"T": 0.1, "n": 3, "dts": [4e-3, 2e-3, 1e-3]}}
    reports = V.run_suite({"checks": [spec]})
    ids = [r.check_id for r in reports]
    assert "spde.order[gauss_w1.5]" in ids and "spde.orthogonality[bump_r3]" in ids
    assert all(r.error is None for r in reports)


def test_reference_manifest_covers_all_criteria():
    ids = {c["id"] for c in V.reference_manifest()["checks"]}
    assert {"moments", "spde", "resolvent", "norms", "chi", "tanaka", "occupation",
            "lambda_invariance", "ellipticity", "jump_chain"} <= ids
    assert set(ids) <= set(V.CHECKS)
