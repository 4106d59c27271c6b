"""Acceptance suite: the reference manifest, one verdict line per criterion.

Runs the full manifest once (several minutes on one core).  Select with
``pytest -m slow`` or skip with ``-m "not slow"``.
"""
import json
from pathlib import Path

import pytest

from sdsm import validate as V

CRITERIA = {
    1: "first moment: particles and dual agree with the heat semigroup",
    2: "second moment: particles agree with the pair dual",
    3: "total mass is a martingale with linear variance growth",
    4: "SPDE residual: zero mean, shrinking with dt, orthogonal to M",
    5: "resolvent identity holds to quadrature precision",
    6: "resolvent kernel norms match closed forms",
    7: "chi constant is finite in d <= 3 and divergent in d = 4",
    8: "Tanaka residual converges at order 1/2 and needs the M term",
    9: "occupation gap shrinks monotonically in eps",
    10: "mollified local time does not depend on lambda",
    11: "ellipticity of the pair diffusion, degenerate model rejected",
    12: "dual jump chain has exponential holding times",
}
MANIFEST = Path(__file__).resolve().parents[1] / "manifests" / "acceptance.json"

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def suite(request):
    manifest = json.loads(MANIFEST.read_text())
    assert manifest == V.reference_manifest()
    reports = V.run_suite(manifest, workers=1)
    grouped = V.by_criterion(reports)
    lines = ["", "acceptance criteria"]
    for c, text in CRITERIA.items():
        rs = grouped.get(c, [])
        ok = bool(rs) and all(r.passed for r in rs)
        lines.append(f"criterion {c:2d} {'PASS' if ok else 'FAIL'}  {text} ({len(rs)} checks)")
    lines.append(V.format_table(reports))
    tr = request.config.pluginmanager.getplugin("terminalreporter")
    for line in lines:
        if tr is not None:
            tr.write_line(line)
        else:
            print(line)
    return reports, grouped


def test_model_is_valid(suite):
    reports, _ = suite
    assert reports[0].check_id == "model.validation" and reports[0].passed


def test_calibration(suite):
    reports, _ = suite
    cal = [r for r in reports if r.check_id.startswith("calibration")]
    assert cal and all(r.passed for r in cal)


@pytest.mark.parametrize("criterion", sorted(CRITERIA))
def test_criterion(suite, criterion):
    _, grouped = suite
    rs = grouped.get(criterion, [])
    assert rs, f"no checks for criterion {criterion}"
    failed = [f"{r.check_id}: {r.statistic:.6g} vs {r.expected:.6g} ({r.error or r.kind})" for r in rs if not r.passed]
    assert not failed, "\n".join(failed)
