import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from sdsm import model as mdl
from sdsm import particles as P
from sdsm import testfunctions as tfm
from sdsm.rng import Stream

OBS = [tfm.constant(1.0, name="one"), tfm.gaussian_bump(1.0, name="phi"), tfm.poly_weight(2.0, 1.0, name="poly")]


def _cfg(**kw):
    base = dict(T=0.2, dt=0.01, theta=2.0, n=3, seed=17, branching="bernoulli", snapshot_stride=1)
    base.update(kw)
    return P.SimulationConfig(**base)


def test_engines_agree_pathwise(ref_model):
    a = P.simulate(_cfg(engine="python"), ref_model, OBS, replicate=2)
    b = P.simulate(_cfg(engine="numba"), ref_model, OBS, replicate=2)
    np.testing.assert_array_equal(a.alive, b.alive)
    for f in ("values", "generator", "squares", "X", "U", "M"):
        np.testing.assert_allclose(getattr(a, f), getattr(b, f), rtol=1e-10, atol=1e-12)
    for sa, sb in zip(a.snapshots, b.snapshots):
        np.testing.assert_allclose(sa, sb, atol=1e-12)


@pytest.mark.parametrize("engine", ["python", "numba"])
def test_simulation_is_deterministic(ref_model, engine):
    a = P.simulate(_cfg(engine=engine), ref_model, OBS)
    b = P.simulate(_cfg(engine=engine), ref_model, OBS)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(a.M, b.M)


def test_total_mass_identity(ref_model):
    # for phi = 1 the decomposition is exact: <1, mu_T> - <1, mu_0> = M_T
    rec = P.simulate(_cfg(engine="numba", T=0.5, n=4, branching="exact"), ref_model, OBS)
    i = rec.index("one")
    np.testing.assert_allclose(rec.values[i], rec.total_mass)
    assert rec.residual("one") == pytest.approx(0.0, abs=1e-12)
    assert not np.any(rec.X[i]) and not np.any(rec.U[i])


def test_series_shapes_and_snapshots(ref_model):
    rec = P.simulate(_cfg(engine="numba", snapshot_stride=5), ref_model, OBS)
    assert rec.values.shape == (3, rec.steps + 1)
    assert list(rec.snapshot_steps) == [0, 5, 10, 15, 20]
    assert len(rec.snapshots[-1]) == rec.alive[-1]
    assert rec.T == pytest.approx(0.2)


def test_bernoulli_cap_enforced(ref_model):
    with pytest.raises(P.ConfigError, match="exceeds"):
        P.simulate(_cfg(n=10, dt=0.01), ref_model, OBS)
    P.simulate(_cfg(n=10, dt=0.01, T=0.02, branching="exact", engine="numba"), ref_model, OBS)


def test_config_validation(ref_model):
    with pytest.raises(P.ConfigError):
        _cfg(T=0.105).validate(ref_model)
    with pytest.raises(P.ConfigError):
        _cfg(branching="poisson").validate(ref_model)
    with pytest.raises(P.ConfigError):
        P.simulate(_cfg(), ref_model, [OBS[0], OBS[0]])


def test_config_roundtrip():
    cfg = _cfg(mu0=P.Mu0.point_mass(1.5))
    back = P.SimulationConfig.from_config(cfg.to_config())
    assert back.to_config() == cfg.to_config()
    with pytest.raises(P.ConfigError):
        P.SimulationConfig.from_config({"T": 1, "dt": 0.1, "speed": 3})


def test_init_cloud_counts_and_mass():
    cloud = P.init_cloud(P.Mu0("gaussian", mass=2.0, mean=(0.0,), std=1.0), 2.0, 5, Stream(1))
    assert cloud.alive == 64 and cloud.mass == pytest.approx(1 / 32)
    assert cloud.total_mass == pytest.approx(2.0)


def test_linear_fractional_offspring_law():
    rate, dt = 1024.0, 0.002
    m = 200_000
    z = np.empty(m, np.int64)
    ev = np.empty(m, np.int64)
    k0, k1 = Stream(3).key
    cdf = mdl.OffspringLaw.binary().cdf
    P.branch_all(k0, k1, np.uint64(0), np.uint64(1), m, 2, rate, dt, 0.0, cdf, z, ev)
    q = (rate * dt / 2) / (1 + rate * dt / 2)
    assert np.mean(z == 0) == pytest.approx(q, abs=4 * math.sqrt(q * (1 - q) / m))
    for k in (1, 2, 3):
        p = (1 - q) ** 2 * q ** (k - 1)
        assert np.mean(z == k) == pytest.approx(p, abs=4 * math.sqrt(p * (1 - p) / m))
    # critical: mean 1, variance sigma^2 rate dt
    assert z.mean() == pytest.approx(1.0, abs=4 * math.sqrt(rate * dt / m))


def test_exact_event_simulation_matches_closed_form():
    rate, dt, m = 500.0, 0.004, 100_000
    k0, k1 = Stream(4).key
    cdf = mdl.OffspringLaw.binary().cdf
    z1, e1 = np.empty(m, np.int64), np.empty(m, np.int64)
    z2, e2 = np.empty(m, np.int64), np.empty(m, np.int64)
    P.branch_all(k0, k1, np.uint64(0), np.uint64(1), m, 1, rate, dt, 0.0, cdf, z1, e1)
    P.branch_all(k0, k1, np.uint64(0), np.uint64(2), m, 2, rate, dt, 0.0, cdf, z2, e2)
    cap = 8
    t1 = np.bincount(np.minimum(z1, cap), minlength=cap + 1)
    t2 = np.bincount(np.minimum(z2, cap), minlength=cap + 1)
    assert stats.chi2_contingency(np.vstack([t1, t2]) + 0)[1] > 1e-3


def test_bernoulli_mode_probability():
    k0, k1 = Stream(6).key
    m = 100_000
    z, ev = np.empty(m, np.int64), np.empty(m, np.int64)
    p = 0.05
    P.branch_all(k0, k1, np.uint64(0), np.uint64(1), m, 0, 1.0, 0.05, p, mdl.OffspringLaw.binary().cdf, z, ev)
    assert ev.mean() == pytest.approx(p, abs=4 * math.sqrt(p * (1 - p) / m))
    assert set(np.unique(z)) <= {0, 1, 2}


def test_branch_mode_selection(ref_model):
    assert P.branch_mode("bernoulli", ref_model.offspring) == 0
    assert P.branch_mode("exact", ref_model.offspring) == 2
    assert P.branch_mode("exact", mdl.OffspringLaw((7 / 12, 0, 0.25, 1 / 6))) == 1


def test_ensemble_independent_of_workers(ref_model):
    cfg = _cfg(engine="numba", n=4, branching="exact")
    a = P.run_ensemble(cfg, ref_model, OBS, 6, workers=1)
    b = P.run_ensemble(cfg, ref_model, OBS, 6, workers=3)
    for k in a.fields:
        np.testing.assert_array_equal(a.fields[k], b.fields[k])
    c = P.run_ensemble(cfg, ref_model, OBS, 3, first_replicate=3)
    np.testing.assert_array_equal(c.final, a.final[3:])


def test_gamma_zero_has_no_branching():
    m = mdl.make_model(1, None, {"family": "gaussian_h", "amplitude": 1.0, "scale": 1.0}, gamma=0.0)
    rec = P.simulate(_cfg(engine="numba"), m, OBS)
    assert np.all(rec.alive == rec.alive[0]) and not np.any(rec.M)


def test_empty_initial_measure(ref_model):
    rec = P.simulate(_cfg(mu0=P.Mu0.point_mass(0.0, mass=0.0), engine="numba"), ref_model, OBS)
    assert not np.any(rec.values) and not np.any(rec.alive)


def test_lineage_labels(ref_model):
    rec = P.simulate(_cfg(lineage=True, n=2, T=0.5, branching="exact"), ref_model, OBS)
    assert len(rec.lineage) == rec.alive[-1]


def test_mean_and_se():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    m, se = P.mean_and_se(x)
    assert m == 2.5 and se == pytest.approx(np.std(x, ddof=1) / 2)
