import math

import numpy as np
import pytest
from scipy import integrate

from sdsm import localtime as lt
from sdsm import model as mdl
from sdsm import particles as P
from sdsm import testfunctions as tfm


def frozen_record(x0, T=0.5, dt=0.01, model=None, mass=1.0):
    """A single motionless particle (diagnostic mode built by hand)."""
    n = int(round(T / dt))
    snaps = [np.array([[x0]]) for _ in range(n + 1)]
    z = np.zeros((0, n + 1))
    return P.PathRecord(names=[], times=np.arange(n + 1) * dt, dt=dt, mass=mass, values=z, generator=z,
                        squares=z, X=z, U=z, M=z, alive=np.ones(n + 1, int),
                        snapshot_steps=np.arange(n + 1), snapshots=snaps, event_time=np.zeros(0),
                        event_position=np.zeros((0, 1)), event_offspring=np.zeros(0, int),
                        event_count=np.zeros(0, int), model=model or mdl.reference_model())


def test_frozen_particle_local_time():
    rec = frozen_record(0.3)
    q = tfm.mollifier(0.0, 0.05, 2.0)
    want = 0.5 * q.value(np.array([[0.3]]))[0]
    assert lt.local_time(rec, 0.0, 0.05) == pytest.approx(want, rel=1e-13)


def test_empty_path_is_zero():
    rec = frozen_record(0.0)
    rec.snapshots = [np.zeros((0, 1)) for _ in rec.snapshots]
    assert lt.local_time(rec, 0.0, 0.1) == 0.0


def test_frozen_particle_occupation_gap():
    x0 = 0.4
    rec = frozen_record(x0)
    phi = tfm.compact_bump(2.0)
    rep = lt.occupation_consistency(rec, phi, [0.2, 0.1, 0.05])
    for e, gap in zip(rep.eps, rep.gaps):
        s = 2.0 * e
        conv, _ = integrate.quad(lambda y: phi.value(np.array([[y]]))[0] * math.exp(-(y - x0) ** 2 / (2 * s))
                                 / math.sqrt(2 * math.pi * s), -2, 2, epsabs=1e-13, limit=200)
        want = 0.5 * (conv - phi.value(np.array([[x0]]))[0])
        assert gap == pytest.approx(want, rel=1e-5, abs=1e-9)
    assert rep.monotone and rep.rate == pytest.approx(1.0, abs=0.1)


def test_zero_test_function_gives_zero_gap():
    rec = frozen_record(10.0)
    rep = lt.occupation_consistency(rec, tfm.compact_bump(1.0), [0.1, 0.05])
    assert rep.smoothed == [0.0, 0.0] and rep.occupation == 0.0


def test_coarse_grid_rejected():
    with pytest.raises(lt.GridError):
        lt.kernel_mass_check(0.01, 2.0, 0.5)


def test_dimension_gate():
    m4 = mdl.make_model(4, {"family": "constant_c", "matrix": np.eye(4).tolist()}, {"family": "zero_h"})
    rec = frozen_record(0.0, model=m4)
    with pytest.raises(lt.LocalTimeError):
        lt.local_time(rec, np.zeros(4), 0.1)


@pytest.fixture(scope="module")
def path():
    m = mdl.reference_model()
    obs = [tfm.resolvent_kernel(0.0, 1.0, 0.05, 2.0), tfm.mollifier(0.0, 0.05, 2.0),
           tfm.resolvent_kernel(20.0, 1.0, 0.05, 2.0), tfm.mollifier(20.0, 0.05, 2.0)]
    cfg = P.SimulationConfig(T=0.5, dt=0.001, n=5, seed=3, branching="bernoulli", engine="numba",
                             snapshot_stride=1)
    return P.simulate(cfg, m, obs)


def test_registered_and_snapshot_forms_agree(path):
    reg = lt.local_time(path, 0.0, 0.05)
    snap = lt._trapezoid(lt._snapshot_pairing(path, tfm.mollifier(0.0, 0.05, 2.0).value), path.dt)
    assert reg == pytest.approx(snap, rel=1e-12)


def test_lambda_invariance(path):
    for lam in (0.5, 1.0, 2.0):
        est = lt.local_time(path, 0.0, 0.05, lam, full=True)
        assert est.form_difference <= 1e-7


def test_local_time_nonnegative_and_nondecreasing(path):
    series = lt.mollified_series(path, 0.0, 0.05)
    assert np.all(series >= 0)
    running = np.concatenate([[0.0], np.cumsum(0.5 * (series[1:] + series[:-1])) * path.dt])
    assert np.all(np.diff(running) >= 0)


def test_tanaka_terms_close(path):
    est = lt.tanaka_rhs(path, 0.0, 0.05, 1.0)
    assert est.residual < 0.05 * est.value
    ablated = lt.tanaka_residual(path, 0.0, 0.05, 1.0, drop=("M",))
    assert ablated == pytest.approx(abs(est.value - est.rhs + est.branching_integral))


def test_far_point_both_sides_vanish(path):
    est = lt.tanaka_rhs(path, 20.0, 0.05, 1.0)
    tail = math.exp(-20.0) / 2  # Q at distance 20
    assert est.value < 1e-12 and abs(est.rhs) < tail


def test_unregistered_kernel_raises(path):
    with pytest.raises(KeyError):
        lt.tanaka_rhs(path, 1.0, 0.05, 1.0)


def test_tanaka_without_common_noise():
    m = mdl.make_model(1, {"family": "constant_c", "matrix": math.sqrt(2.0)}, {"family": "zero_h"})
    obs = [tfm.resolvent_kernel(0.0, 1.0, 0.05, 2.0), tfm.mollifier(0.0, 0.05, 2.0)]
    cfg = P.SimulationConfig(T=0.5, dt=0.001, n=5, seed=4, branching="bernoulli", engine="numba")
    rec = P.simulate(cfg, m, obs)
    est = lt.tanaka_rhs(rec, 0.0, 0.05, 1.0)
    assert est.common_integral == 0.0
    assert est.residual < 0.05 * est.value


def test_second_moment_profile_is_finite(path):
    out = lt.second_moment_profile([path], 0.0, [0.2, 0.1, 0.05])
    assert all(np.isfinite(out)) and all(v > 0 for v in out)
