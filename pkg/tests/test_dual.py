import math

import numpy as np
import pytest
from scipy import stats

from sdsm import dual as D
from sdsm import testfunctions as tfm
from sdsm.particles import ConfigError, Mu0
from sdsm.rng import Stream
from sdsm.validate import heat_mean_gaussian


def test_level_rates():
    times, pairs, nj = D.sample_jump_chains(3, 100.0, 1.0, Stream(2), 50_000)
    assert np.all(nj == 2)
    first = times[:, 0]
    second = times[:, 1] - times[:, 0]
    # level l waits Exp(gamma sigma^2 l (l - 1) / 2)
    assert stats.kstest(first, stats.expon(scale=1 / 3.0).cdf).pvalue > 1e-3
    assert stats.kstest(second, stats.expon(scale=1.0).cdf).pvalue > 1e-3
    assert np.all(pairs[:, 0, 0] != pairs[:, 0, 1])
    assert pairs[:, 0].max() <= 2 and pairs[:, 1].max() <= 1


def test_pairs_are_uniform_over_ordered_pairs():
    _, pairs, _ = D.sample_jump_chains(3, 100.0, 1.0, Stream(3), 30_000)
    codes = pairs[:, 0, 0] * 3 + pairs[:, 0, 1]
    counts = np.bincount(codes, minlength=9)[[1, 2, 3, 5, 6, 7]]
    assert stats.chisquare(counts).pvalue > 1e-3


def test_vectorised_and_single_chains_agree():
    times, pairs, nj = D.sample_jump_chains(4, 1.0, 2.0, Stream(9), 20, first=5)
    for c in range(20):
        run = D.sample_jump_chain(4, 1.0, 2.0, Stream(9), chain=5 + c)
        np.testing.assert_array_equal(run.jump_times, times[c, :nj[c]])
        np.testing.assert_array_equal(run.pairs, pairs[c, :nj[c]])


def test_weight_without_jumps():
    run = D.DualRun(2, 0.5, np.array([]), np.zeros((0, 2), int), 1.0)
    assert run.weight == pytest.approx(math.exp(0.5))
    assert run.final_level == 2
    run1 = D.DualRun(2, 0.5, np.array([0.2]), np.array([[0, 1]]), 1.0)
    assert run1.log_weight == pytest.approx(0.2)
    np.testing.assert_allclose(run1.sojourns(), [0.2, 0.3])


def test_duplicate_projection():
    pos = np.array([[1.0], [2.0]])
    # output coordinates i and j coincide after the insertion
    out = D._duplicate(pos, 1, 0)
    np.testing.assert_array_equal(out[:, 0], [1.0, 1.0, 2.0])
    out = D._duplicate(pos, 0, 2)
    np.testing.assert_array_equal(out[:, 0], [1.0, 2.0, 1.0])


def test_first_moment_matches_heat_flow(ref_model):
    phi = tfm.gaussian_bump(1.0, name="phi")
    est = D.dual_moment(phi, 1, Mu0.point_mass(0.0), 0.5, ref_model, 800, Stream(21))
    want = heat_mean_gaussian(1.0, 2.0 * 0.5)
    assert abs(est.estimate - want) <= 3 * est.se


def test_second_moment_of_total_mass(ref_model):
    one = tfm.constant(1.0)
    est = D.dual_moment(one, 2, Mu0.point_mass(0.0), 0.5, ref_model, 4000, Stream(22))
    assert abs(est.estimate - 1.5) <= 3 * est.se


def test_python_and_compiled_replicates_agree(ref_model):
    phi = tfm.gaussian_bump(1.0, name="phi")
    a = D.dual_moment(phi, 2, Mu0.point_mass(0.3), 0.3, ref_model, 5, Stream(4), engine="python")
    b = D.dual_moment(phi, 2, Mu0.point_mass(0.3), 0.3, ref_model, 5, Stream(4), engine="numba")
    assert a.estimate == pytest.approx(b.estimate, rel=1e-9)


def test_trivial_and_invalid_inputs(ref_model):
    one = tfm.constant(1.0)
    est = D.dual_moment(one, 2, Mu0.point_mass(0.0, mass=0.0), 0.5, ref_model, 10, Stream(1))
    assert est.estimate == 0.0
    with pytest.raises(ConfigError):
        D.dual_moment(one, 0, Mu0.point_mass(0.0), 0.5, ref_model, 10, Stream(1))


def test_cross_check_matching():
    p = [D.MomentStat(2, "f", 1.5, 0.01, "a")]
    ok = D.cross_check(p, [D.MomentStat(2, "f", 1.51, 0.01, "a")])
    assert not ok[0].flagged and ok[0].z == pytest.approx(-0.01 / math.hypot(0.01, 0.01))
    bad = D.cross_check(p, [D.MomentStat(2, "f", 1.7, 0.01, "a")])
    assert bad[0].flagged
    with pytest.raises(KeyError):
        D.cross_check(p, [D.MomentStat(1, "f", 1.5, 0.01, "a")])
    with pytest.raises(ValueError):
        D.cross_check(p, [D.MomentStat(2, "f", 1.5, 0.01, "b")])
