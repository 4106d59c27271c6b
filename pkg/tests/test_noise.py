import math

import numpy as np
import pytest

from sdsm import model as mdl
from sdsm import noise
from sdsm.rng import Stream


def _common_samples(model, x, method, count=6000, dt=0.01):
    st = Stream(99)
    out = np.empty((count, x.shape[0]))
    for k in range(count):
        inc = noise.sample_step(model, x, dt, st.substream(k + 1), method=method)
        out[k] = inc.common[:, 0]
    return out / math.sqrt(dt)


@pytest.mark.parametrize("method", ["cells", "eigh"])
def test_common_covariance_matches_rho(ref_model, method):
    x = np.array([[0.0], [1.0], [3.0]])
    s = _common_samples(ref_model, x, method)
    cov = s.T @ s / s.shape[0]
    want = np.exp(-((x - x.T) ** 2) / 8.0)
    # entries of a Wishart estimate have SE sqrt((w_ii w_jj + w_ij^2)/n) <= sqrt(2/n)
    se = math.sqrt(2.0 / s.shape[0])
    assert np.max(np.abs(cov - want)) < 4 * se


def test_cells_field_covariance_is_exact_to_rounding(ref_model):
    # the lattice sum of g(c delta - x) g(c delta - y) delta approximates rho to ~1e-14
    plan = noise.cell_plan(ref_model)
    amp = plan.amplitude[0]
    for x, y in [(0.0, 0.0), (0.0, 1.3), (0.37, -2.1)]:
        c = np.arange(-200, 201) * plan.delta
        g = lambda u: np.exp(-u ** 2 / (2 * plan.scale ** 2))
        approx = amp ** 2 * plan.delta * np.sum(g(c - x) * g(c - y))
        assert approx == pytest.approx(math.exp(-(x - y) ** 2 / 8.0), abs=1e-12)


def test_individual_increment_variance(ref_model):
    st = Stream(5)
    x = np.zeros((2000, 1))
    z = noise.individual_increment(ref_model, x, 0.04, st.substream(1))
    assert z.var() == pytest.approx(0.04, rel=0.1)
    assert abs(np.corrcoef(z[:-1, 0], z[1:, 0])[0, 1]) < 0.1


def test_labels_relabel_individual_noise(ref_model):
    st = Stream(8).substream(3)
    x = np.array([[0.0], [1.0], [2.0]])
    a = noise.sample_step(ref_model, x, 0.01, st, labels=[0, 1, 2]).individual
    b = noise.sample_step(ref_model, x[::-1], 0.01, st, labels=[2, 1, 0]).individual
    np.testing.assert_allclose(b, a[::-1])


def test_cells_common_noise_is_label_free(ref_model):
    st = Stream(8).substream(3)
    x = np.array([[0.0], [1.0], [2.0]])
    a = noise.sample_step(ref_model, x, 0.01, st, method="cells").common
    b = noise.sample_step(ref_model, x[::-1], 0.01, st, method="cells").common
    np.testing.assert_allclose(b, a[::-1], atol=1e-15)


def test_zero_medium_has_no_common_part():
    m = mdl.make_model(1, None, {"family": "zero_h"})
    inc = noise.sample_step(m, np.zeros((4, 1)), 0.01, Stream(1))
    assert not np.any(inc.common)


def test_empty_cloud_and_bad_dt(ref_model):
    inc = noise.sample_step(ref_model, np.zeros((0, 1)), 0.01, Stream(1))
    assert inc.total.shape == (0, 1)
    with pytest.raises(ValueError):
        noise.sample_step(ref_model, np.zeros((1, 1)), 0.0, Stream(1))
