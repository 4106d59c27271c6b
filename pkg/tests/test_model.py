import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdsm import model as mdl


def test_reference_rho_closed_form(ref_model):
    z = np.array([0.0, 0.7, 2.0, -3.0])
    want = np.exp(-z ** 2 / 8.0)
    got = np.array([mdl.rho(ref_model, np.array([v]))[0, 0] for v in z])
    np.testing.assert_allclose(got, want, rtol=1e-12)
    quad = np.array([mdl.rho_quadrature(ref_model, np.array([v]))[0, 0] for v in z])
    np.testing.assert_allclose(quad, want, atol=1e-9)


def test_effective_sigma2_is_two(ref_model):
    assert ref_model.effective_sigma2() == pytest.approx(2.0, abs=1e-14)


def test_gamma_two_particles(ref_model):
    g = mdl.assemble_gamma(ref_model, np.array([[0.0], [2.0]]))
    e = math.exp(-0.5)
    np.testing.assert_allclose(g, [[2.0, e], [e, 2.0]], rtol=1e-12)
    np.testing.assert_allclose(np.linalg.eigvalsh(g), [2 - e, 2 + e], rtol=1e-12)


def test_gamma_is_symmetric_psd_for_random_configs(ref_model, rng):
    for _ in range(20):
        x = rng.uniform(-5, 5, size=(10, 1))
        g = mdl.assemble_gamma(ref_model, x)
        np.testing.assert_allclose(g, g.T)
        lmin, _ = mdl.check_ellipticity(ref_model, x)
        assert lmin > 0


def test_gamma_permutation_equivariant(ref_model, rng):
    x = rng.normal(size=(6, 1))
    p = rng.permutation(6)
    g = mdl.assemble_gamma(ref_model, x)
    gp = mdl.assemble_gamma(ref_model, x[p])
    np.testing.assert_allclose(gp, g[np.ix_(p, p)], atol=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-4, 4), min_size=2, max_size=5), st.integers(0, 2**31))
def test_quadratic_form_decomposition(xs, seed):
    m = mdl.reference_model()
    x = np.array(xs)[:, None]
    xi = np.random.default_rng(seed).normal(size=x.shape)
    lhs, rhs = mdl.quadratic_form_decomposition(m, x, xi)
    assert lhs == pytest.approx(rhs, rel=1e-7, abs=1e-9)


def test_degenerate_model_rejected():
    m = mdl.make_model(1, {"family": "constant_c", "matrix": 0.0}, {"family": "zero_h"})
    with pytest.raises(mdl.EllipticityViolation):
        mdl.check_ellipticity(m, np.zeros((1, 1)))
    with pytest.raises(mdl.EllipticityViolation):
        mdl.validate_model(m)


@pytest.mark.parametrize("probs,msg", [
    ((0.4, 0.2, 0.4), "p_1"),
    ((0.5, 0.0, 0.4), "sum"),
    ((0.6, 0.0, 0.4), "critical"),
    ((0.25, 0.0, 0.5, 0.25), "critical"),
])
def test_offspring_law_validation(probs, msg):
    with pytest.raises(mdl.ModelError, match=msg):
        mdl.OffspringLaw(probs)


def test_offspring_law_moments():
    law = mdl.OffspringLaw((0.5, 0.0, 0.5))
    assert law.sigma2 == pytest.approx(1.0)
    law3 = mdl.OffspringLaw((7 / 12, 0.0, 0.25, 1 / 6))
    assert law3.sigma2 == pytest.approx(4 * 0.25 + 9 / 6 - 1)
    assert list(law.sample(np.array([0.1, 0.49, 0.51, 0.99]))) == [0, 0, 2, 2]


def test_config_roundtrip(ref_model):
    cfg = ref_model.to_config()
    m2 = mdl.model_from_config(cfg)
    assert m2.to_config() == cfg
    x = np.array([[0.0], [1.3]])
    np.testing.assert_allclose(mdl.assemble_gamma(m2, x), mdl.assemble_gamma(ref_model, x))


def test_unknown_keys_rejected():
    with pytest.raises(mdl.ModelError):
        mdl.model_from_config({"d": 1, "colour": "red"})
    with pytest.raises(mdl.ModelError):
        mdl.model_from_config({"d": 1, "h": {"family": "weird"}})


def test_two_dimensional_isotropic_model():
    m = mdl.make_model(2, {"family": "constant_c", "matrix": [[1.0, 0.0], [0.0, 1.0]]}, {"family": "zero_h"})
    assert m.effective_sigma2() == pytest.approx(1.0)
    lmin, lmax = mdl.check_ellipticity(m, np.zeros((3, 2)))
    assert lmin == pytest.approx(1.0) and lmax == pytest.approx(1.0)


def test_gaussian_h_in_two_dimensions_is_rank_one():
    m = mdl.make_model(2, None, {"family": "gaussian_h", "amplitude": 1.0, "scale": 1.0})
    r0 = mdl.rho(m, np.zeros(2))
    assert np.linalg.matrix_rank(r0) == 1
    with pytest.raises(mdl.ModelError):
        m.effective_sigma2()


def test_psd_factor_reconstructs(rng):
    a = rng.normal(size=(5, 5))
    s = a @ a.T
    f = mdl.psd_factor(s)
    np.testing.assert_allclose(f @ f.T, s, atol=1e-10)
    with pytest.raises(mdl.ModelError):
        mdl.psd_factor(-np.eye(3))
