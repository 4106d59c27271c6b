import math

import numpy as np
import pytest
from scipy import integrate, special

from sdsm import green

LAMS = [0.5, 1.0, 2.0]


def test_heat_kernel_is_a_density():
    spec = green.KernelSpec(1.0, 0.0, 2.0, 1)
    val, _ = integrate.quad(lambda x: float(np.ravel(green.heat_kernel(spec, 0.3, np.array([[x]])))[0]), -np.inf, np.inf)
    assert val == pytest.approx(1.0, abs=1e-10)


def test_bessel_against_scipy():
    x = np.concatenate([np.geomspace(1e-6, 2.0, 40), np.linspace(2.0, 60.0, 60)])
    np.testing.assert_allclose(green.bessel_k0(x), special.k0(x), rtol=1e-12)
    np.testing.assert_allclose(green.bessel_k1(x), special.k1(x), rtol=1e-12)


@pytest.mark.parametrize("d", [1, 2, 3])
@pytest.mark.parametrize("lam", LAMS)
def test_closed_forms_against_laplace_quadrature(d, lam):
    spec = green.KernelSpec(lam, 0.0, 2.0, d)
    x = np.zeros((5, d))
    x[:, 0] = [0.1, 0.5, 1.0, 2.0, 4.0]
    np.testing.assert_allclose(green.q_lambda(spec, x), green.q_lambda_quad(spec, x), rtol=1e-8)


def test_one_dimensional_closed_form_formula():
    lam, s2 = 1.3, 2.0
    spec = green.KernelSpec(lam, 0.0, s2, 1)
    x = np.array([[0.0], [0.7], [2.5]])
    k = math.sqrt(2 * lam) / math.sqrt(s2)
    want = np.exp(-k * np.abs(x[:, 0])) / (math.sqrt(s2) * math.sqrt(2 * lam))
    np.testing.assert_allclose(green.q_lambda(spec, x), want, rtol=1e-13)


@pytest.mark.parametrize("d,tol", [(1, 1e-6), (2, 1e-5), (3, 1e-5)])
@pytest.mark.parametrize("lam", LAMS)
def test_resolvent_identity(d, tol, lam):
    spec = green.KernelSpec(lam, 0.1, 2.0, d)
    grid = np.random.default_rng(d).uniform(-2, 2, size=(15, d))
    assert green.resolvent_identity_residual(spec, grid) <= tol


def test_resolvent_identity_negative_control():
    spec = green.KernelSpec(1.0, 0.1, 2.0, 1)
    assert green.resolvent_identity_residual(spec, np.linspace(-1, 1, 11)[:, None], mollifier_eps=0.2) > 1e-2


def test_mollified_kernel_methods_agree():
    spec = green.KernelSpec(1.0, 0.05, 2.0, 1)
    x = np.linspace(-2, 2, 9)[:, None]
    a = green.q_lambda_eps(spec, x, method="closed")
    np.testing.assert_allclose(green.q_lambda_eps(spec, x, method="quad"), a, rtol=1e-9)
    np.testing.assert_allclose(green.q_lambda_eps_convolution(spec, x), a, rtol=1e-9)


def test_mollified_kernel_is_smooth_and_tends_to_q():
    x = np.array([[0.5], [1.0]])
    base = green.q_lambda(green.KernelSpec(1.0, 0.0, 2.0, 1), x)
    errs = [np.max(np.abs(green.q_lambda_eps(green.KernelSpec(1.0, e, 2.0, 1), x) - base))
            for e in (0.1, 0.01, 0.001)]
    assert errs[0] > errs[1] > errs[2]
    assert np.isfinite(green.q_lambda_eps(green.KernelSpec(1.0, 0.01, 2.0, 3), np.zeros((1, 3))))


@pytest.mark.parametrize("d", [1, 2, 3])
def test_l1_norm_is_inverse_lambda(d):
    for lam in (0.5, 2.0):
        e = green.norm_entry(green.KernelSpec(lam, 0.0, 2.0, d), "Q", 1)
        assert e.value == pytest.approx(1 / lam, abs=1e-6)


def test_l2_norms_reference():
    spec = green.KernelSpec(1.0, 0.0, 2.0, 1)
    # ||Q||_2^2 = int exp(-2|x|)/4 dx = 1/4 and ||dQ||_2^2 = 1/4 for kappa = 1
    assert green.norm_entry(spec, "Q", 2).value ** 2 == pytest.approx(0.25, abs=1e-9)
    assert green.norm_entry(spec, "dQ", 2).value ** 2 == pytest.approx(0.25, abs=1e-9)


def test_l2_divergence_flags():
    assert green.norm_entry(green.KernelSpec(1.0, 0.0, 2.0, 4), "Q", 2).divergent
    assert green.norm_entry(green.KernelSpec(1.0, 0.0, 2.0, 2), "dQ", 2).divergent
    assert not green.norm_entry(green.KernelSpec(1.0, 0.0, 2.0, 3), "Q", 2).divergent


def test_chi_bound():
    bound = green.chi_bound(1.0, 1.0)
    assert bound == pytest.approx(2 * math.pi * math.sqrt(math.pi))
    for d in (1, 2, 3):
        r = green.chi_bound_check(d, 1.0, 1.0)
        assert r.passed and not r.divergent and r.value <= bound
    r4 = green.chi_bound_check(4, 1.0, 1.0)
    assert r4.divergent and not r4.passed


def test_invalid_specs():
    with pytest.raises(green.KernelError):
        green.KernelSpec(-1.0, 0.0, 2.0, 1)
    with pytest.raises(green.KernelError):
        green.chi_bound_check(5, 1.0, 1.0)
