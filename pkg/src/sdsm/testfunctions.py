"""Test functions (observables) with value, gradient and Hessian.

Each family is a ``kind`` code plus a flat parameter vector so the compiled
particle engine can evaluate it without Python callbacks.  The Python methods
call the same compiled evaluator, so both engines see identical numbers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

CONST, GAUSS, POLY_IA, BUMP, RESOLVENT, MOLLIFIER = range(6)
KIND_NAMES = {CONST: "constant", GAUSS: "gaussian", POLY_IA: "poly_ia", BUMP: "bump",
              RESOLVENT: "resolvent", MOLLIFIER: "mollifier"}
NPARAM = 8
_SQRT_PI = math.sqrt(math.pi)


@nb.njit(cache=True)
def erfcx(x):
    """Scaled complementary error function ``exp(x^2) erfc(x)``."""
    if x < 26.0:
        return math.exp(x * x) * math.erfc(x)
    x2 = x * x
    return (1.0 - 0.5 / x2 + 0.75 / (x2 * x2) - 1.875 / (x2 * x2 * x2)) / (x * _SQRT_PI)


@nb.njit(cache=True)
def resolvent_eps_1d(r, lam, eps, sigma2):
    """``(F, F', F'')`` for the d=1 perturbed resolvent kernel at radius ``r >= 0``.

    ``F(r) = e^{lam eps} int_eps^inf e^{-lam t} q_t(r) dt`` with
    ``q_t`` the N(0, sigma2 t) density; closed form in terms of erfc.
    """
    sigma = math.sqrt(sigma2)
    kappa = math.sqrt(2.0 * lam) / sigma
    beta = 1.0 / (sigma * math.sqrt(2.0 * eps))
    c = math.sqrt(lam * eps)
    pref = 1.0 / (2.0 * sigma2 * kappa)
    g = math.exp(-beta * beta * r * r)
    arg = c - beta * r
    if arg >= 0.0:
        t1 = erfcx(arg) * g
    else:
        t1 = math.exp(lam * eps - kappa * r) * math.erfc(arg)
    t2 = erfcx(c + beta * r) * g
    f = pref * (t1 + t2)
    fp = pref * kappa * (t2 - t1)
    fpp = kappa * kappa * f - pref * kappa * (4.0 * beta / _SQRT_PI) * g
    return f, fp, fpp


@nb.njit(cache=True)
def tf_eval(kind, p, d, x, grad, hess):
    """Value at ``x``; writes the gradient and Hessian into ``grad``/``hess``."""
    for i in range(d):
        grad[i] = 0.0
        for j in range(d):
            hess[i, j] = 0.0
    if kind == CONST:
        return p[0]
    if kind == GAUSS:
        amp, w = p[0], p[1]
        w2 = w * w
        r2 = 0.0
        for i in range(d):
            y = x[i] - p[2 + i]
            r2 += y * y
        v = amp * math.exp(-0.5 * r2 / w2)
        for i in range(d):
            yi = x[i] - p[2 + i]
            grad[i] = -v * yi / w2
            for j in range(d):
                yj = x[j] - p[2 + j]
                hess[i, j] = v * yi * yj / (w2 * w2)
            hess[i, i] -= v / w2
        return v
    if kind == POLY_IA:
        a = p[0]
        s = 1.0
        poly = p[1]
        for i in range(d):
            s += x[i] * x[i]
            poly += p[2 + i] * x[i]
        wgt = s ** (-0.5 * a)
        for i in range(d):
            dwi = -a * wgt * x[i] / s
            grad[i] = p[2 + i] * wgt + poly * dwi
        for i in range(d):
            dwi = -a * wgt * x[i] / s
            for j in range(d):
                dwj = -a * wgt * x[j] / s
                hw = a * (a + 2.0) * wgt * x[i] * x[j] / (s * s)
                if i == j:
                    hw -= a * wgt / s
                hess[i, j] = p[2 + i] * dwj + dwi * p[2 + j] + poly * hw
        return poly * wgt
    if kind == BUMP:
        amp, rad = p[0], p[1]
        r2 = 0.0
        for i in range(d):
            y = x[i] - p[2 + i]
            r2 += y * y
        u = r2 / (rad * rad)
        if u >= 1.0:
            return 0.0
        om = 1.0 - u
        v = amp * math.exp(1.0 - 1.0 / om)
        f1 = -1.0 / (om * om)
        f2 = -2.0 / (om * om * om)
        for i in range(d):
            gi = 2.0 * (x[i] - p[2 + i]) / (rad * rad)
            grad[i] = v * f1 * gi
            for j in range(d):
                gj = 2.0 * (x[j] - p[2 + j]) / (rad * rad)
                hess[i, j] = v * (f1 * f1 + f2) * gi * gj
            hess[i, i] += v * f1 * 2.0 / (rad * rad)
        return v
    if kind == MOLLIFIER:
        eps, sigma2 = p[0], p[1]
        s = sigma2 * eps
        r2 = 0.0
        for i in range(d):
            y = x[i] - p[2 + i]
            r2 += y * y
        v = (2.0 * math.pi * s) ** (-0.5 * d) * math.exp(-0.5 * r2 / s)
        for i in range(d):
            yi = x[i] - p[2 + i]
            grad[i] = -v * yi / s
            for j in range(d):
                hess[i, j] = v * yi * (x[j] - p[2 + j]) / (s * s)
            hess[i, i] -= v / s
        return v
    if kind == RESOLVENT:
        # d == 1 only in compiled code
        lam, eps, sigma2 = p[0], p[1], p[2]
        y = x[0] - p[3]
        f, fp, fpp = resolvent_eps_1d(abs(y), lam, eps, sigma2)
        grad[0] = fp if y >= 0.0 else -fp
        hess[0, 0] = fpp
        return f
    return math.nan


@nb.njit(cache=True)
def tf_eval_many(kind, p, x, values, grads, hessians):
    n, d = x.shape
    for k in range(n):
        values[k] = tf_eval(kind, p, d, x[k], grads[k], hessians[k])


@dataclass(frozen=True)
class TestFunction:
    """Observable descriptor.  ``name`` is the id used in records and CSV output."""

    kind: int
    params: tuple
    d: int
    name: str = ""
    support: tuple = field(default=None)  # (centre, radius) for compactly supported families

    __test__ = False  # not a pytest class

    @property
    def param_array(self) -> np.ndarray:
        p = np.zeros(NPARAM)
        p[:len(self.params)] = self.params
        return p

    @property
    def compiled(self) -> bool:
        return self.kind != RESOLVENT or self.d == 1

    def evaluate(self, x):
        """``(values (n,), gradients (n, d), Hessians (n, d, d))`` at points ``x``."""
        x = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=float)).reshape(-1, self.d))
        n = x.shape[0]
        if not self.compiled:
            return _resolvent_python(self, x)
        vals = np.empty(n)
        grads = np.empty((n, self.d))
        hess = np.empty((n, self.d, self.d))
        tf_eval_many(self.kind, self.param_array, x, vals, grads, hess)
        return vals, grads, hess

    def value(self, x):
        return self.evaluate(x)[0]

    def grad(self, x):
        return self.evaluate(x)[1]

    def hessian(self, x):
        return self.evaluate(x)[2]

    def __call__(self, x):
        return self.value(x)

    def describe(self) -> dict:
        return {"name": self.name, "family": KIND_NAMES[self.kind], "d": self.d,
                "params": list(self.params)}


def _resolvent_python(tf: TestFunction, x):
    from . import green

    lam, eps, sigma2 = tf.params[:3]
    x0 = np.asarray(tf.params[3:3 + tf.d])
    spec = green.KernelSpec(lam=lam, eps=eps, sigma2=sigma2, d=tf.d)
    y = x0[None, :] - x
    vals = green.q_lambda_eps(spec, y)
    # psi(z) = Q(x0 - z): gradient flips sign, Hessian does not
    grads = -green.grad_q_lambda_eps(spec, y)
    hess = green.hessian_q_lambda_eps(spec, y)
    return vals, grads, hess


def constant(value: float = 1.0, d: int = 1, name: str = "one") -> TestFunction:
    return TestFunction(CONST, (float(value),), d, name)


def gaussian_bump(width: float = 1.0, center=None, amplitude: float = 1.0, d: int = 1,
                  name: str | None = None) -> TestFunction:
    """``amplitude * exp(-|x - center|^2 / (2 width^2))``."""
    c = np.zeros(d) if center is None else np.broadcast_to(np.asarray(center, float), (d,))
    return TestFunction(GAUSS, (float(amplitude), float(width), *map(float, c)), d,
                        name or f"gauss_w{width:g}")


def poly_weight(a: float = 0.0, const: float = 0.0, linear=None, d: int = 1,
                name: str | None = None) -> TestFunction:
    """``(const + linear . x) * (1 + |x|^2)^(-a/2)``; ``a=0, linear=e_1`` gives ``x_1``."""
    lin = np.zeros(d) if linear is None else np.broadcast_to(np.asarray(linear, float), (d,))
    return TestFunction(POLY_IA, (float(a), float(const), *map(float, lin)), d,
                        name or f"poly_a{a:g}")


def compact_bump(radius: float = 1.0, center=None, amplitude: float = 1.0, d: int = 1,
                 name: str | None = None) -> TestFunction:
    """Smooth ``C_c`` bump ``amplitude * exp(1 - 1/(1 - |x-c|^2/r^2))`` on the ball."""
    c = np.zeros(d) if center is None else np.broadcast_to(np.asarray(center, float), (d,))
    return TestFunction(BUMP, (float(amplitude), float(radius), *map(float, c)), d,
                        name or f"bump_r{radius:g}", support=(tuple(map(float, c)), float(radius)))


def mollifier(x0, eps: float, sigma2: float, d: int = 1, name: str | None = None) -> TestFunction:
    """``z -> q_eps(x0 - z)``, the heat kernel with variance ``sigma2 * eps``."""
    x0 = np.broadcast_to(np.asarray(x0, float), (d,))
    return TestFunction(MOLLIFIER, (float(eps), float(sigma2), *map(float, x0)), d,
                        name or f"q_eps{eps:g}_x{','.join(f'{v:g}' for v in x0)}")


def resolvent_kernel(x0, lam: float, eps: float, sigma2: float, d: int = 1,
                     name: str | None = None) -> TestFunction:
    """``z -> Q^lam_eps(x0 - z)``, the translated perturbed resolvent kernel."""
    x0 = np.broadcast_to(np.asarray(x0, float), (d,))
    return TestFunction(RESOLVENT, (float(lam), float(eps), float(sigma2), *map(float, x0)), d,
                        name or f"psi_l{lam:g}_e{eps:g}_x{','.join(f'{v:g}' for v in x0)}")


def from_config(cfg: dict, d: int) -> TestFunction:
    cfg = dict(cfg)
    fam = cfg.pop("family")
    name = cfg.pop("name", None)
    builders = {"constant": lambda **k: constant(k.get("value", 1.0), d, name or "one"),
                "gaussian": lambda **k: gaussian_bump(d=d, name=name, **k),
                "poly_ia": lambda **k: poly_weight(d=d, name=name, **k),
                "bump": lambda **k: compact_bump(d=d, name=name, **k),
                "mollifier": lambda **k: mollifier(d=d, name=name, **k),
                "resolvent": lambda **k: resolvent_kernel(d=d, name=name, **k)}
    if fam not in builders:
        raise ValueError(f"unknown test-function family {fam!r}")
    return builders[fam](**cfg)
