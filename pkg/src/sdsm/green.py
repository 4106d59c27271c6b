"""Heat, resolvent (Green) and perturbed resolvent kernels of the one-particle motion.

All kernels assume constant coefficients with ``a + rho(0) = sigma2 * I``, so the
one-particle transition density is the Gaussian

    q_t(x) = (2 pi sigma2 t)^(-d/2) exp(-|x|^2 / (2 sigma2 t)).

``Q^lam`` is its Laplace transform in time and ``Q^lam_eps`` the
time-shifted transform ``e^{lam eps} int_eps^inf e^{-lam t} q_t dt``, which is
smooth at the origin and satisfies ``(lam - G_1) Q^lam_eps = q_eps``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .testfunctions import resolvent_eps_1d

EULER_GAMMA = 0.5772156649015329


class KernelError(ValueError):
    pass


class QuadratureNonConvergence(KernelError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    """``(lam, eps, sigma2, d)``; ``eps = 0`` selects the unperturbed kernel."""

    lam: float
    eps: float = 0.0
    sigma2: float = 2.0
    d: int = 1

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise KernelError("sigma2 must be positive (ellipticity)")
        if not self.lam > 0:
            raise KernelError("lambda must be positive")
        if self.eps < 0:
            raise KernelError("eps must be nonnegative")
        if int(self.d) != self.d or self.d < 1:
            raise KernelError("d must be a positive integer")

    @property
    def kappa(self) -> float:
        return math.sqrt(2.0 * self.lam / self.sigma2)

    def with_(self, **kw) -> "KernelSpec":
        vals = dict(lam=self.lam, eps=self.eps, sigma2=self.sigma2, d=self.d)
        vals.update(kw)
        return KernelSpec(**vals)


def _points(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if d == 1 and x.ndim <= 1:
        return x.reshape(-1, 1)
    return np.atleast_2d(x).reshape(-1, d)


def _squeeze(out, x, d: int):
    x = np.asarray(x)
    if d == 1 and x.ndim == 0:
        return float(out[0])
    if d > 1 and x.ndim == 1:
        return float(out[0])
    return out


# ---------------------------------------------------------------- heat kernel

def heat_kernel(spec: KernelSpec, t: float, x):
    """``q_t(x)`` for ``t > 0``."""
    if not t > 0:
        raise KernelError("t must be positive")
    pts = _points(x, spec.d)
    r2 = np.sum(pts * pts, axis=1)
    s = spec.sigma2 * t
    out = (2.0 * math.pi * s) ** (-spec.d / 2.0) * np.exp(-r2 / (2.0 * s))
    return _squeeze(out, x, spec.d)


def heat_kernel_derivatives(spec: KernelSpec, t: float, x):
    """``(q, grad q (n, d), Hessian q (n, d, d))`` at time ``t``."""
    pts = _points(x, spec.d)
    s = spec.sigma2 * t
    q = (2.0 * math.pi * s) ** (-spec.d / 2.0) * np.exp(-np.sum(pts * pts, axis=1) / (2.0 * s))
    g = -q[:, None] * pts / s
    h = q[:, None, None] * (pts[:, :, None] * pts[:, None, :] / s ** 2 - np.eye(spec.d)[None] / s)
    return q, g, h


# ---------------------------------------------------------------- Bessel K0, K1

def _k_series(x: np.ndarray):
    y = 0.25 * x * x
    term0 = np.ones_like(x)
    term1 = 0.5 * x
    i0 = term0.copy()
    i1 = term1.copy()
    s0 = np.zeros_like(x)
    acc1 = np.full_like(x, 1.0 - 2.0 * EULER_GAMMA)
    harm = 0.0
    t01 = np.ones_like(x)
    for k in range(1, 40):
        harm += 1.0 / k
        term0 = term0 * y / (k * k)
        term1 = term1 * y / (k * (k + 1))
        t01 = t01 * y / (k * (k + 1))
        i0 += term0
        i1 += term1
        s0 += term0 * harm
        acc1 += t01 * (2.0 * harm + 1.0 / (k + 1) - 2.0 * EULER_GAMMA)
    lg = np.log(0.5 * x)
    k0 = -(lg + EULER_GAMMA) * i0 + s0
    k1 = 1.0 / x + lg * i1 - 0.25 * x * acc1
    return k0, k1


def _k_integral(x: np.ndarray, nu: float):
    # e^x K_nu(x) = int_0^inf exp(-x (cosh t - 1)) cosh(nu t) dt, trapezoid on the half line
    out = np.empty_like(x)
    for i, xi in enumerate(x):
        h = min(0.2, math.pi ** 2 / (xi + 40.0))
        tmax = math.acosh(1.0 + 40.0 / xi) + h
        t = np.arange(0.0, tmax, h)
        f = np.exp(-xi * (np.cosh(t) - 1.0)) * np.cosh(nu * t)
        out[i] = h * (f.sum() - 0.5 * f[0]) * math.exp(-xi)
    return out


def bessel_k0(x):
    """Modified Bessel ``K_0``: power series for ``x <= 2``, trapezoid-summed
    integral representation above."""
    x = np.asarray(x, dtype=float)
    flat = np.atleast_1d(x).ravel()
    if np.any(flat <= 0):
        raise KernelError("K0 needs a positive argument")
    out = np.empty_like(flat)
    small = flat <= 2.0
    if small.any():
        out[small] = _k_series(flat[small])[0]
    if (~small).any():
        out[~small] = _k_integral(flat[~small], 0.0)
    return out.reshape(x.shape) if x.ndim else float(out[0])


def bessel_k1(x):
    x = np.asarray(x, dtype=float)
    flat = np.atleast_1d(x).ravel()
    if np.any(flat <= 0):
        raise KernelError("K1 needs a positive argument")
    out = np.empty_like(flat)
    small = flat <= 2.0
    if small.any():
        out[small] = _k_series(flat[small])[1]
    if (~small).any():
        out[~small] = _k_integral(flat[~small], 1.0)
    return out.reshape(x.shape) if x.ndim else float(out[0])


# ---------------------------------------------------------------- Q^lambda

def q_lambda_radial(spec: KernelSpec, r):
    """``(Q(r), Q'(r))`` of the unperturbed resolvent kernel, d = 1..4, r > 0 (d >= 2)."""
    r = np.asarray(r, dtype=float)
    k = spec.kappa
    s2 = spec.sigma2
    d = spec.d
    if d >= 2 and np.any(r <= 0):
        raise KernelError("Q^lambda is singular at the origin for d >= 2")
    if d == 1:
        q = np.exp(-k * r) / (s2 * k)
        return q, -k * q
    z = k * r
    if d == 2:
        q = bessel_k0(z) / (math.pi * s2)
        return q, -k * bessel_k1(z) / (math.pi * s2)
    if d == 3:
        q = np.exp(-z) / (2.0 * math.pi * s2 * r)
        return q, -q * (k + 1.0 / r)
    if d == 4:
        k0 = bessel_k0(z)
        k1 = bessel_k1(z)
        c = k / (2.0 * math.pi ** 2 * s2)
        # d/dr [K1(kr)/r] = -k K2(kr)/r,  K2 = K0 + 2 K1 / z
        return c * k1 / r, -c * k * (k0 + 2.0 * k1 / z) / r
    raise KernelError("closed forms are provided for d <= 4")


def q_lambda(spec: KernelSpec, x):
    """``Q^lambda(x) = int_0^inf e^{-lambda t} q_t(x) dt`` in closed form."""
    pts = _points(x, spec.d)
    r = np.sqrt(np.sum(pts * pts, axis=1))
    if spec.d >= 2 and np.any(r == 0):
        raise KernelError("Q^lambda is singular at x = 0 for d >= 2")
    return _squeeze(q_lambda_radial(spec, r)[0], x, spec.d)


def _gl_panels(lo: float, hi: float, panels: int, order: int = 16):
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(lo, hi, panels + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])
    rad = 0.5 * (edges[1:] - edges[:-1])
    return (mid[:, None] + rad[:, None] * x).ravel(), (rad[:, None] * w).ravel()


def _refine(integrate, start: int = 16, rtol: float = 1e-9, atol: float = 1e-300, max_panels: int = 4096):
    panels = start
    prev = integrate(panels)
    while panels < max_panels:
        panels *= 2
        cur = integrate(panels)
        scale = np.maximum(np.abs(cur), atol)
        if np.all(np.abs(cur - prev) <= rtol * scale + atol):
            return cur
        prev = cur
    raise QuadratureNonConvergence("Laplace quadrature did not reach the requested tolerance")


def laplace_transform(spec: KernelSpec, x, order: int = 0, t_lower: float | None = None):
    """Quadrature of ``int_lo^inf e^{-lam (t - lo)} D^order q_t(x) dt``.

    ``lo = eps`` (or ``t_lower``).  ``order`` selects the value (0), the gradient (1)
    or the Hessian (2); the integration variable is ``log t`` on
    ``[lo, lo + 40/lam]`` plus the leading closed-form tail term.
    """
    pts = _points(x, spec.d)
    lo = spec.eps if t_lower is None else t_lower
    lam = spec.lam
    d = spec.d
    r2 = np.sum(pts * pts, axis=1)
    if lo == 0:
        if d >= 2 and np.any(r2 == 0):
            raise KernelError("the unperturbed kernel is singular at x = 0 for d >= 2")
        # below t_min the integrand is negligible (exp(-60) or t^{1/2} ~ 1e-10)
        if np.any(r2 == 0):
            t_min = 1e-20
        else:
            t_min = float(r2.min()) / (spec.sigma2 * 120.0)
        shift = 0.0
    else:
        t_min = lo
        shift = lo
    t_max = lo + 40.0 / lam
    u_lo, u_hi = math.log(t_min), math.log(t_max)

    def integrate(panels):
        u, w = _gl_panels(u_lo, u_hi, panels)
        t = np.exp(u)
        s = spec.sigma2 * t
        q = (2.0 * math.pi * s[None, :]) ** (-d / 2.0) * np.exp(-r2[:, None] / (2.0 * s[None, :]))
        wt = w * t * np.exp(-lam * (t - shift))
        if order == 0:
            return q @ wt
        if order == 1:
            base = (q / s[None, :]) @ wt
            return -pts * base[:, None]
        a = (q / s[None, :] ** 2) @ wt
        b = (q / s[None, :]) @ wt
        return a[:, None, None] * pts[:, :, None] * pts[:, None, :] - b[:, None, None] * np.eye(d)[None]

    val = _refine(integrate)
    # closed-form tail: int_T^inf e^{-lam t} f(t) dt ~ e^{-lam T} f(T) / lam
    s_t = spec.sigma2 * t_max
    qt = (2.0 * math.pi * s_t) ** (-d / 2.0) * np.exp(-r2 / (2.0 * s_t))
    tail = math.exp(-lam * (t_max - shift)) / lam
    if order == 0:
        val = val + tail * qt
    elif order == 1:
        val = val - tail * (qt / s_t)[:, None] * pts
    else:
        val = val + tail * (qt[:, None, None] * (pts[:, :, None] * pts[:, None, :] / s_t ** 2
                                                  - np.eye(d)[None] / s_t))
    return val


def q_lambda_quad(spec: KernelSpec, x):
    """Laplace quadrature of the heat kernel (oracle for :func:`q_lambda`)."""
    out = laplace_transform(spec.with_(eps=0.0), x)
    return _squeeze(out, x, spec.d)


# ---------------------------------------------------------------- Q^lambda_eps

def _require_eps(spec: KernelSpec):
    if not spec.eps > 0:
        raise KernelError("the perturbed kernel needs eps > 0")


def _radial_1d(spec, r):
    out = np.array([resolvent_eps_1d(float(ri), spec.lam, spec.eps, spec.sigma2) for ri in r])
    return out.reshape(-1, 3)


def q_lambda_eps(spec: KernelSpec, x, method: str = "auto"):
    """Perturbed resolvent kernel ``Q^lam_eps(x)``.

    ``method``: ``"closed"`` (d=1 erfc form), ``"quad"`` (Laplace quadrature),
    ``"convolution"`` (``Q^lam * q_eps``) or ``"auto"`` (closed for d=1, else quad).
    """
    _require_eps(spec)
    pts = _points(x, spec.d)
    if method == "auto":
        method = "closed" if spec.d == 1 else "quad"
    if method == "closed":
        if spec.d != 1:
            raise KernelError("closed form is implemented for d = 1")
        out = _radial_1d(spec, np.abs(pts[:, 0]))[:, 0]
    elif method == "quad":
        out = laplace_transform(spec, pts)
    elif method == "convolution":
        out = q_lambda_eps_convolution(spec, pts)
    else:
        raise ValueError(f"unknown method {method!r}")
    return _squeeze(out, x, spec.d)


def grad_q_lambda_eps(spec: KernelSpec, x, method: str = "auto"):
    """Gradient (n, d), differentiating under the time integral."""
    _require_eps(spec)
    pts = _points(x, spec.d)
    if method == "auto":
        method = "closed" if spec.d == 1 else "quad"
    if method == "closed":
        f = _radial_1d(spec, np.abs(pts[:, 0]))
        return (f[:, 1] * np.sign(pts[:, 0]))[:, None]
    return laplace_transform(spec, pts, order=1)


def hessian_q_lambda_eps(spec: KernelSpec, x, method: str = "auto"):
    _require_eps(spec)
    pts = _points(x, spec.d)
    if method == "auto":
        method = "closed" if spec.d == 1 else "quad"
    if method == "closed":
        f = _radial_1d(spec, np.abs(pts[:, 0]))
        return f[:, 2][:, None, None]
    return laplace_transform(spec, pts, order=2)


def q_lambda_eps_convolution(spec: KernelSpec, x):
    """``(Q^lam * q_eps)(x)`` by radial quadrature centred at ``x``.

    The angular integral of the Gaussian is done in closed form
    (``2 cosh`` for d=1, ``2 pi I_0`` for d=2, ``4 pi sinh(a)/a`` for d=3).
    """
    _require_eps(spec)
    if spec.d > 3:
        raise KernelError("convolution route implemented for d <= 3")
    pts = _points(x, spec.d)
    d = spec.d
    s = spec.sigma2 * spec.eps
    base = spec.with_(eps=0.0)
    r0 = np.sqrt(np.sum(pts * pts, axis=1))
    hi = float(r0.max()) + 40.0 * math.sqrt(s) + 40.0 / spec.kappa
    # substitute rho = e^v to resolve the origin singularity of Q for d >= 2
    v_lo, v_hi = math.log(1e-14), math.log(hi)

    def integrate(panels):
        v, w = _gl_panels(v_lo, v_hi, panels)
        rho = np.exp(v)
        q, _ = q_lambda_radial(base, rho)
        a = rho[None, :] * r0[:, None] / s
        # gaussian factor exp(-(rho - r0)^2 / 2s) times scaled angular integral
        g = np.exp(-(rho[None, :] - r0[:, None]) ** 2 / (2.0 * s))
        if d == 1:
            ang = 1.0 + np.exp(-2.0 * a)
        elif d == 2:
            ang = 2.0 * math.pi * special.i0e(a)
        else:
            with np.errstate(invalid="ignore", divide="ignore"):
                ang = np.where(a > 1e-8, 2.0 * math.pi * (1.0 - np.exp(-2.0 * a)) / np.where(a > 0, a, 1.0),
                               4.0 * math.pi * np.exp(-a) * (1.0 + a * a / 6.0))
        dens = (2.0 * math.pi * s) ** (-d / 2.0)
        integrand = dens * g * ang * q[None, :] * rho[None, :] ** d
        return integrand @ w

    return _refine(integrate, start=32, rtol=1e-10)


# ---------------------------------------------------------------- identities and bounds

def laplacian_q_lambda_eps(spec: KernelSpec, x, method: str = "auto"):
    h = hessian_q_lambda_eps(spec, x, method)
    return np.trace(h, axis1=1, axis2=2)


def resolvent_identity_residual(spec: KernelSpec, grid, mollifier_eps: float | None = None,
                                method: str = "auto") -> float:
    """``max |(lam - G_1) Q^lam_eps - q_eps|`` over ``grid``.

    ``G_1 = (sigma2/2) Laplacian`` is applied through the closed-form second
    derivatives of the integrand.  ``mollifier_eps`` replaces ``q_eps`` on the
    right (negative control).
    """
    _require_eps(spec)
    pts = _points(grid, spec.d)
    q = np.atleast_1d(q_lambda_eps(spec, pts, method))
    lap = laplacian_q_lambda_eps(spec, pts, method)
    me = spec.eps if mollifier_eps is None else mollifier_eps
    rhs = np.atleast_1d(heat_kernel(spec, me, pts))
    res = spec.lam * q - 0.5 * spec.sigma2 * lap - rhs
    return float(np.max(np.abs(res)))


def _chi_inner(d: int, t: float, s: np.ndarray) -> np.ndarray:
    """``int_0^t (2r + s)^(-d/2) dr`` in closed form."""
    if d == 2:
        return 0.5 * np.log1p(2.0 * t / s)
    e = 1.0 - d / 2.0
    return ((2.0 * t + s) ** e - s ** e) / (2.0 * e)


def chi(d: int, t: float, lam: float, s_min: float = 0.0) -> float:
    """``chi_d(t)`` with the ``(u, v)`` integral reduced by the polar substitution.

    With ``u = w^2``, ``v = z^2`` and polar coordinates the integrand depends only on
    ``s = u + v``, leaving ``pi * int_0^inf e^{-lam s} F_d(s) ds`` with ``F_d`` the
    closed-form inner time integral.  ``s_min > 0`` imposes an inner cutoff.
    """
    hi = 60.0 / lam
    lo = max(s_min, 1e-300)
    # s = w^2 removes the s^{-1/2} singularity (d=3) and is smooth for d=1
    def integrate(panels):
        if s_min > 0:
            u, w = _gl_panels(math.log(lo), math.log(hi), panels)
            s = np.exp(u)
            jac = s
        else:
            u, w = _gl_panels(0.0, math.sqrt(hi), panels)
            s = u * u
            jac = 2.0 * u
        f = _chi_inner(d, t, s)
        return math.pi * float(np.sum(w * jac * np.exp(-lam * s) * f))

    if d == 2 and s_min == 0:
        # log singularity: integrate in log s down to a negligible cutoff
        return chi(d, t, lam, s_min=1e-30)
    return float(_refine(integrate, start=16, rtol=1e-10))


def chi_bound(t: float, lam: float) -> float:
    return (t + 1.0) * math.pi * math.sqrt(math.pi / lam)


@dataclass
class ChiReport:
    d: int
    t: float
    lam: float
    value: float
    bound: float
    passed: bool
    divergent: bool
    refinement: list


def _cutoff_sequence(fn, cutoffs):
    seq = [fn(c) for c in cutoffs]
    incr = np.abs(np.diff(seq))
    return seq, incr


def _diverges(seq, rel: float = 1e-6) -> bool:
    """Divergent if successive refinement increments do not shrink."""
    incr = np.abs(np.diff(seq))
    last = abs(seq[-1])
    if incr[-1] <= rel * max(last, 1e-300):
        return False
    return bool(incr[-1] >= 0.5 * incr[-2])


def chi_bound_check(d: int, t: float, lam: float) -> ChiReport:
    """Evaluate ``chi_d(t)`` and compare with ``(t + 1) pi sqrt(pi/lam)``.

    For d = 4 the inner cutoff is refined and the report flags divergence.
    """
    if d not in (1, 2, 3, 4):
        raise KernelError("d must be in 1..4")
    if not (t > 0 and lam > 0):
        raise KernelError("t and lambda must be positive")
    bound = chi_bound(t, lam)
    cutoffs = [10.0 ** (-k) for k in range(2, 14, 2)]
    seq, _ = _cutoff_sequence(lambda c: chi(d, t, lam, s_min=c), cutoffs)
    divergent = _diverges(seq)
    if d <= 3:
        if divergent:
            raise QuadratureNonConvergence(f"chi_{d} refinement did not settle: {seq}")
        value = chi(d, t, lam)
        return ChiReport(d, t, lam, value, bound, value <= bound, False, seq)
    return ChiReport(d, t, lam, seq[-1], bound, False, divergent, seq)


# ---------------------------------------------------------------- norms

def _sphere_area(d: int) -> float:
    return 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)


def radial_norm(spec: KernelSpec, which: str, p: int, r_min: float = 0.0) -> float:
    """``|| Q ||_p^p`` or ``|| grad Q ||_p^p`` by radial quadrature in ``log r``."""
    d = spec.d
    k = spec.kappa
    r_hi = 80.0 / k
    lo = r_min if r_min > 0 else 1e-14
    area = _sphere_area(d) if d > 1 else 2.0

    def integrate(panels):
        v, w = _gl_panels(math.log(lo), math.log(r_hi), panels)
        r = np.exp(v)
        q, dq = q_lambda_radial(spec.with_(eps=0.0), r)
        f = np.abs(q if which == "Q" else dq) ** p
        return area * float(np.sum(w * f * r ** d))

    return float(_refine(integrate, start=32, rtol=1e-11))


@dataclass
class NormEntry:
    quantity: str
    d: int
    value: float
    finite_claimed: bool
    divergent: bool
    refinement: list

    @property
    def passed(self) -> bool:
        return self.finite_claimed != self.divergent


def norm_entry(spec: KernelSpec, which: str, p: int) -> NormEntry:
    """One norm with its inner-cutoff refinement sequence and divergence flag."""
    cutoffs = [10.0 ** (-k) for k in range(2, 14, 2)]
    seq = [radial_norm(spec, which, p, r_min=c) for c in cutoffs]
    divergent = _diverges(seq)
    value = seq[-1] if p == 1 else math.sqrt(seq[-1])
    if p == 2:
        name = f"||{'dQ' if which == 'dQ' else 'Q'}||_2"
    else:
        name = f"||{'dQ' if which == 'dQ' else 'Q'}||_1"
    claimed = {("Q", 1): True, ("dQ", 1): True, ("Q", 2): spec.d <= 3, ("dQ", 2): spec.d == 1}[(which, p)]
    if divergent:
        value = math.inf
    return NormEntry(name, spec.d, value, claimed, divergent, seq)


def norm_report(spec: KernelSpec) -> list[NormEntry]:
    """``||Q||_1``, ``||dQ||_1``, ``||Q||_2`` and ``||dQ||_2`` with finiteness verdicts.

    An entry fails when a norm claimed finite does not settle under refinement
    (the error case) or an entry expected to diverge settles.
    """
    entries = [norm_entry(spec, "Q", 1), norm_entry(spec, "dQ", 1),
               norm_entry(spec, "Q", 2), norm_entry(spec, "dQ", 2)]
    for e in entries:
        if e.finite_claimed and e.divergent:
            raise QuadratureNonConvergence(f"{e.quantity} (d={e.d}) did not settle: {e.refinement}")
    return entries


def lsu_envelope(spec: KernelSpec, order: int, a2_fraction: float = 0.9) -> tuple[float, float]:
    """Fitted ``(a1, a2)`` with ``|D^order q_t(x)| <= a1 t^{-(d+order)/2} exp(-a2 |x|^2/t)``.

    By parabolic scaling the ratio depends on ``xi = |x|/sqrt(t)`` only, so ``a1``
    is the supremum over a fine ``xi`` grid.  Diagnostic only.
    """
    a2 = a2_fraction / (2.0 * spec.sigma2)
    xi = np.linspace(0.0, 40.0, 40001)
    pts = np.zeros((xi.size, spec.d))
    pts[:, 0] = xi
    q, g, h = heat_kernel_derivatives(spec, 1.0, pts)
    mag = {0: np.abs(q), 1: np.abs(g).max(axis=1), 2: np.abs(h).reshape(xi.size, -1).max(axis=1)}[order]
    return float(np.max(mag * np.exp(a2 * xi ** 2))), a2
