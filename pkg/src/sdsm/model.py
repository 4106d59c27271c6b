"""SDSM coefficients, interaction covariance and the m-particle diffusion matrix.

A model is the tuple ``(d, c, h, gamma, offspring)``.  ``c`` is the individual
diffusion coefficient (d x d matrix field) and ``h`` the random-medium intensity
(d-vector field); the medium couples particles through

    rho_pq(z) = int h_p(u) h_q(u - z) du,

and the m-particle motion has diffusion matrix Gamma with diagonal blocks
``a(x_i) + rho(0)`` (``a = c c^T``) and off-diagonal blocks ``rho(x_i - x_j)``.

Only named coefficient families are loadable from JSON: ``constant_c``,
``gaussian_h`` and ``zero_h``.  The Python API also accepts callables, in which
case ``rho`` is evaluated by tensor Gauss-Legendre quadrature.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

PSD_CLAMP = 1e-10


class ModelError(ValueError):
    """A model violates a standing hypothesis or is malformed."""


class QuadratureError(ModelError):
    pass


class EllipticityViolation(ModelError):
    """Gamma is not strictly positive definite at some configuration."""

    def __init__(self, message, positions=None, lambda_min=None):
        super().__init__(message)
        self.positions = None if positions is None else np.array(positions, dtype=float)
        self.lambda_min = lambda_min


@dataclass(frozen=True)
class OffspringLaw:
    """Finite-support critical offspring distribution ``p_0..p_K``."""

    probs: tuple

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", tuple(float(v) for v in p))
        if p.ndim != 1 or p.size < 1:
            raise ModelError("offspring law needs at least one probability")
        if np.any(p < 0):
            raise ModelError("offspring probabilities must be nonnegative")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ModelError(f"offspring probabilities sum to {p.sum():.15g}, not 1")
        if p.size > 1 and p[1] != 0.0:
            raise ModelError("p_1 must be 0")
        mean = float(np.dot(np.arange(p.size), p))
        if abs(mean - 1.0) > 1e-12:
            raise ModelError(f"offspring mean is {mean:.15g}; the branching must be critical")
        if not self.sigma2 > 0:
            raise ModelError("offspring variance must be positive")

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=float)

    @property
    def sigma2(self) -> float:
        p = self.array
        return float(np.dot(np.arange(p.size) ** 2, p) - 1.0)

    @property
    def cdf(self) -> np.ndarray:
        c = np.cumsum(self.array)
        c[-1] = 1.0
        return c

    def sample(self, u: np.ndarray) -> np.ndarray:
        """Inverse-CDF map of uniforms to offspring counts."""
        return np.searchsorted(self.cdf, u, side="right").astype(np.int64)

    @classmethod
    def binary(cls) -> "OffspringLaw":
        return cls((0.5, 0.0, 0.5))


@dataclass(frozen=True)
class ModelCoefficients:
    """One SDSM instance.

    ``c`` maps an (n, d) array of points to (n, d, d); ``h`` maps (n, d) to
    (n, d).  Family metadata (``c_family``/``h_family`` and their parameter
    dicts) is what the compiled engine and the JSON loader understand.
    """

    d: int
    c: Callable[[np.ndarray], np.ndarray]
    h: Callable[[np.ndarray], np.ndarray]
    gamma: float
    offspring: OffspringLaw
    rho_closed_form: Optional[Callable[[np.ndarray], np.ndarray]] = None
    h_scale: float = 1.0
    c_family: Optional[str] = None
    c_params: dict = field(default_factory=dict)
    h_family: Optional[str] = None
    h_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ModelError("dimension must be a positive integer")
        if not self.gamma >= 0:
            raise ModelError("gamma must be nonnegative")

    @property
    def sigma2(self) -> float:
        return self.offspring.sigma2

    def a(self, x: np.ndarray) -> np.ndarray:
        cx = self.c(np.atleast_2d(x))
        return np.einsum("npr,nqr->npq", cx, cx)

    @property
    def constant_coefficients(self) -> bool:
        return self.c_family == "constant_c" and self.h_family in ("gaussian_h", "zero_h")

    def effective_diffusion(self) -> np.ndarray:
        """``a + rho(0)`` for constant-coefficient models (d x d)."""
        if not self.constant_coefficients:
            raise ModelError("effective diffusion is only constant for constant_c models")
        return self.a(np.zeros((1, self.d)))[0] + rho(self, np.zeros(self.d))

    def effective_sigma2(self) -> float:
        """Scalar ``sigma_0^2`` when ``a + rho(0)`` is a multiple of the identity."""
        g = self.effective_diffusion()
        s = g[0, 0]
        if not np.allclose(g, s * np.eye(self.d), atol=1e-12, rtol=1e-10):
            raise ModelError("a + rho(0) is not a scalar multiple of the identity")
        return float(s)

    def to_config(self) -> dict:
        if self.c_family is None or self.h_family is None:
            raise ModelError("only family-based models serialise to JSON")
        return {
            "d": self.d,
            "c": {"family": self.c_family, **_jsonable(self.c_params)},
            "h": {"family": self.h_family, **_jsonable(self.h_params)},
            "gamma": self.gamma,
            "offspring": list(self.offspring.probs),
        }


def _jsonable(params: dict) -> dict:
    return {k: (np.asarray(v).tolist() if isinstance(v, (np.ndarray, list, tuple)) else v)
            for k, v in params.items()}


# ---------------------------------------------------------------- families

def constant_c(d: int, matrix=1.0):
    m = np.asarray(matrix, dtype=float)
    if m.ndim == 0:
        m = float(m) * np.eye(d)
    if m.shape != (d, d):
        raise ModelError(f"constant_c matrix must be {d}x{d}")

    def c(x):
        x = np.atleast_2d(x)
        return np.broadcast_to(m, (x.shape[0], d, d)).copy()

    return c, {"matrix": m.tolist()}


def gaussian_h(d: int, amplitude=1.0, scale=1.0):
    """``h_p(u) = amplitude_p * exp(-|u|^2 / (2 scale^2))``."""
    amp = np.broadcast_to(np.asarray(amplitude, dtype=float), (d,)).copy()
    if not scale > 0:
        raise ModelError("gaussian_h scale must be positive")
    s2 = float(scale) ** 2

    def h(u):
        u = np.atleast_2d(u)
        g = np.exp(-np.sum(u * u, axis=1) / (2.0 * s2))
        return g[:, None] * amp[None, :]

    # Gaussian self-convolution: int g(u) g(u - z) du = (pi s^2)^{d/2} exp(-|z|^2 / (4 s^2))
    outer = np.outer(amp, amp) * (math.pi * s2) ** (d / 2.0)

    def rho_cf(z):
        z = np.asarray(z, dtype=float).reshape(d)
        return outer * math.exp(-float(z @ z) / (4.0 * s2))

    return h, rho_cf, {"amplitude": amp.tolist(), "scale": float(scale)}


def zero_h(d: int):
    def h(u):
        return np.zeros((np.atleast_2d(u).shape[0], d))

    def rho_cf(z):
        return np.zeros((d, d))

    return h, rho_cf, {}


def make_model(d: int = 1, c: Optional[dict] = None, h: Optional[dict] = None,
               gamma: float = 1.0, offspring: Sequence[float] = (0.5, 0.0, 0.5)) -> ModelCoefficients:
    """Build a model from family descriptors (the JSON schema)."""
    c = dict(c or {"family": "constant_c", "matrix": 1.0})
    h = dict(h or {"family": "zero_h"})
    cf = c.pop("family", None)
    if cf != "constant_c":
        raise ModelError(f"unknown c family {cf!r}")
    cfun, cparams = constant_c(d, c.pop("matrix", 1.0))
    if c:
        raise ModelError(f"unexpected constant_c parameters {sorted(c)}")
    hf = h.pop("family", None)
    if hf == "gaussian_h":
        hfun, rcf, hparams = gaussian_h(d, h.pop("amplitude", 1.0), h.pop("scale", 1.0))
        scale = hparams["scale"]
    elif hf == "zero_h":
        hfun, rcf, hparams = zero_h(d)
        scale = 1.0
    else:
        raise ModelError(f"unknown h family {hf!r}")
    if h:
        raise ModelError(f"unexpected {hf} parameters {sorted(h)}")
    return ModelCoefficients(d=d, c=cfun, h=hfun, gamma=float(gamma),
                             offspring=OffspringLaw(tuple(offspring)), rho_closed_form=rcf,
                             h_scale=scale, c_family="constant_c", c_params=cparams,
                             h_family=hf, h_params=hparams)


def reference_model() -> ModelCoefficients:
    """d=1, c=1, h(u) = (2 pi)^(-1/4) exp(-u^2/4), gamma=1, binary offspring.

    rho(z) = exp(-z^2/8) and sigma_0^2 = a + rho(0) = 2.
    """
    return make_model(1, {"family": "constant_c", "matrix": 1.0},
                      {"family": "gaussian_h", "amplitude": (2 * math.pi) ** -0.25,
                       "scale": math.sqrt(2.0)},
                      gamma=1.0, offspring=(0.5, 0.0, 0.5))


def model_from_config(cfg: dict) -> ModelCoefficients:
    cfg = dict(cfg)
    known = {"d", "c", "h", "gamma", "offspring"}
    extra = set(cfg) - known
    if extra:
        raise ModelError(f"unknown model keys {sorted(extra)}")
    if "d" not in cfg:
        raise ModelError("model config needs 'd'")
    model = make_model(int(cfg["d"]), cfg.get("c"), cfg.get("h"),
                       float(cfg.get("gamma", 1.0)), cfg.get("offspring", (0.5, 0.0, 0.5)))
    validate_model(model)
    return model


def load_model(path) -> ModelCoefficients:
    with open(Path(path)) as fh:
        return model_from_config(json.load(fh))


# ---------------------------------------------------------------- rho

def _truncation_half_width(model: ModelCoefficients, tail: float = 1e-10) -> float:
    # h is declared Gaussian-type with decay scale h_scale; |h|^2 tail below `tail`
    return model.h_scale * math.sqrt(2.0 * math.log(1.0 / tail)) + 1.0


def _tensor_rule(d: int, half_width: float, n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    # composite: split [-L, L] into panels so Gaussian-type integrands are resolved
    panels = max(4, int(math.ceil(2 * half_width)))
    edges = np.linspace(-half_width, half_width, panels + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])
    rad = 0.5 * (edges[1:] - edges[:-1])
    nodes = (mid[:, None] + rad[:, None] * x[None, :]).ravel()
    weights = (rad[:, None] * w[None, :]).ravel()
    grids = np.meshgrid(*([nodes] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    wts = np.ones(pts.shape[0])
    for wg in np.meshgrid(*([weights] * d), indexing="ij"):
        wts = wts * wg.ravel()
    return pts, wts


def rho_quadrature(model: ModelCoefficients, z, n: int = 8) -> np.ndarray:
    """``rho(z)`` by tensor Gauss-Legendre; refined once to certify convergence."""
    z = np.asarray(z, dtype=float).reshape(model.d)
    half = _truncation_half_width(model) + float(np.max(np.abs(z))) / 2.0
    results = []
    for order in (n, 2 * n):
        pts, wts = _tensor_rule(model.d, half, order)
        # shift the box to be centred between the two kernels
        u = pts + z / 2.0
        hu = model.h(u)
        hz = model.h(u - z)
        results.append(np.einsum("n,np,nq->pq", wts, hu, hz))
    if np.max(np.abs(results[1] - results[0])) > 1e-7:
        raise QuadratureError(f"rho quadrature did not converge at z={z}")
    return results[1]


def rho(model: ModelCoefficients, z) -> np.ndarray:
    """Interaction covariance ``rho(z)`` as a d x d matrix."""
    if model.rho_closed_form is not None:
        return np.asarray(model.rho_closed_form(np.asarray(z, dtype=float)), dtype=float).reshape(model.d, model.d)
    return rho_quadrature(model, z)


# ---------------------------------------------------------------- Gamma

def assemble_gamma(model: ModelCoefficients, positions) -> np.ndarray:
    """Dense symmetric (d m) x (d m) diffusion matrix of the m-particle motion.

    Row/column ``i * d + p`` belongs to particle ``i``, coordinate ``p``.
    """
    x = np.atleast_2d(np.asarray(positions, dtype=float))
    if x.shape[1] != model.d:
        x = x.reshape(-1, model.d)
    m, d = x.shape
    if m < 1:
        raise ModelError("need at least one particle")
    g = np.empty((m * d, m * d))
    a = model.a(x)
    r0 = rho(model, np.zeros(d))
    for i in range(m):
        g[i * d:(i + 1) * d, i * d:(i + 1) * d] = a[i] + r0
        for j in range(i + 1, m):
            blk = rho(model, x[i] - x[j])
            g[i * d:(i + 1) * d, j * d:(j + 1) * d] = blk
            g[j * d:(j + 1) * d, i * d:(i + 1) * d] = blk.T
    return 0.5 * (g + g.T)


def common_covariance(model: ModelCoefficients, positions) -> np.ndarray:
    """Blocks ``rho(x_i - x_j)`` including ``rho(0)`` on the diagonal."""
    x = np.atleast_2d(np.asarray(positions, dtype=float)).reshape(-1, model.d)
    m, d = x.shape
    r = np.empty((m * d, m * d))
    for i in range(m):
        for j in range(i, m):
            blk = rho(model, x[i] - x[j])
            r[i * d:(i + 1) * d, j * d:(j + 1) * d] = blk
            r[j * d:(j + 1) * d, i * d:(i + 1) * d] = blk.T
    return 0.5 * (r + r.T)


def psd_factor(matrix: np.ndarray, clamp: float = PSD_CLAMP) -> np.ndarray:
    """Symmetric square-root factor ``L`` with ``L L^T = matrix``.

    Eigenvalues in ``[-clamp, 0)`` are treated as quadrature noise and zeroed.
    """
    w, v = np.linalg.eigh(matrix)
    scale = max(1.0, float(np.max(np.abs(w)))) if w.size else 1.0
    if w.size and w.min() < -clamp * scale:
        raise ModelError(f"covariance has eigenvalue {w.min():.3e} below the PSD clamp")
    w = np.where(w < 0, 0.0, w)
    return v * np.sqrt(w)[None, :]


def check_ellipticity(model: ModelCoefficients, positions, raise_on_violation: bool = True):
    """Extreme eigenvalues ``(lambda_min, lambda_max)`` of Gamma."""
    x = np.atleast_2d(np.asarray(positions, dtype=float))
    if x.size == 0:
        raise ModelError("positions must be nonempty")
    w = np.linalg.eigvalsh(assemble_gamma(model, x))
    lmin, lmax = float(w[0]), float(w[-1])
    if raise_on_violation and not lmin > 0:
        raise EllipticityViolation(
            f"Gamma is not positive definite (lambda_min={lmin:.3e})", x, lmin)
    return lmin, lmax


def quadratic_form_decomposition(model: ModelCoefficients, positions, xi, n: int = 16) -> tuple[float, float]:
    """Both sides of ``xi^T Gamma xi = sum_i |c(x_i)^T xi_i|^2 + int |sum_i xi_i . h(u - x_i)|^2 du``.

    Returns ``(matrix_side, integral_side)``; the integral is by quadrature.
    """
    x = np.atleast_2d(np.asarray(positions, dtype=float)).reshape(-1, model.d)
    xi = np.asarray(xi, dtype=float).reshape(x.shape)
    lhs = float(xi.ravel() @ assemble_gamma(model, x) @ xi.ravel())
    cx = model.c(x)
    indiv = float(np.sum(np.einsum("npr,np->nr", cx, xi) ** 2))
    half = _truncation_half_width(model) + float(np.max(np.abs(x)))
    pts, wts = _tensor_rule(model.d, half, n)
    field_ = np.zeros(pts.shape[0])
    for i in range(x.shape[0]):
        field_ += model.h(pts - x[i]) @ xi[i]
    return lhs, indiv + float(np.dot(wts, field_ ** 2))


def validate_model(model: ModelCoefficients, n_samples: int = 16, seed: int = 0) -> None:
    """Numerical checks of the standing hypotheses; raises on failure."""
    rng = np.random.default_rng(seed)
    half = _truncation_half_width(model)
    pts, wts = _tensor_rule(model.d, half, 8)
    l1 = wts @ np.abs(model.h(pts))
    if not np.all(np.isfinite(l1)):
        raise ModelError("h is not integrable over the truncation box")
    xs = rng.uniform(-3.0, 3.0, size=(n_samples, model.d))
    a = model.a(xs)
    for ai in a:
        if not np.allclose(ai, ai.T, atol=1e-12):
            raise ModelError("a = c c^T is not symmetric")
        if np.linalg.eigvalsh(ai)[0] < -PSD_CLAMP:
            raise ModelError("a = c c^T is not positive semidefinite")
    if model.rho_closed_form is not None and model.h_family != "zero_h":
        for z in xs[:4]:
            if np.max(np.abs(model.rho_closed_form(z) - rho_quadrature(model, z))) > 1e-7:
                raise ModelError(f"closed-form rho disagrees with quadrature at z={z}")
    check_ellipticity(model, np.zeros((1, model.d)))
