"""Mollified local time and the Tanaka representation on simulated paths.

``Lambda^{x,eps}_t = int_0^t <q_eps(x - .), mu_s> ds`` (trapezoid in time).  By
``(lam - G_1) Q^lam_eps = q_eps`` it equals ``int_0^t <(lam - G_1) psi, mu_s> ds``
with ``psi = Q^lam_eps(x - .)``, which Ito's formula turns into

    <psi, mu_0> - <psi, mu_t> + lam int <psi, mu_s> ds + X_t(psi) + M_t(psi) [+ U_t(psi)],

``U`` being the individual-noise martingale that vanishes only in the limit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numba as nb
import numpy as np

from . import testfunctions as tfm
from .particles import PathRecord
from .testfunctions import TestFunction


class LocalTimeError(ValueError):
    pass


class GridError(LocalTimeError):
    pass


@dataclass
class LocalTimeEstimate:
    x: tuple
    t: float
    eps: float
    lam: float
    value: float
    initial_mass: float = math.nan
    terminal_mass: float = math.nan
    lambda_integral: float = math.nan
    common_integral: float = math.nan
    branching_integral: float = math.nan
    individual_integral: float = 0.0
    resolvent_form: float = math.nan  # int <(lam - G_1) psi, mu_s> ds

    @property
    def rhs(self) -> float:
        return (self.initial_mass - self.terminal_mass + self.lambda_integral + self.common_integral
                + self.branching_integral + self.individual_integral)

    @property
    def residual(self) -> float:
        return abs(self.value - self.rhs)

    @property
    def form_difference(self) -> float:
        return abs(self.value - self.resolvent_form)

    def as_row(self) -> dict:
        return {"x": ",".join(f"{v:g}" for v in self.x), "eps": self.eps, "lambda": self.lam,
                "Lambda": self.value, "initial": self.initial_mass, "terminal": self.terminal_mass,
                "lambda_integral": self.lambda_integral, "X": self.common_integral,
                "M": self.branching_integral, "U": self.individual_integral, "residual": self.residual}


def _trapezoid(y: np.ndarray, dt: float) -> float:
    if len(y) < 2:
        return 0.0
    return float(dt * (np.sum(y) - 0.5 * (y[0] + y[-1])))


def _check_dim(record: PathRecord):
    d = record.model.d if record.model is not None else record.observables[0].d
    if d >= 4:
        raise LocalTimeError("local time is only defined here for d <= 3")
    return d


def _sigma2(record: PathRecord) -> float:
    if record.model is None:
        raise LocalTimeError("the record carries no model; simulate() attaches it")
    return record.model.effective_sigma2()


def _point(x, d: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(x, dtype=float), (d,)).copy()


def _find(record: PathRecord, kind: int, params: Sequence[float]) -> Optional[int]:
    target = np.asarray(params, float)
    for i, o in enumerate(record.observables):
        if o.kind == kind and len(o.params) == len(target) and np.allclose(o.params, target, rtol=1e-12, atol=1e-14):
            return i
    return None


def _stride_one(record: PathRecord) -> bool:
    return len(record.snapshots) == record.steps + 1


def _snapshot_pairing(record: PathRecord, fn) -> np.ndarray:
    """``<fn, mu_{t_k}>`` over all snapshots (requires stride 1)."""
    if not _stride_one(record):
        raise LocalTimeError("snapshots at every step are needed (or register the observable)")
    return np.array([record.mass * float(np.sum(fn(s))) if len(s) else 0.0 for s in record.snapshots])


def mollified_series(record: PathRecord, x, eps: float) -> np.ndarray:
    d = _check_dim(record)
    x = _point(x, d)
    s2 = _sigma2(record)
    i = _find(record, tfm.MOLLIFIER, (eps, s2, *x))
    if i is not None:
        return record.values[i]
    q = tfm.mollifier(x, eps, s2, d)
    return _snapshot_pairing(record, q.value)


def _resolvent_series(record: PathRecord, x, eps: float, lam: float):
    """``(<psi, mu>, <G_1 psi, mu>)`` series, from the registered observable or snapshots."""
    d = _check_dim(record)
    x = _point(x, d)
    s2 = _sigma2(record)
    i = _find(record, tfm.RESOLVENT, (lam, eps, s2, *x))
    if i is not None:
        return record.values[i], record.generator[i], i
    psi = tfm.resolvent_kernel(x, lam, eps, s2, d)
    sig = record.model.effective_diffusion()

    def gen(pts):
        return 0.5 * np.einsum("pq,npq->n", sig, psi.hessian(pts))

    return _snapshot_pairing(record, psi.value), _snapshot_pairing(record, gen), None


def local_time(record: PathRecord, x, eps: float, lam: float = 1.0, full: bool = False):
    """``Lambda^{x,eps}_T`` by the trapezoid rule in time.

    With ``full=True`` a :class:`LocalTimeEstimate` is returned whose
    ``resolvent_form`` is the same integral computed as ``int <(lam - G_1) psi, mu>``
    (``nan`` when ``psi`` is neither registered nor recoverable from snapshots).
    """
    if not eps > 0:
        raise LocalTimeError("eps must be positive")
    d = _check_dim(record)
    value = _trapezoid(mollified_series(record, x, eps), record.dt)
    if not full:
        return value
    est = LocalTimeEstimate(tuple(_point(x, d)), record.T, eps, lam, value)
    try:
        v, g, _ = _resolvent_series(record, x, eps, lam)
        est.resolvent_form = lam * _trapezoid(v, record.dt) - _trapezoid(g, record.dt)
    except LocalTimeError:
        pass
    return est


def tanaka_rhs(record: PathRecord, x, eps: float, lam: float = 1.0,
               include_individual: bool = True) -> LocalTimeEstimate:
    """All Tanaka terms for a run that registered ``psi = Q^lam_eps(x - .)``."""
    d = _check_dim(record)
    s2 = _sigma2(record)
    xv = _point(x, d)
    i = _find(record, tfm.RESOLVENT, (lam, eps, s2, *xv))
    if i is None:
        raise KeyError(f"psi for x={tuple(xv)}, eps={eps}, lambda={lam} was not registered")
    est = local_time(record, xv, eps, lam, full=True)
    v = record.values[i]
    est.initial_mass = float(v[0])
    est.terminal_mass = float(v[-1])
    est.lambda_integral = lam * _trapezoid(v, record.dt)
    est.common_integral = float(record.X[i, -1])
    est.branching_integral = float(record.M[i, -1])
    est.individual_integral = float(record.U[i, -1]) if include_individual else 0.0
    return est


def tanaka_residual(record: PathRecord, x, eps: float, lam: float = 1.0, drop: Sequence[str] = ()) -> float:
    """``|local_time - tanaka_rhs|``; ``drop`` removes terms (``"M"``, ``"X"``, ``"U"``) as ablations."""
    est = tanaka_rhs(record, x, eps, lam)
    if "M" in drop:
        est.branching_integral = 0.0
    if "X" in drop:
        est.common_integral = 0.0
    if "U" in drop:
        est.individual_integral = 0.0
    return est.residual


# ---------------------------------------------------------------- occupation consistency

@nb.njit(cache=True)
def _smoothed_pairing(pos, grid, weights, s, out):
    """``sum_particles sum_x w(x) q(x - y)`` for 1-d grids; ``q`` Gaussian of variance ``s``."""
    m = pos.shape[0]
    ng = grid.shape[0]
    h = grid[1] - grid[0]
    reach = 12.0 * math.sqrt(s)
    norm = 1.0 / math.sqrt(2.0 * math.pi * s)
    acc = 0.0
    for i in range(m):
        y = pos[i, 0]
        lo = max(0, int(math.floor((y - reach - grid[0]) / h)))
        hi = min(ng - 1, int(math.ceil((y + reach - grid[0]) / h)))
        for k in range(lo, hi + 1):
            u = grid[k] - y
            acc += weights[k] * norm * math.exp(-0.5 * u * u / s)
    out[0] = acc


@dataclass
class OccupationReport:
    eps: list
    smoothed: list  # int phi(x) Lambda^{x,eps}_t dx
    occupation: float  # int_0^t <phi, mu_s> ds
    gaps: list = field(default_factory=list)

    @property
    def abs_gaps(self) -> np.ndarray:
        return np.abs(np.asarray(self.gaps))

    @property
    def monotone(self) -> bool:
        g = self.abs_gaps
        return bool(np.all(np.diff(g) < 0))

    @property
    def rate(self) -> float:
        """Least-squares slope of ``log |gap|`` against ``log eps``."""
        g = self.abs_gaps
        if np.any(g <= 0):
            return math.nan
        return float(np.polyfit(np.log(self.eps), np.log(g), 1)[0])


def _grid(phi: TestFunction, spacing: float):
    if phi.support is None:
        raise LocalTimeError("occupation consistency needs a compactly supported test function")
    centre, radius = phi.support
    n = int(math.ceil(2 * radius / spacing))
    grid = np.linspace(centre[0] - radius, centre[0] + radius, n + 1)
    w = np.full(n + 1, grid[1] - grid[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    return grid, w


def kernel_mass_check(eps: float, sigma2: float, spacing: float, tol: float = 1e-6) -> float:
    """Discrete mass of ``q_eps`` on a lattice of the given spacing (must be 1 within ``tol``)."""
    s = sigma2 * eps
    reach = 12.0 * math.sqrt(s)
    for offset in (0.0, 0.5):
        x = (np.arange(-math.ceil(reach / spacing), math.ceil(reach / spacing) + 1) + offset) * spacing
        mass = spacing * np.sum(np.exp(-0.5 * x * x / s)) / math.sqrt(2 * math.pi * s)
        if abs(mass - 1.0) > tol:
            raise GridError(f"grid spacing {spacing} does not resolve q_eps (eps={eps}): mass {mass}")
    return mass


def occupation_consistency(record: PathRecord, phi: TestFunction, eps_sequence: Sequence[float],
                           lam: float = 1.0, spacing: Optional[float] = None) -> OccupationReport:
    """Compare ``int phi(x) Lambda^{x,eps}_t dx`` with ``int_0^t <phi, mu_s> ds``.

    The spatial integral is a trapezoid rule over ``supp(phi)``; the time rule is the
    same trapezoid on both sides, so the gap is ``int <q_eps * phi - phi, mu_s> ds``.
    ``lam`` does not enter (the q_eps form is used).
    """
    d = _check_dim(record)
    if d != 1:
        raise LocalTimeError("occupation consistency is implemented for d = 1")
    if not _stride_one(record):
        raise LocalTimeError("occupation consistency needs snapshots at every step")
    s2 = _sigma2(record)
    eps_sequence = [float(e) for e in eps_sequence]
    if spacing is None:
        spacing = 0.25 * math.sqrt(s2 * min(eps_sequence))
    for e in eps_sequence:
        kernel_mass_check(e, s2, spacing)
    grid, w = _grid(phi, spacing)
    wphi = w * phi.value(grid[:, None])
    occ = _trapezoid(_snapshot_pairing(record, phi.value), record.dt)
    smoothed = []
    out = np.zeros(1)
    for e in eps_sequence:
        series = np.zeros(len(record.snapshots))
        for k, snap in enumerate(record.snapshots):
            if len(snap):
                _smoothed_pairing(np.ascontiguousarray(snap), grid, wphi, s2 * e, out)
                series[k] = record.mass * out[0]
        smoothed.append(_trapezoid(series, record.dt))
    return OccupationReport(eps_sequence, smoothed, occ, [sm - occ for sm in smoothed])


def second_moment_profile(records: Sequence[PathRecord], x, eps_sequence: Sequence[float]) -> list:
    """Ensemble mean of ``(Lambda^{x,eps}_T)^2`` for each ``eps`` (stability diagnostic)."""
    out = []
    for e in eps_sequence:
        vals = np.array([local_time(r, x, e) for r in records])
        out.append(float(np.mean(vals ** 2)))
    return out
