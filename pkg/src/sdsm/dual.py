"""Function-valued dual process as a forward duplication Monte Carlo.

The level process ``J`` starts at ``m`` and drops by one after an exponential
wait of rate ``gamma sigma^2 l (l - 1) / 2`` at level ``l``; each drop applies a
projection ``Phi_ij`` chosen uniformly over ordered pairs.  Read forwards, the
composition of semigroups and projections becomes: sample ``J_t`` points from
the normalised ``mu_0``, diffuse, and at each jump boundary (latest first)
duplicate coordinate ``i`` into a new slot ``j``; finally evaluate ``f`` at the
``m`` terminal points and weight by ``exp((gamma sigma^2 / 2) int J(J-1) ds)
||mu_0||^{J_t}``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numba as nb
import numpy as np

from . import model as mdl
from . import noise
from .particles import Mu0, ConfigError
from .rng import TAG_DUAL, TAG_INDIVIDUAL, Stream, normal_at, uniform_pair
from .testfunctions import TestFunction, tf_eval


@dataclass
class DualRun:
    m: int
    t: float
    jump_times: np.ndarray  # increasing, within (0, t]
    pairs: np.ndarray  # (k, 2) zero-based (i, j) at each jump, i != j
    gamma_sigma2: float

    @property
    def levels(self) -> np.ndarray:
        """``J`` on each sojourn interval: ``m, m-1, ..., J_t``."""
        return self.m - np.arange(len(self.jump_times) + 1)

    @property
    def final_level(self) -> int:
        return int(self.m - len(self.jump_times))

    def sojourns(self) -> np.ndarray:
        """Time spent at each level in ``[0, t]`` (the last may be infinite when ``t = inf``)."""
        edges = np.concatenate([[0.0], self.jump_times, [self.t]])
        return np.diff(edges)

    @property
    def log_weight(self) -> float:
        lv = self.levels
        s = self.sojourns()
        active = lv > 1
        return 0.5 * self.gamma_sigma2 * float(np.sum(lv[active] * (lv[active] - 1) * s[active]))

    @property
    def weight(self) -> float:
        return math.exp(self.log_weight)


@nb.njit(cache=True)
def _chain(k0, k1, rep, chain, m, t, gs2, times, pairs):
    """Fill one chain; returns the number of jumps."""
    level = m
    now = 0.0
    k = 0
    while level > 1:
        u, v = uniform_pair(k0, k1, rep, np.uint64(chain), np.uint64(TAG_DUAL), k)
        rate = 0.5 * gs2 * level * (level - 1)
        now += -math.log(u) / rate
        if now > t:
            break
        npairs = level * (level - 1)
        idx = min(int(v * npairs), npairs - 1)
        i = idx // (level - 1)
        j = idx % (level - 1)
        if j >= i:
            j += 1
        times[k] = now
        pairs[k, 0] = i
        pairs[k, 1] = j
        k += 1
        level -= 1
    return k


@nb.njit(cache=True)
def _chains(k0, k1, rep, first, count, m, t, gs2, times, pairs, njumps):
    for c in range(count):
        njumps[c] = _chain(k0, k1, rep, first + c, m, t, gs2, times[c], pairs[c])


def sample_jump_chain(m: int, t: float, gamma_sigma2: float, rng: Stream, chain: int = 0) -> DualRun:
    """One chain.  ``t`` may be ``inf`` (run to level 1)."""
    if m < 1:
        raise ConfigError("m must be at least 1")
    if not t >= 0:
        raise ConfigError("t must be nonnegative")
    times = np.full(max(m - 1, 1), np.inf)
    pairs = np.zeros((max(m - 1, 1), 2), dtype=np.int64)
    k0, k1 = rng.key
    k = _chain(k0, k1, np.uint64(rng.replicate), chain, m, float(t), float(gamma_sigma2), times, pairs)
    return DualRun(m, float(t), times[:k].copy(), pairs[:k].copy(), float(gamma_sigma2))


def sample_jump_chains(m: int, t: float, gamma_sigma2: float, rng: Stream, count: int, first: int = 0):
    """Vectorised chains ``first .. first + count - 1``: ``(jump_times, pairs, njumps)``.

    Row ``c`` equals ``sample_jump_chain(..., chain=first + c)``; unused entries are inf.
    """
    width = max(m - 1, 1)
    times = np.full((count, width), np.inf)
    pairs = np.zeros((count, width, 2), dtype=np.int64)
    nj = np.zeros(count, dtype=np.int64)
    k0, k1 = rng.key
    _chains(k0, k1, np.uint64(rng.replicate), first, count, m, float(t), float(gamma_sigma2), times, pairs, nj)
    return times, pairs, nj


# ---------------------------------------------------------------- moment functions

@dataclass(frozen=True)
class ProductFunction:
    """Symmetric ``f(x_1..x_m) = prod_i phi(x_i)``."""

    factor: TestFunction

    def __call__(self, points: np.ndarray) -> float:
        return float(np.prod(self.factor.value(points)))

    @property
    def name(self) -> str:
        return f"prod[{self.factor.name}]"


@dataclass
class DualEstimate:
    m: int
    t: float
    estimate: float
    se: float
    reps: int
    rejected: int
    name: str = ""
    config_id: str = ""

    @property
    def rejected_fraction(self) -> float:
        return self.rejected / self.reps if self.reps else 0.0

    def __iter__(self):
        yield self.estimate
        yield self.se


def _duplicate(pos: np.ndarray, i: int, j: int) -> np.ndarray:
    # inverse reading of Phi_ij: the (l-1) current coordinates fill every slot but j,
    # and slot j receives a copy of slot i
    lm1 = pos.shape[0]
    src = i if i < j else i - 1
    assert 0 <= src < lm1
    return np.concatenate([pos[:j], pos[src:src + 1], pos[j:]], axis=0)


def _segments(run: DualRun):
    """Durations traversed forwards, latest jump first, with the pair applied after each."""
    edges = np.concatenate([[0.0], run.jump_times, [run.t]])
    durations = np.diff(edges)[::-1]
    return durations, run.pairs[::-1]


def _substeps(duration: float, dt: float) -> int:
    if duration <= 0:
        return 0
    return max(1, int(math.ceil(duration / dt - 1e-9)))


def _replicate_python(run, pos, model, dt, stream, f, noise_method):
    durations, pairs = _segments(run)
    step = 1
    for s, dur in enumerate(durations):
        n = _substeps(dur, dt)
        for _ in range(n):
            inc = noise.sample_step(model, pos, dur / n, stream.substream(step), method=noise_method)
            pos = pos + inc.total
            step += 1
        if s < len(pairs):
            pos = _duplicate(pos, int(pairs[s, 0]), int(pairs[s, 1]))
    return f(pos)


@nb.njit(cache=True)
def _replicate_compiled(pos0, durations, pairs, dt, cmat, amp, s, delta, reach, bits, common_on,
                        k0, k1, rep, kind, params):
    d = pos0.shape[1]
    pos = pos0.copy()
    step = 1
    field = np.empty(pos.shape[0])
    z = np.empty(d)
    for seg in range(durations.shape[0]):
        dur = durations[seg]
        n = 0
        if dur > 0:
            n = max(1, int(math.ceil(dur / dt - 1e-9)))
        for _ in range(n):
            h = dur / n
            m = pos.shape[0]
            field = np.zeros(m)
            if common_on:
                noise.cells_field(pos, s, delta, reach, bits, k0, k1, rep, np.uint64(step), field)
            cs = math.sqrt(h * delta ** d)
            sq = math.sqrt(h)
            for i in range(m):
                for p in range(d):
                    z[p] = normal_at(k0, k1, rep, np.uint64(step), np.uint64(TAG_INDIVIDUAL), i * d + p)
                for p in range(d):
                    ind = 0.0
                    for r in range(d):
                        ind += cmat[p, r] * z[r]
                    pos[i, p] += sq * ind + cs * field[i] * amp[p]
            step += 1
        if seg < pairs.shape[0]:
            i = pairs[seg, 0]
            j = pairs[seg, 1]
            src = i if i < j else i - 1
            new = np.empty((pos.shape[0] + 1, d))
            for a in range(j):
                new[a] = pos[a]
            new[j] = pos[src]
            for a in range(j, pos.shape[0]):
                new[a + 1] = pos[a]
            pos = new
    g = np.empty(d)
    hh = np.empty((d, d))
    val = 1.0
    for i in range(pos.shape[0]):
        val *= tf_eval(kind, params, d, pos[i], g, hh)
    return val


def dual_moment(f, m: int, mu0_spec: Mu0, t: float, model: mdl.ModelCoefficients, reps: int,
                rng: Stream, dt: float = 0.01, engine: str = "numba", noise_method: str = "cells",
                config_id: str = "") -> DualEstimate:
    """Monte Carlo estimate of ``E <f, mu_t^m>`` with its standard error.

    ``f`` is a :class:`ProductFunction`, a :class:`TestFunction` (used as the
    product factor) or a callable on an ``(m, d)`` array (python engine only).
    Non-finite replicate values are rejected and counted.
    """
    if m < 1:
        raise ConfigError("m must be at least 1 (m = 0 has no simulation meaning)")
    if t < 0:
        raise ConfigError("t must be nonnegative")
    if isinstance(f, TestFunction):
        f = ProductFunction(f)
    gs2 = model.gamma * model.sigma2
    total = mu0_spec.mass
    if total == 0:
        return DualEstimate(m, t, 0.0, 0.0, reps, 0, getattr(f, "name", ""), config_id)
    compiled = engine == "numba" and isinstance(f, ProductFunction) and f.factor.compiled
    if compiled:
        plan = noise.cell_plan(model)
        cmat = np.asarray(model.c_params["matrix"], float).reshape(model.d, model.d)
    vals = np.empty(reps)
    for r in range(reps):
        stream = Stream(rng.seed, r)
        # chain r is row r of sample_jump_chains(..., Stream(seed))
        run = sample_jump_chain(m, t, gs2, Stream(rng.seed), chain=r)
        jt = run.final_level
        pos = mu0_spec.sample(jt, stream.substream(0))
        scale = run.weight * total ** jt
        if compiled:
            durations, pairs = _segments(run)
            k0, k1 = stream.key
            fv = _replicate_compiled(np.ascontiguousarray(pos), durations.astype(float),
                                     np.ascontiguousarray(pairs, dtype=np.int64), dt, cmat,
                                     plan.amplitude, plan.scale, plan.delta, plan.radius, plan.bits,
                                     not plan.zero, k0, k1, np.uint64(r), f.factor.kind,
                                     f.factor.param_array)
        else:
            fv = _replicate_python(run, pos, model, dt, stream, f, noise_method)
        vals[r] = fv * scale
    ok = np.isfinite(vals)
    good = vals[ok]
    n = good.size
    est = float(np.sum(good) / n) if n else math.nan
    se = float(np.sqrt(np.sum((good - est) ** 2) / max(n - 1, 1) / n)) if n else math.nan
    return DualEstimate(m, t, est, se, reps, int((~ok).sum()), getattr(f, "name", ""), config_id)


# ---------------------------------------------------------------- cross check

@dataclass
class MomentStat:
    m: int
    name: str
    mean: float
    se: float
    config_id: str = ""


@dataclass
class CrossCheckEntry:
    m: int
    name: str
    particle: float
    dual: float
    z: float
    flagged: bool


def cross_check(particle_ensemble_stats, dual_estimates, threshold: float = 3.0) -> list[CrossCheckEntry]:
    """Two-sample z-scores between particle-side and dual-side moments.

    Both inputs are sequences of :class:`MomentStat` (a :class:`DualEstimate` is
    accepted on the dual side); entries are matched on ``(m, name)``.
    """
    dual_map = {}
    for d in dual_estimates:
        if isinstance(d, DualEstimate):
            d = MomentStat(d.m, d.name, d.estimate, d.se, d.config_id)
        dual_map[(d.m, d.name)] = d
    out = []
    for p in particle_ensemble_stats:
        key = (p.m, p.name)
        if key not in dual_map:
            raise KeyError(f"no dual estimate for m={p.m}, {p.name!r}")
        d = dual_map[key]
        if p.config_id != d.config_id:
            raise ValueError(f"configuration mismatch: {p.config_id!r} vs {d.config_id!r}")
        se = math.hypot(p.se, d.se)
        z = (p.mean - d.mean) / se if se > 0 else (0.0 if p.mean == d.mean else math.inf)
        out.append(CrossCheckEntry(p.m, p.name, p.mean, d.mean, z, abs(z) > threshold))
    return out
