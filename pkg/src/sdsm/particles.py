"""Branching particle approximation of the SDSM.

Each of ``m_0 = round(||mu_0|| theta^n)`` particles carries mass ``theta^-n``,
moves by the correlated diffusion of :mod:`sdsm.noise` and branches at rate
``gamma theta^n`` into a critical number of offspring placed at its position.

Per step ``[t_k, t_k + dt]`` the engine

1. records ``<phi, mu>``, ``<G_1 phi, mu>`` and ``<phi^2, mu>`` at the left point,
2. moves every particle and accumulates ``X`` (common noise) and ``U``
   (individual noise) from left-point gradients,
3. branches at the new positions and adds ``(Z - 1) mass phi(x)`` to ``M``.

Branching is either per-step Bernoulli thinning (``"bernoulli"``, requires
``gamma theta^n dt <= 0.1``) or ``"exact"``: the continuous-time Galton-Watson
tree of each particle over the step, frozen at its position.  Two engines share
the random stream layout: ``"python"`` (numpy, any model) and ``"numba"``
(compiled, family models with the cells noise).
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numba as nb
import numpy as np

from . import model as mdl
from . import noise
from .rng import TAG_BRANCH, TAG_EVENT, TAG_INDIVIDUAL, TAG_INIT, Stream, normal_at, uniform_pair
from .testfunctions import NPARAM, TestFunction, tf_eval

BERNOULLI_CAP = 0.1
MAX_PARTICLES = 5_000_000


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- initial measure

@dataclass(frozen=True)
class Mu0:
    """Finite initial measure: ``point`` atoms, ``gaussian`` or ``uniform`` box density."""

    kind: str = "point"
    mass: float = 1.0
    atoms: tuple = ((0.0,),)
    weights: tuple = (1.0,)
    mean: tuple = (0.0,)
    std: float = 1.0
    low: tuple = (0.0,)
    high: tuple = (1.0,)

    def __post_init__(self):
        if self.kind not in ("point", "gaussian", "uniform"):
            raise ConfigError(f"unknown initial measure {self.kind!r}")
        if self.mass < 0:
            raise ConfigError("initial mass must be nonnegative")

    @property
    def d(self) -> int:
        src = {"point": self.atoms[0], "gaussian": self.mean, "uniform": self.low}[self.kind]
        return len(src)

    @classmethod
    def point_mass(cls, x=0.0, mass: float = 1.0, d: int = 1) -> "Mu0":
        x = tuple(np.broadcast_to(np.asarray(x, float), (d,)).tolist())
        return cls("point", float(mass), (x,), (1.0,))

    @classmethod
    def from_config(cls, cfg: dict, d: int = 1) -> "Mu0":
        cfg = dict(cfg)
        kind = cfg.pop("type", "point")
        mass = float(cfg.pop("mass", 1.0))

        def vec(v):
            return tuple(np.broadcast_to(np.asarray(v, float), (d,)).tolist())

        if kind == "point":
            atoms = cfg.pop("atoms", [[0.0] * d])
            atoms = tuple(vec(a) for a in atoms)
            w = tuple(float(v) for v in cfg.pop("weights", [1.0] * len(atoms)))
            out = cls("point", mass, atoms, w)
        elif kind == "gaussian":
            out = cls("gaussian", mass, mean=vec(cfg.pop("mean", 0.0)), std=float(cfg.pop("std", 1.0)))
        elif kind == "uniform":
            out = cls("uniform", mass, low=vec(cfg.pop("low", 0.0)), high=vec(cfg.pop("high", 1.0)))
        else:
            raise ConfigError(f"unknown initial measure {kind!r}")
        if cfg:
            raise ConfigError(f"unexpected initial-measure keys {sorted(cfg)}")
        return out

    def to_config(self) -> dict:
        if self.kind == "point":
            return {"type": "point", "mass": self.mass, "atoms": [list(a) for a in self.atoms],
                    "weights": list(self.weights)}
        if self.kind == "gaussian":
            return {"type": "gaussian", "mass": self.mass, "mean": list(self.mean), "std": self.std}
        return {"type": "uniform", "mass": self.mass, "low": list(self.low), "high": list(self.high)}

    def sample(self, count: int, stream: Stream, tag: int = TAG_INIT) -> np.ndarray:
        """``count`` i.i.d. points from the normalised measure."""
        d = self.d
        if count == 0:
            return np.zeros((0, d))
        if self.kind == "point":
            atoms = np.asarray(self.atoms, float)
            if len(atoms) == 1:
                return np.repeat(atoms, count, axis=0)
            w = np.asarray(self.weights, float)
            cdf = np.cumsum(w / w.sum())
            u = stream.uniform(count, tag)
            return atoms[np.minimum(np.searchsorted(cdf, u, side="right"), len(atoms) - 1)]
        if self.kind == "gaussian":
            return np.asarray(self.mean)[None, :] + self.std * stream.normal((count, d), tag)
        lo, hi = np.asarray(self.low), np.asarray(self.high)
        return lo[None, :] + (hi - lo)[None, :] * stream.uniform((count, d), tag)


# ---------------------------------------------------------------- configuration and state

@dataclass(frozen=True)
class SimulationConfig:
    T: float
    dt: float
    theta: float = 2.0
    n: int = 10
    seed: int = 0
    snapshot_stride: int = 1  # 0 keeps only the initial and final clouds
    branching: str = "bernoulli"
    noise: str = "cells"
    engine: str = "python"
    record_events: bool = True
    lineage: bool = False
    mu0: Mu0 = field(default_factory=Mu0)

    @property
    def scale(self) -> float:
        return float(self.theta) ** int(self.n)

    @property
    def steps(self) -> int:
        if self.T == 0:
            return 0
        k = self.T / self.dt
        steps = int(round(k))
        if abs(k - steps) > 1e-9 * max(1.0, k):
            raise ConfigError("T must be an integer multiple of dt")
        return steps

    def validate(self, model: mdl.ModelCoefficients) -> None:
        if self.T < 0 or not self.dt > 0:
            raise ConfigError("need T >= 0 and dt > 0")
        if self.theta <= 1 or self.n < 0:
            raise ConfigError("need theta > 1 and n >= 0")
        if self.branching not in ("bernoulli", "exact"):
            raise ConfigError(f"unknown branching mode {self.branching!r}")
        if self.engine not in ("python", "numba"):
            raise ConfigError(f"unknown engine {self.engine!r}")
        if self.noise not in ("cells", "eigh"):
            raise ConfigError(f"unknown noise method {self.noise!r}")
        if self.engine == "numba" and self.noise != "cells":
            raise ConfigError("the compiled engine uses the cells noise")
        if self.branching == "bernoulli" and model.gamma * self.scale * self.dt > BERNOULLI_CAP * (1 + 1e-12):
            raise ConfigError(
                f"gamma theta^n dt = {model.gamma * self.scale * self.dt:.3g} exceeds {BERNOULLI_CAP}")
        if self.mu0.d != model.d:
            raise ConfigError("initial measure dimension does not match the model")
        self.steps

    def to_config(self) -> dict:
        out = {k: getattr(self, k) for k in ("T", "dt", "theta", "n", "seed", "snapshot_stride",
                                             "branching", "noise", "engine", "record_events")}
        out["mu0"] = self.mu0.to_config()
        return out

    @classmethod
    def from_config(cls, cfg: dict, d: int = 1) -> "SimulationConfig":
        cfg = dict(cfg)
        mu0 = Mu0.from_config(cfg.pop("mu0", {}), d)
        known = {f for f in cls.__dataclass_fields__} - {"mu0"}
        extra = set(cfg) - known
        if extra:
            raise ConfigError(f"unknown simulation keys {sorted(extra)}")
        return cls(mu0=mu0, **cfg)


@dataclass
class ParticleCloud:
    positions: np.ndarray  # (m, d)
    theta: float
    n: int
    time: float = 0.0
    lineage: Optional[list] = None

    @property
    def mass(self) -> float:
        return float(self.theta) ** (-int(self.n))

    @property
    def alive(self) -> int:
        return int(self.positions.shape[0])

    @property
    def total_mass(self) -> float:
        return self.alive * self.mass

    def pair(self, phi: TestFunction) -> float:
        """``<phi, mu>``."""
        if self.alive == 0:
            return 0.0
        return float(self.mass * np.sum(phi.value(self.positions)))


def init_cloud(mu0_spec: Mu0, theta: float, n: int, rng: Stream, lineage: bool = False) -> ParticleCloud:
    """``round(||mu_0|| theta^n)`` i.i.d. particles of mass ``theta^-n``."""
    if isinstance(mu0_spec, dict):
        mu0_spec = Mu0.from_config(mu0_spec)
    count = int(round(mu0_spec.mass * float(theta) ** int(n)))
    pos = mu0_spec.sample(count, rng.substream(0))
    labels = [str(i) for i in range(count)] if lineage else None
    return ParticleCloud(pos, theta, n, 0.0, labels)


# ---------------------------------------------------------------- branching draws

@nb.njit(cache=True)
def _offspring(u, cdf):
    k = 0
    while k < cdf.shape[0] - 1 and u >= cdf[k]:
        k += 1
    return k


@nb.njit(cache=True)
def branch_draw(k0, k1, rep, step, i, mode, rate, dt, p_branch, cdf):
    """``(Z, events)`` for slot ``i``: the particle is replaced by ``Z`` copies.

    mode 0: one Bernoulli(p_branch) event with an offspring draw.
    mode 1: the Galton-Watson tree over ``dt`` with per-individual rate ``rate``.
    mode 2: mode 1 for the binary law, drawn from the linear-fractional law of
    the critical birth-death process (``events`` is then reported as -1).
    """
    if mode == 2:
        # P(Z=0) = q, P(Z=k) = (1-q)^2 q^(k-1) with q = (rate dt / 2) / (1 + rate dt / 2)
        half = 0.5 * rate * dt
        q = half / (1.0 + half)
        u, v = uniform_pair(k0, k1, rep, step, np.uint64(TAG_EVENT), i)
        if u < q:
            return 0, -1
        if (u - q) / (1.0 - q) >= q:
            return 1, -1
        return 2 + int(math.floor(math.log(v) / math.log(q))), -1
    if mode == 0:
        u, _ = uniform_pair(k0, k1, rep, step, np.uint64(TAG_BRANCH), i)
        if u >= p_branch:
            return 1, 0
        v, _ = uniform_pair(k0, k1, rep, step, np.uint64(TAG_EVENT), i)
        return _offspring(v, cdf), 1
    pop = 1
    left = dt
    e = 0
    while pop > 0:
        tag = np.uint64(TAG_EVENT) | (np.uint64(e) << np.uint64(8))
        u, v = uniform_pair(k0, k1, rep, step, tag, i)
        wait = -math.log(u) / (rate * pop)
        if wait > left:
            break
        left -= wait
        pop += _offspring(v, cdf) - 1
        e += 1
        if e >= (1 << 24):
            raise ValueError("too many branching events in one step")
    return pop, e


def branch_mode(branching: str, offspring: mdl.OffspringLaw) -> int:
    if branching == "bernoulli":
        return 0
    probs = np.asarray(offspring.probs, float)
    if probs.shape == (3,) and np.allclose(probs, [0.5, 0.0, 0.5], rtol=0, atol=1e-15):
        return 2
    return 1


@nb.njit(cache=True)
def branch_all(k0, k1, rep, step, m, mode, rate, dt, p_branch, cdf, z_out, ev_out):
    for i in range(m):
        z_out[i], ev_out[i] = branch_draw(k0, k1, rep, step, i, mode, rate, dt, p_branch, cdf)


# ---------------------------------------------------------------- records

EVENT_DTYPE_FIELDS = ("time", "step", "slot", "offspring", "events")


@dataclass
class PathRecord:
    """Time-indexed output of one replicate.

    Series have one entry per grid time ``t_k = k dt`` (``k = 0..N``).  ``X``, ``U``
    and ``M`` are running sums (index ``k`` holds the value at ``t_k``); ``values``,
    ``generator`` and ``squares`` are ``<phi, mu>``, ``<G_1 phi, mu>`` and
    ``<phi^2, mu>`` evaluated at ``t_k``.
    """

    names: list
    times: np.ndarray
    dt: float
    mass: float
    values: np.ndarray
    generator: np.ndarray
    squares: np.ndarray
    X: np.ndarray
    U: np.ndarray
    M: np.ndarray
    alive: np.ndarray
    snapshot_steps: np.ndarray
    snapshots: list
    event_time: np.ndarray
    event_position: np.ndarray
    event_offspring: np.ndarray
    event_count: np.ndarray
    observables: list = field(default_factory=list)
    seed: int = 0
    replicate: int = 0
    config: Optional[SimulationConfig] = None
    lineage: Optional[list] = None
    model: Optional[mdl.ModelCoefficients] = None

    def index(self, key) -> int:
        name = key.name if isinstance(key, TestFunction) else key
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"observable {name!r} was not registered") from None

    def observable(self, key) -> TestFunction:
        return self.observables[self.index(key)]

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def total_mass(self) -> np.ndarray:
        return self.alive * self.mass

    def series(self, key) -> np.ndarray:
        return self.values[self.index(key)]

    def final(self, key) -> float:
        return float(self.values[self.index(key), -1])

    def generator_integral(self, key) -> np.ndarray:
        """Running left-point ``int_0^t <G_1 phi, mu_s> ds``."""
        g = self.generator[self.index(key), :-1]
        return np.concatenate([[0.0], np.cumsum(g) * self.dt])

    def square_integral(self, key) -> np.ndarray:
        q = self.squares[self.index(key), :-1]
        return np.concatenate([[0.0], np.cumsum(q) * self.dt])

    def residual(self, key, include_individual: bool = True, include_branching: bool = True) -> float:
        """``<phi, mu_T> - <phi, mu_0> - int <G_1 phi> - X_T - M_T [- U_T]``.

        ``U`` is the individual-noise martingale, which vanishes in the limit but is of
        the same order as the Euler error at finite ``theta^n``.
        """
        i = self.index(key)
        r = self.values[i, -1] - self.values[i, 0] - self.generator_integral(key)[-1] - self.X[i, -1]
        if include_branching:
            r -= self.M[i, -1]
        if include_individual:
            r -= self.U[i, -1]
        return float(r)

    def snapshot_times(self) -> np.ndarray:
        return self.snapshot_steps * self.dt


def occupation_integral(record: PathRecord, observable) -> float:
    """Trapezoidal ``int_0^T <phi, mu_s> ds`` from the recorded series."""
    y = record.series(observable)
    if len(y) < 2:
        return 0.0
    return float(record.dt * (y.sum() - 0.5 * (y[0] + y[-1])))


def left_riemann_occupation(record: PathRecord, observable) -> float:
    y = record.series(observable)
    return float(record.dt * y[:-1].sum())


# ---------------------------------------------------------------- python engine

@dataclass
class StepResult:
    value: np.ndarray  # left-point <phi, mu>
    generator: np.ndarray
    square: np.ndarray
    X: np.ndarray  # increments
    U: np.ndarray
    M: np.ndarray
    offspring: np.ndarray  # Z per pre-branch slot
    events: np.ndarray
    moved: np.ndarray  # positions after diffusion, before branching


def _effective_diffusion(model, x):
    return model.a(x) + mdl.rho(model, np.zeros(model.d))[None]


def step(cloud: ParticleCloud, model: mdl.ModelCoefficients, dt: float, rng: Stream,
         observables: Sequence[TestFunction], branching: str = "bernoulli",
         noise_method: str = "cells", step_index: Optional[int] = None):
    """One Euler step followed by branching at the moved positions.

    ``rng`` is the replicate stream; the step counter is ``step_index`` (default
    ``round(cloud.time / dt)``).  Returns ``(cloud', StepResult)``.
    """
    k = int(round(cloud.time / dt)) if step_index is None else int(step_index)
    sub = rng.substream(k + 1)  # counter 0 is used by the initial sampling
    x = cloud.positions
    m, d = x.shape
    mass = cloud.mass
    nobs = len(observables)
    val, gen, sq = np.zeros(nobs), np.zeros(nobs), np.zeros(nobs)
    dX, dU, dM = np.zeros(nobs), np.zeros(nobs), np.zeros(nobs)
    grads = []
    if m:
        sig = _effective_diffusion(model, x)
        for o, phi in enumerate(observables):
            v, g, h = phi.evaluate(x)
            val[o] = mass * v.sum()
            gen[o] = mass * 0.5 * np.einsum("npq,npq->", sig, h)
            sq[o] = mass * np.sum(v * v)
            grads.append(g)
        inc = noise.sample_step(model, x, dt, sub, method=noise_method)
        for o in range(nobs):
            dX[o] = mass * np.sum(grads[o] * inc.common)
            dU[o] = mass * np.sum(grads[o] * inc.individual)
        moved = x + inc.individual + inc.common
    else:
        moved = x.copy()
    z = np.ones(m, dtype=np.int64)
    ev = np.zeros(m, dtype=np.int64)
    if m and model.gamma > 0:
        rate = model.gamma * cloud.theta ** cloud.n
        k0, k1 = sub.key
        branch_all(k0, k1, np.uint64(sub.replicate), np.uint64(sub.step), m,
                   branch_mode(branching, model.offspring), rate, dt, -math.expm1(-rate * dt),
                   model.offspring.cdf, z, ev)
    changed = np.nonzero(z != 1)[0]
    if changed.size:
        for o, phi in enumerate(observables):
            dM[o] = mass * np.sum((z[changed] - 1) * phi.value(moved[changed]))
    new_pos = np.repeat(moved, z, axis=0)
    lineage = None
    if cloud.lineage is not None:
        lineage = []
        for lab, zi in zip(cloud.lineage, z):
            lineage.extend([lab] if zi == 1 else [f"{lab}⊕{j}" for j in range(zi)])
    if new_pos.shape[0] > MAX_PARTICLES:
        raise ConfigError("particle count exceeded the safety cap")
    new = ParticleCloud(new_pos, cloud.theta, cloud.n, (k + 1) * dt, lineage)
    return new, StepResult(val, gen, sq, dX, dU, dM, z, ev, moved)


def _evaluate_state(model, x, mass, observables):
    nobs = len(observables)
    val, gen, sq = np.zeros(nobs), np.zeros(nobs), np.zeros(nobs)
    if x.shape[0]:
        sig = _effective_diffusion(model, x)
        for o, phi in enumerate(observables):
            v, _, h = phi.evaluate(x)
            val[o] = mass * v.sum()
            gen[o] = mass * 0.5 * np.einsum("npq,npq->", sig, h)
            sq[o] = mass * np.sum(v * v)
    return val, gen, sq


def _simulate_python(config: SimulationConfig, model, observables, replicate: int) -> PathRecord:
    stream = Stream(config.seed, replicate)
    cloud = init_cloud(config.mu0, config.theta, config.n, stream, config.lineage)
    N = config.steps
    nobs = len(observables)
    vals = np.zeros((nobs, N + 1))
    gens = np.zeros((nobs, N + 1))
    sqs = np.zeros((nobs, N + 1))
    X = np.zeros((nobs, N + 1))
    U = np.zeros((nobs, N + 1))
    M = np.zeros((nobs, N + 1))
    alive = np.zeros(N + 1, dtype=np.int64)
    snaps, snap_steps = [cloud.positions.copy()], [0]
    ev_t, ev_x, ev_z, ev_n = [], [], [], []
    for k in range(N):
        alive[k] = cloud.alive
        cloud, res = step(cloud, model, config.dt, stream, observables, config.branching,
                          config.noise, step_index=k)
        vals[:, k], gens[:, k], sqs[:, k] = res.value, res.generator, res.square
        X[:, k + 1] = X[:, k] + res.X
        U[:, k + 1] = U[:, k] + res.U
        M[:, k + 1] = M[:, k] + res.M
        if config.record_events:
            idx = np.nonzero(res.offspring != 1)[0]
            ev_t.extend([(k + 1) * config.dt] * idx.size)
            ev_x.extend(res.moved[idx])
            ev_z.extend(res.offspring[idx])
            ev_n.extend(res.events[idx])
        if config.snapshot_stride and ((k + 1) % config.snapshot_stride == 0) or k + 1 == N:
            snaps.append(cloud.positions.copy())
            snap_steps.append(k + 1)
    alive[N] = cloud.alive
    vals[:, N], gens[:, N], sqs[:, N] = _evaluate_state(model, cloud.positions, cloud.mass, observables)
    d = model.d
    return PathRecord(
        names=[o.name for o in observables], times=np.arange(N + 1) * config.dt, dt=config.dt,
        mass=cloud.mass, values=vals, generator=gens, squares=sqs, X=X, U=U, M=M, alive=alive,
        snapshot_steps=np.asarray(snap_steps), snapshots=snaps,
        event_time=np.asarray(ev_t, float), event_position=np.asarray(ev_x, float).reshape(-1, d),
        event_offspring=np.asarray(ev_z, np.int64), event_count=np.asarray(ev_n, np.int64),
        observables=list(observables), seed=config.seed, replicate=replicate, config=config,
        lineage=cloud.lineage)


# ---------------------------------------------------------------- compiled engine

@nb.njit(cache=True)
def _grow(a, need):
    if need <= a.shape[0]:
        return a
    cap = max(need, 2 * a.shape[0])
    b = np.empty(cap, dtype=a.dtype)
    b[:a.shape[0]] = a
    return b


@nb.njit(cache=True)
def _grow2(a, need):
    if need <= a.shape[0]:
        return a
    cap = max(need, 2 * a.shape[0])
    b = np.empty((cap, a.shape[1]), dtype=a.dtype)
    b[:a.shape[0]] = a
    return b


@nb.njit(cache=True)
def _state_sums(pos, m, mass, sig, kinds, params, vals, gens, sqs, col, grads, store_grads):
    d = pos.shape[1]
    nobs = kinds.shape[0]
    g = np.empty(d)
    h = np.empty((d, d))
    for o in range(nobs):
        sv = 0.0
        sg = 0.0
        sq = 0.0
        for i in range(m):
            v = tf_eval(kinds[o], params[o], d, pos[i], g, h)
            sv += v
            sq += v * v
            tr = 0.0
            for p in range(d):
                for q in range(d):
                    tr += sig[p, q] * h[p, q]
            sg += 0.5 * tr
            if store_grads:
                for p in range(d):
                    grads[o, i, p] = g[p]
        vals[o, col] = mass * sv
        gens[o, col] = mass * sg
        sqs[o, col] = mass * sq


@nb.njit(cache=True, nogil=True)
def _simulate_compiled(pos0, mass, rate, dt, nsteps, cmat, sig, amp, s, delta, reach, bits,
                       common_on, kinds, params, k0, k1, rep, mode, p_branch, cdf, stride,
                       record_events, max_particles):
    d = pos0.shape[1]
    nobs = kinds.shape[0]
    vals = np.zeros((nobs, nsteps + 1))
    gens = np.zeros((nobs, nsteps + 1))
    sqs = np.zeros((nobs, nsteps + 1))
    X = np.zeros((nobs, nsteps + 1))
    U = np.zeros((nobs, nsteps + 1))
    M = np.zeros((nobs, nsteps + 1))
    alive = np.zeros(nsteps + 1, dtype=np.int64)
    m = pos0.shape[0]
    pos = pos0.copy()
    snap = pos0.copy()
    n_snap_rows = m
    snap_off = np.zeros(nsteps + 2, dtype=np.int64)
    snap_steps = np.zeros(nsteps + 2, dtype=np.int64)
    snap_off[1] = m
    n_snaps = 1
    ev_t = np.empty(16)
    ev_x = np.empty((16, d))
    ev_z = np.empty(16, dtype=np.int64)
    ev_n = np.empty(16, dtype=np.int64)
    n_ev = 0
    sqdt = math.sqrt(dt)
    cscale = math.sqrt(dt * delta ** d)
    g = np.empty(d)
    h = np.empty((d, d))
    zvec = np.empty(d)
    for k in range(nsteps):
        step = np.uint64(k + 1)
        alive[k] = m
        grads = np.empty((nobs, m, d))
        _state_sums(pos, m, mass, sig, kinds, params, vals, gens, sqs, k, grads, True)
        field = np.zeros(m)
        if common_on and m > 0:
            noise.cells_field(pos[:m], s, delta, reach, bits, k0, k1, rep, step, field)
        dX = np.zeros(nobs)
        dU = np.zeros(nobs)
        for i in range(m):
            for p in range(d):
                zvec[p] = normal_at(k0, k1, rep, step, np.uint64(TAG_INDIVIDUAL), i * d + p)
            for p in range(d):
                ind = 0.0
                for r in range(d):
                    ind += cmat[p, r] * zvec[r]
                ind *= sqdt
                com = cscale * field[i] * amp[p]
                for o in range(nobs):
                    dX[o] += grads[o, i, p] * com
                    dU[o] += grads[o, i, p] * ind
                pos[i, p] += ind + com
        for o in range(nobs):
            X[o, k + 1] = X[o, k] + mass * dX[o]
            U[o, k + 1] = U[o, k] + mass * dU[o]
        # branching at the moved positions
        zs = np.ones(m, dtype=np.int64)
        evs = np.zeros(m, dtype=np.int64)
        total = 0
        if rate > 0.0:
            for i in range(m):
                zs[i], evs[i] = branch_draw(k0, k1, rep, step, i, mode, rate, dt, p_branch, cdf)
                total += zs[i]
        else:
            total = m
        if total > max_particles:
            raise ValueError("particle count exceeded the safety cap")
        dM = np.zeros(nobs)
        new = np.empty((total, d))
        j = 0
        for i in range(m):
            zi = zs[i]
            if zi != 1:
                for o in range(nobs):
                    dM[o] += (zi - 1) * tf_eval(kinds[o], params[o], d, pos[i], g, h)
                if record_events:
                    ev_t = _grow(ev_t, n_ev + 1)
                    ev_x = _grow2(ev_x, n_ev + 1)
                    ev_z = _grow(ev_z, n_ev + 1)
                    ev_n = _grow(ev_n, n_ev + 1)
                    ev_t[n_ev] = (k + 1) * dt
                    for p in range(d):
                        ev_x[n_ev, p] = pos[i, p]
                    ev_z[n_ev] = zi
                    ev_n[n_ev] = evs[i]
                    n_ev += 1
            for _ in range(zi):
                for p in range(d):
                    new[j, p] = pos[i, p]
                j += 1
        for o in range(nobs):
            M[o, k + 1] = M[o, k] + mass * dM[o]
        pos = new
        m = total
        if (stride > 0 and (k + 1) % stride == 0) or k + 1 == nsteps:
            snap = _grow2(snap, n_snap_rows + m)
            for i in range(m):
                for p in range(d):
                    snap[n_snap_rows + i, p] = pos[i, p]
            n_snap_rows += m
            snap_steps[n_snaps] = k + 1
            n_snaps += 1
            snap_off[n_snaps] = n_snap_rows
    alive[nsteps] = m
    dummy = np.empty((nobs, 0, d))
    _state_sums(pos, m, mass, sig, kinds, params, vals, gens, sqs, nsteps, dummy, False)
    return (vals, gens, sqs, X, U, M, alive, snap[:n_snap_rows], snap_off[:n_snaps + 1],
            snap_steps[:n_snaps], ev_t[:n_ev], ev_x[:n_ev], ev_z[:n_ev], ev_n[:n_ev])


def _compiled_inputs(model, observables):
    if model.c_family != "constant_c":
        raise ConfigError("the compiled engine supports constant_c models")
    for o in observables:
        if not o.compiled:
            raise ConfigError(f"observable {o.name!r} has no compiled evaluator")
    plan = noise.cell_plan(model)
    cmat = np.asarray(model.c_params["matrix"], float).reshape(model.d, model.d)
    sig = cmat @ cmat.T + mdl.rho(model, np.zeros(model.d))
    kinds = np.array([o.kind for o in observables], dtype=np.int64)
    params = np.array([o.param_array for o in observables], dtype=float).reshape(-1, NPARAM)
    return plan, cmat, sig, kinds, params


def _simulate_numba(config: SimulationConfig, model, observables, replicate: int, inputs=None) -> PathRecord:
    plan, cmat, sig, kinds, params = inputs or _compiled_inputs(model, observables)
    stream = Stream(config.seed, replicate)
    cloud = init_cloud(config.mu0, config.theta, config.n, stream)
    k0, k1 = stream.key
    rate = model.gamma * config.scale
    out = _simulate_compiled(
        np.ascontiguousarray(cloud.positions, dtype=float), cloud.mass, rate, config.dt, config.steps,
        cmat, sig, plan.amplitude, plan.scale, plan.delta, plan.radius, plan.bits, not plan.zero,
        kinds, params, k0, k1, np.uint64(replicate), branch_mode(config.branching, model.offspring),
        -math.expm1(-rate * config.dt), model.offspring.cdf, int(config.snapshot_stride),
        bool(config.record_events), MAX_PARTICLES)
    vals, gens, sqs, X, U, M, alive, snap, off, ssteps, ev_t, ev_x, ev_z, ev_n = out
    snaps = [snap[off[i]:off[i + 1]].copy() for i in range(len(off) - 1)]
    return PathRecord(
        names=[o.name for o in observables], times=np.arange(config.steps + 1) * config.dt,
        dt=config.dt, mass=cloud.mass, values=vals, generator=gens, squares=sqs, X=X, U=U, M=M,
        alive=alive, snapshot_steps=ssteps, snapshots=snaps, event_time=ev_t, event_position=ev_x,
        event_offspring=ev_z, event_count=ev_n, observables=list(observables), seed=config.seed,
        replicate=replicate, config=config)


def simulate(config: SimulationConfig, model: mdl.ModelCoefficients,
             observables: Sequence[TestFunction], replicate: int = 0) -> PathRecord:
    """Run one replicate to ``T`` and return its :class:`PathRecord`."""
    config.validate(model)
    names = [o.name for o in observables]
    if len(set(names)) != len(names):
        raise ConfigError("observable names must be unique")
    for o in observables:
        if o.d != model.d:
            raise ConfigError(f"observable {o.name!r} has the wrong dimension")
    mdl.check_ellipticity(model, np.zeros((1, model.d)))
    if config.engine == "numba":
        rec = _simulate_numba(config, model, observables, replicate)
    else:
        rec = _simulate_python(config, model, observables, replicate)
    rec.model = model
    return rec


# ---------------------------------------------------------------- ensembles

@dataclass
class ReplicateSummary:
    initial: np.ndarray  # <phi, mu_0> per observable
    final: np.ndarray
    X: np.ndarray
    U: np.ndarray
    M: np.ndarray
    generator_integral: np.ndarray
    square_integral: np.ndarray
    occupation: np.ndarray
    total_mass: np.ndarray  # over the step grid

    @property
    def residual(self) -> np.ndarray:
        return self.final - self.initial - self.generator_integral - self.X - self.M - self.U


def summarize(record: PathRecord) -> ReplicateSummary:
    names = record.names
    return ReplicateSummary(
        initial=record.values[:, 0].copy(), final=record.values[:, -1].copy(),
        X=record.X[:, -1].copy(), U=record.U[:, -1].copy(), M=record.M[:, -1].copy(),
        generator_integral=np.array([record.generator_integral(n)[-1] for n in names]),
        square_integral=np.array([record.square_integral(n)[-1] for n in names]),
        occupation=np.array([occupation_integral(record, n) for n in names]),
        total_mass=record.total_mass.astype(float))


@dataclass
class Ensemble:
    """Per-replicate summaries stacked along axis 0 in replicate order."""

    names: list
    times: np.ndarray
    fields: dict
    seed: int
    replicates: int

    def __getattr__(self, item):
        try:
            return self.__dict__["fields"][item]
        except KeyError:
            raise AttributeError(item) from None

    def column(self, field_name: str, key) -> np.ndarray:
        return self.fields[field_name][:, self.names.index(key.name if isinstance(key, TestFunction) else key)]


def run_ensemble(config: SimulationConfig, model: mdl.ModelCoefficients,
                 observables: Sequence[TestFunction], reps: int, workers: int = 1,
                 reduce: Callable[[PathRecord], object] = summarize, first_replicate: int = 0) -> Ensemble:
    """``reps`` independent replicates (replicate ids ``first_replicate + r``).

    Each replicate owns its counter-based stream, so the output does not depend
    on ``workers``; summaries are stacked in replicate order.
    """
    config.validate(model)
    cfg = replace(config, record_events=False, snapshot_stride=0) if reduce is summarize else config
    inputs = _compiled_inputs(model, observables) if cfg.engine == "numba" else None
    mdl.check_ellipticity(model, np.zeros((1, model.d)))

    def one(r):
        if cfg.engine == "numba":
            rec = _simulate_numba(cfg, model, observables, first_replicate + r, inputs)
        else:
            rec = _simulate_python(cfg, model, observables, first_replicate + r)
        rec.model = model
        return reduce(rec)

    ids = range(reps)
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, ids))
    else:
        results = [one(r) for r in ids]
    fields_ = {}
    if results and hasattr(results[0], "__dataclass_fields__"):
        for name in results[0].__dataclass_fields__:
            fields_[name] = np.stack([getattr(res, name) for res in results])
    elif results and isinstance(results[0], dict):
        for name in results[0]:
            fields_[name] = np.stack([np.asarray(res[name]) for res in results])
    else:
        fields_["value"] = np.asarray(results)
    return Ensemble([o.name for o in observables], np.arange(cfg.steps + 1) * cfg.dt, fields_,
                    config.seed, reps)


def mean_and_se(x: np.ndarray, axis: int = 0):
    """Sample mean and standard error with a fixed-order reduction."""
    x = np.asarray(x, dtype=float)
    n = x.shape[axis]
    mean = np.sum(x, axis=axis) / n
    var = np.sum((x - np.expand_dims(mean, axis)) ** 2, axis=axis) / max(n - 1, 1)
    return mean, np.sqrt(var / n)
