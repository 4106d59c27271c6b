"""Command-line entry point: ``sdsm simulate | dual | green | localtime | check``.

Every run writes into its output directory a ``manifest.json`` holding the
resolved configuration, the seeds and a build identifier, so the run can be
replayed exactly.  Series go to RFC-4180 CSV; particle clouds go to a small
binary container (see :func:`write_snapshots`).

Exit status: 0 success, 1 failed checks, 2 usage error, 3 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import struct
import subprocess
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import green
from . import localtime as lt
from . import model as mdl
from . import testfunctions as tfm
from . import validate
from .dual import dual_moment
from .particles import ConfigError, Mu0, SimulationConfig, simulate
from .rng import Stream

OUT_ENV = "SDSM_OUT_ROOT"
SNAPSHOT_MAGIC = b"SDSMSNAP"
SNAPSHOT_VERSION = 1

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3


class ConfigurationError(Exception):
    pass


# ---------------------------------------------------------------- persistence

def build_id() -> str:
    """``git describe``-style identifier of the installed source, else the version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_snapshots(path: Path, times, clouds, d: int) -> None:
    """Magic, version byte, ``d`` and count (uint32 LE), then per cloud
    ``time`` (f64 LE), particle count (uint64 LE) and the ``(m, d)`` positions (f64 LE)."""
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<B", SNAPSHOT_VERSION))
        fh.write(struct.pack("<II", d, len(clouds)))
        for t, c in zip(times, clouds):
            c = np.ascontiguousarray(np.asarray(c, dtype="<f8").reshape(-1, d))
            fh.write(struct.pack("<dQ", float(t), c.shape[0]))
            fh.write(c.tobytes())


def read_snapshots(path) -> tuple[np.ndarray, list]:
    data = Path(path).read_bytes()
    if data[:len(SNAPSHOT_MAGIC)] != SNAPSHOT_MAGIC:
        raise ValueError("not a snapshot file")
    pos = len(SNAPSHOT_MAGIC)
    (version,) = struct.unpack_from("<B", data, pos)
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    pos += 1
    d, count = struct.unpack_from("<II", data, pos)
    pos += 8
    times, clouds = [], []
    for _ in range(count):
        t, m = struct.unpack_from("<dQ", data, pos)
        pos += 16
        arr = np.frombuffer(data, dtype="<f8", count=m * d, offset=pos).reshape(m, d).astype(float)
        pos += 8 * m * d
        times.append(t)
        clouds.append(arr)
    return np.asarray(times), clouds


# ---------------------------------------------------------------- configuration

def load_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"configuration file not found: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{p}: invalid JSON ({exc})") from None


def resolve_model(ref, base: Path):
    """``"reference"``, an inline model dict, or a path (relative to the config file)."""
    if ref is None or ref == "reference":
        return mdl.reference_model(), "reference"
    if isinstance(ref, str):
        p = Path(ref)
        if not p.is_absolute():
            p = base / p
        cfg = load_json(p)
        return mdl.model_from_config(cfg), cfg
    return mdl.model_from_config(ref), ref


def _seed(args, cfg: dict) -> int:
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None:
        raise ConfigurationError("a seed is required (--seed or 'seed' in the config)")
    return int(seed)


def _outdir(args, name: str, seed: int, cfg: dict) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        root = Path(os.environ.get(OUT_ENV, "sdsm-out"))
        out = root / cfg.get("output", f"{name}-{seed}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _workers(args) -> int:
    return args.workers if args.workers else (os.cpu_count() or 1)


def _observables(cfgs, d: int):
    return [tfm.from_config(c, d) for c in cfgs]


def _sim_config(cfg: dict, d: int, seed: int) -> SimulationConfig:
    sim = dict(cfg.get("simulation", {}))
    sim["seed"] = seed
    sim.setdefault("engine", "numba")
    return SimulationConfig.from_config(sim, d)


def _manifest(command: str, cfg: dict, seed: int, **extra) -> dict:
    out = {"command": command, "build": build_id(), "seed": seed, "config": cfg}
    out.update(extra)
    return out


# ---------------------------------------------------------------- subcommands

def cmd_simulate(args) -> int:
    cfg = load_json(args.config)
    base = Path(args.config).resolve().parent
    model, model_ref = resolve_model(cfg.get("model"), base)
    seed = _seed(args, cfg)
    sim = _sim_config(cfg, model.d, seed)
    sim.validate(model)
    obs_cfg = cfg.get("observables", [{"family": "constant", "name": "one"}])
    obs = _observables(obs_cfg, model.d)
    reps = int(cfg.get("replicates", 1))
    out = _outdir(args, "simulate", seed, cfg)
    rows, ev_rows = [], []
    for r in range(reps):
        rec = simulate(sim, model, obs, replicate=r)
        for k, t in enumerate(rec.times):
            for i, name in enumerate(rec.names):
                rows.append((r, k, t, name, rec.values[i, k], rec.generator[i, k], rec.X[i, k],
                             rec.M[i, k], rec.U[i, k], rec.total_mass[k]))
        if sim.snapshot_stride:
            write_snapshots(out / f"snapshots_r{r}.bin", rec.snapshot_times(), rec.snapshots, model.d)
        for j in range(len(rec.event_time)):
            ev_rows.append((r, rec.event_time[j], *rec.event_position[j], rec.event_offspring[j],
                            rec.event_count[j]))
    write_csv(out / "series.csv", ["replicate", "step", "time", "observable", "value", "generator",
                                   "X", "M", "U", "total_mass"], rows)
    if sim.record_events:
        pos_cols = [f"x{p}" for p in range(model.d)]
        write_csv(out / "events.csv", ["replicate", "time", *pos_cols, "offspring", "events"], ev_rows)
    resolved = {"model": model.to_config(), "model_ref": model_ref, "simulation": sim.to_config(),
                "observables": obs_cfg, "replicates": reps, "seed": seed}
    write_json(out / "manifest.json", _manifest("simulate", resolved, seed,
                                                seeds={"base": seed, "replicates": list(range(reps))}))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_dual(args) -> int:
    cfg = load_json(args.config)
    model, model_ref = resolve_model(cfg.get("model"), Path(args.config).resolve().parent)
    seed = _seed(args, cfg)
    mu0 = Mu0.from_config(cfg.get("mu0", {"type": "point"}), model.d)
    f = tfm.from_config(cfg.get("function", {"family": "constant"}), model.d)
    ms = cfg.get("m", [1, 2])
    ms = [ms] if isinstance(ms, int) else ms
    t = float(cfg.get("t", 0.5))
    reps = int(cfg.get("replicates", 1000))
    dt = float(cfg.get("dt", 0.01))
    out = _outdir(args, "dual", seed, cfg)
    rows = []
    for i, m in enumerate(ms):
        est = dual_moment(f, int(m), mu0, t, model, reps, Stream(seed + i), dt=dt)
        rows.append((m, t, f.name, est.estimate, est.se, est.reps, est.rejected, seed + i))
    write_csv(out / "dual.csv", ["m", "t", "function", "estimate", "se", "replicates", "rejected", "seed"], rows)
    resolved = {"model": model.to_config(), "model_ref": model_ref, "mu0": mu0.to_config(),
                "function": f.describe(), "m": ms, "t": t, "replicates": reps, "dt": dt}
    write_json(out / "manifest.json", _manifest("dual", resolved, seed,
                                                seeds={"per_m": [seed + i for i in range(len(ms))]}))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_green(args) -> int:
    cfg = load_json(args.config)
    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
    lam = float(cfg.get("lam", 1.0))
    eps = float(cfg.get("eps", 0.1))
    s2 = float(cfg.get("sigma2", 2.0))
    d = int(cfg.get("d", 1))
    g = cfg.get("grid", {})
    r = np.linspace(float(g.get("start", 0.05)), float(g.get("stop", 4.0)), int(g.get("num", 80)))
    pts = np.zeros((r.size, d))
    pts[:, 0] = r
    out = _outdir(args, "green", seed, cfg)
    spec = green.KernelSpec(lam, eps, s2, d)
    q = np.atleast_1d(green.q_lambda(spec.with_(eps=0.0), pts))
    qe = np.atleast_1d(green.q_lambda_eps(spec, pts))
    res = [green.resolvent_identity_residual(spec, pts[i:i + 1]) for i in range(r.size)]
    write_csv(out / "kernel.csv", ["r", "Q", "Q_eps", "resolvent_residual"], zip(r, q, qe, res))
    norms = []
    for dd in (1, 2, 3, 4):
        for which, p in (("Q", 1), ("Q", 2), ("dQ", 2)):
            e = green.norm_entry(green.KernelSpec(lam, 0.0, s2, dd), which, p)
            norms.append((dd, e.quantity, e.value, e.finite_claimed, e.divergent))
    write_csv(out / "norms.csv", ["d", "quantity", "value", "finite_claimed", "divergent"], norms)
    chis = []
    for dd in (1, 2, 3, 4):
        c = green.chi_bound_check(dd, float(cfg.get("t", 1.0)), lam)
        chis.append((dd, c.value, c.bound, c.passed, c.divergent))
    write_csv(out / "chi.csv", ["d", "chi", "bound", "passed", "divergent"], chis)
    resolved = {"lam": lam, "eps": eps, "sigma2": s2, "d": d, "t": float(cfg.get("t", 1.0)),
                "grid": {"start": float(r[0]), "stop": float(r[-1]), "num": int(r.size)}}
    write_json(out / "manifest.json", _manifest("green", resolved, seed))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_localtime(args) -> int:
    cfg = load_json(args.config)
    model, model_ref = resolve_model(cfg.get("model"), Path(args.config).resolve().parent)
    seed = _seed(args, cfg)
    sim = _sim_config(cfg, model.d, seed)
    sim.validate(model)
    xs = [float(v) for v in cfg.get("x", [0.0])]
    epss = [float(v) for v in cfg.get("eps", [0.05])]
    lam = float(cfg.get("lam", 1.0))
    s2 = model.effective_sigma2()
    obs = []
    for x in xs:
        for e in epss:
            obs += [tfm.resolvent_kernel(x, lam, e, s2, model.d), tfm.mollifier(x, e, s2, model.d)]
    reps = int(cfg.get("replicates", 1))
    out = _outdir(args, "localtime", seed, cfg)
    rows = []
    for r in range(reps):
        rec = simulate(sim, model, obs, replicate=r)
        for x in xs:
            for e in epss:
                est = lt.tanaka_rhs(rec, x, e, lam)
                row = est.as_row()
                rows.append((r, row["x"], e, lam, row["Lambda"], row["initial"], row["terminal"],
                             row["lambda_integral"], row["X"], row["M"], row["U"], row["residual"]))
    write_csv(out / "localtime.csv", ["replicate", "x", "eps", "lambda", "Lambda", "initial", "terminal",
                                      "lambda_integral", "X", "M", "U", "residual"], rows)
    resolved = {"model": model.to_config(), "model_ref": model_ref, "simulation": sim.to_config(),
                "x": xs, "eps": epss, "lam": lam, "replicates": reps}
    write_json(out / "manifest.json", _manifest("localtime", resolved, seed,
                                                seeds={"base": seed, "replicates": list(range(reps))}))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_check(args) -> int:
    if args.manifest == "reference":
        manifest = validate.reference_manifest()
    else:
        manifest = load_json(args.manifest)
    if args.seed is not None:
        manifest = dict(manifest, seed=args.seed)
    seed = int(manifest.get("seed", 0))
    out = _outdir(args, "check", seed, manifest)

    def progress(cid):
        print(f"running {cid}", file=sys.stderr, flush=True)

    reports = validate.run_suite(manifest, workers=_workers(args), progress=progress)
    (out / "report.json").write_text(validate.reports_to_json(reports) + "\n", encoding="utf-8")
    table = validate.format_table(reports)
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    write_json(out / "manifest.json", _manifest("check", manifest, seed))
    print(table)
    ok = validate.suite_passed(reports)
    print("all checks passed" if ok else "some checks FAILED")
    return EXIT_OK if ok else EXIT_CHECK


COMMANDS = {"simulate": cmd_simulate, "dual": cmd_dual, "green": cmd_green,
            "localtime": cmd_localtime, "check": cmd_check}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdsm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "dual", "green", "localtime"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        _common(p)
    p = sub.add_parser("check")
    p.add_argument("--manifest", required=True, help="JSON check manifest, or 'reference'")
    _common(p)
    return parser


def _common(p):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None, help="replicate threads (default: all cores)")
    p.add_argument("--out", default=None, help=f"output directory (default: ${OUT_ENV} or ./sdsm-out)")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    if args.workers is not None and args.workers < 1:
        print("error: --workers must be positive", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, ConfigError, mdl.ModelError, KeyError, TypeError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"configuration error: {msg}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
