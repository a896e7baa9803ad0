"""Command-line interface: ``tdkslearn <command> [options]``.

Every command takes ``--preset``, ``--config FILE`` and repeated
``--set key=value`` overrides (dotted keys, e.g. ``functional.optim.max_iter=50``).
Outputs go under ``workdir``.  Set ``TDKSLEARN_NUM_THREADS`` to cap numba
threads and ``TDKSLEARN_DISABLE_NUMBA=1`` to force the numpy kernels.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, gradcheck, io, kernels
from .grid import GridSpec, build_grid
from .mlp import Mlp, ModelKind, SELU_ALPHA, SELU_LAMBDA
from .tdks import build_cache
from .tdse2d import (KsInitialPair, PacketSpec, TwoBodyWavefunction, hydrogen_ground_state,
                     initial_wavefunction, ks_initial_pair, propagate_tdse)
from .train import (FunctionalProblem, PointwiseProblem, TrajectoryData, rollout_and_score,
                    train_functional, train_pointwise)

log = logging.getLogger("tdkslearn")


# ---------------------------------------------------------------- helpers

def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _dump_json(path, obj) -> None:
    io.atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _workdir(cfg) -> Path:
    return Path(cfg.workdir)


def _base_meta(cfg) -> dict:
    return {"config_hash": cfg.hash, "data_hash": cfg.data_hash, "preset": cfg.preset,
            "kernel": "numba" if kernels.USE_NUMBA else "numpy"}


def _rect_validate(dens: np.ndarray, grid: GridSpec, tol: float = 1e-6) -> None:
    """Row integrals with the rectangle rule, the sum the TDKS propagator conserves."""
    integrals = grid.dx * dens.sum(axis=1)
    bad = np.flatnonzero(np.abs(integrals - 2.0) > tol)
    if bad.size:
        raise ValueError(f"predicted density row {bad[0]} integrates to "
                         f"{integrals[bad[0]]:.10f}, expected 2 +- {tol:g}")


def load_reference(cfg, p: float, time_stride: int, frames: int):
    """Reference densities on the TDKS grid at ``time_stride``, first ``frames`` rows."""
    path = io.reference_path(cfg.workdir, p)
    c = io.load(path, "reference")
    io.check_data_hash(c.meta, cfg, path)
    coarse = cfg.tdse.space_grid(1, time_stride)
    io.check_grid(c.meta, coarse, path)
    step = time_stride // cfg.tdse.save_stride
    dens = c["density"][::step]
    if dens.shape[0] < frames:
        raise io.ConfigError(f"{path} holds {dens.shape[0]} frames at stride {time_stride}; "
                             f"{frames} are needed")
    return dens[:frames]


def load_pair(cfg, p: float, time_stride: int) -> KsInitialPair:
    path = io.ks_pair_path(cfg.workdir, p, time_stride)
    c = io.load(path, "ks_pair")
    io.check_data_hash(c.meta, cfg, path)
    return KsInitialPair(c["phi0"], c["phi1"], float(c.meta["dt"]))


class _TraceWriter:
    """Streams one line per iteration and writes periodic checkpoints."""

    def __init__(self, path, every, save_fn, append=False):
        self.fh = open(path, "a" if append else "w")
        self.every = every
        self.save_fn = save_fn

    def __call__(self, it, x, f, g, rec):
        self.fh.write(rec.line() + "\n")
        self.fh.flush()
        if self.every and it % self.every == 0:
            self.save_fn(x)
        return False

    def close(self):
        self.fh.close()


# ---------------------------------------------------------------- commands

def cmd_generate_reference(cfg, args) -> int:
    t = cfg.tdse
    momenta = args.p if args.p else t.momenta
    fine = t.fine_grid()
    phi_h, e_h = hydrogen_ground_state(fine)
    strides = sorted({cfg.pointwise.time_stride, cfg.functional.time_stride})
    for p in momenta:
        packet = PacketSpec(t.packet_center, p, t.packet_sigma)
        psi0 = initial_wavefunction(fine, packet, phi_h)
        run = propagate_tdse(psi0, t.steps, t.save_stride, snapshot_steps=[0, *strides])
        io.validate_density_rows(run.densities, fine)
        dens = run.densities[:, ::t.space_stride]
        saved = cfg.tdse.space_grid(t.steps // t.save_stride, t.save_stride)
        meta = {**_base_meta(cfg), "grid": saved.to_dict(), "p": p,
                "packet": {"center": t.packet_center, "sigma": t.packet_sigma},
                "save_stride": t.save_stride, "space_stride": t.space_stride,
                "fine_grid": fine.to_dict(), "hydrogen_energy": e_h,
                "max_norm_drift": run.max_norm_drift}
        path = io.reference_path(cfg.workdir, p)
        io.save(path, io.Container("reference", {"density": dens}, meta))
        snaps = {f"psi_{k}": run.snapshots[k].psi for k in sorted(run.snapshots)}
        io.save(io.snapshot_path(cfg.workdir, p),
                io.Container("snapshots", snaps, {**meta, "steps": sorted(run.snapshots)}))
        print(f"p={p:+.2f}: {dens.shape[0]} frames -> {path} "
              f"(max norm drift {run.max_norm_drift:.2e})")
        _invert(cfg, p)
    return 0


def _invert(cfg, p) -> None:
    spath = io.snapshot_path(cfg.workdir, p)
    c = io.load(spath, "snapshots")
    io.check_data_hash(c.meta, cfg, spath)
    fine = GridSpec.from_dict(c.meta["fine_grid"])
    psi0 = TwoBodyWavefunction(c["psi_0"], fine)
    for stride in sorted({cfg.pointwise.time_stride, cfg.functional.time_stride}):
        key = f"psi_{stride}"
        if key not in c.arrays:
            raise io.ConfigError(f"{spath} has no snapshot at step {stride}; regenerate")
        dt = cfg.tdse.dt * stride
        pair = ks_initial_pair(psi0, TwoBodyWavefunction(c[key], fine), dt,
                               cfg.tdse.space_stride)
        meta = {**_base_meta(cfg), "p": p, "dt": dt, "time_stride": stride,
                "grid": cfg.tdse.space_grid(1, stride).to_dict()}
        path = io.ks_pair_path(cfg.workdir, p, stride)
        io.save(path, io.Container("ks_pair", {"phi0": pair.phi0, "phi1": pair.phi1}, meta))
        print(f"p={p:+.2f}: initial Kohn-Sham pair (stride {stride}) -> {path}")


def cmd_invert_initial(cfg, args) -> int:
    for p in (args.p if args.p else cfg.tdse.momenta):
        _invert(cfg, p)
    return 0


def _pointwise_manifest(cfg, grid, p):
    return {**_base_meta(cfg), "model": "pointwise", "grid": grid.to_dict(), "p": p,
            "mu": cfg.pointwise.mu, "time_stride": cfg.pointwise.time_stride,
            "shape": [grid.K + 1, grid.J + 1]}


def cmd_train_pointwise(cfg, args) -> int:
    pc = cfg.pointwise
    grid = cfg.tdse.space_grid(pc.K, pc.time_stride)
    ref = load_reference(cfg, pc.p, pc.time_stride, pc.K + 1)
    pair = load_pair(cfg, pc.p, pc.time_stride)
    problem = PointwiseProblem(grid, ref, pair.phi0, pc.mu)
    out = _workdir(cfg)
    ckpt = out / "pointwise.ckpt"
    manifest = _pointwise_manifest(cfg, grid, pc.p)
    x0, memory = None, None
    if args.resume:
        c = io.load(args.resume, "checkpoint")
        if c.meta.get("model") != "pointwise" or c.meta.get("shape") != manifest["shape"]:
            raise io.ConfigError(f"{args.resume} is not a compatible pointwise checkpoint")
        x0, memory = c["x"], io.memory_from_checkpoint(c)
    from .optim import LbfgsMemory
    memory = memory or LbfgsMemory()
    writer = _TraceWriter(out / "pointwise.trace", cfg.checkpoint_every,
                          lambda x: io.save(ckpt, io.checkpoint_container(x, manifest, memory)),
                          append=bool(args.resume))
    try:
        res = train_pointwise(problem, pc.optim.options(), x0=x0, callback=writer,
                              memory=memory)
    finally:
        writer.close()
    io.save(ckpt, io.checkpoint_container(res.x, {**manifest, "reason": res.trace.reason},
                                          memory))
    cache = build_cache(grid)
    data = [TrajectoryData(f"p={pc.p:+.2f}", pair, ref)]
    report, trajs = rollout_and_score(res.x, data, grid, cache=cache,
                                      train_labels=[data[0].label])
    traj = trajs[data[0].label]
    _rect_validate(traj.densities, grid)
    io.save(out / "pointwise_pred.tdk",
            io.Container("prediction", {"density": traj.densities, "reference": ref,
                                        "vc": res.x.reshape(grid.K + 1, grid.J + 1)},
                         {**manifest, "grid": grid.to_dict()}))
    factor = res.baseline.overall / res.report.overall
    summary = {"baseline_mse": res.baseline.overall, "mse": res.report.overall,
               "improvement": factor, "iterations": memory.iteration,
               "reason": res.trace.reason, "monotone": res.trace.is_monotone()}
    _dump_json(out / "pointwise_report.json", summary)
    print(f"pointwise: baseline MSE {res.baseline.overall:.6e} -> {res.report.overall:.6e} "
          f"(x{factor:.1f}) after {memory.iteration} iterations [{res.trace.reason}]")
    return 0


def _functional_manifest(cfg, grid, model: Mlp, train_p):
    fc = cfg.functional
    return {**_base_meta(cfg), "model": "functional", "grid": grid.to_dict(),
            "manifest": model.manifest(), "kind": model.kind.value, "seed": fc.seed,
            "sigma": fc.sigma, "train_p": list(train_p), "time_stride": fc.time_stride,
            "selu": {"lambda": SELU_LAMBDA, "alpha": SELU_ALPHA}}


def _functional_data(cfg, momenta, frames):
    fc = cfg.functional
    return [TrajectoryData(f"p={p:+.2f}", load_pair(cfg, p, fc.time_stride),
                           load_reference(cfg, p, fc.time_stride, frames)) for p in momenta]


def cmd_train_functional(cfg, args) -> int:
    fc = cfg.functional
    kind = ModelKind.parse(args.kind or fc.kind)
    train_p = args.train_p or fc.train_p
    grid = cfg.tdse.space_grid(fc.K, fc.time_stride)
    data = _functional_data(cfg, train_p, fc.K + 1)
    model = Mlp(kind, grid.J + 1, tuple(fc.hidden))
    problem = FunctionalProblem(grid, data, model, fc.seed, fc.sigma)
    out = _workdir(cfg)
    ckpt = out / f"functional_{kind.value}.ckpt"
    manifest = _functional_manifest(cfg, grid, model, train_p)
    theta0, memory = None, None
    if args.resume:
        c = io.load(args.resume, "checkpoint")
        if c.meta.get("manifest") != model.manifest():
            raise io.ConfigError(f"{args.resume}: model manifest does not match the config")
        theta0, memory = c["x"], io.memory_from_checkpoint(c)
    from .optim import LbfgsMemory
    memory = memory or LbfgsMemory()
    writer = _TraceWriter(out / f"functional_{kind.value}.trace", cfg.checkpoint_every,
                          lambda x: io.save(ckpt, io.checkpoint_container(x, manifest, memory)),
                          append=bool(args.resume))
    cache = build_cache(grid)
    try:
        res = train_functional(problem, fc.optim.options(), theta0=theta0, callback=writer,
                               cache=cache, memory=memory)
    finally:
        writer.close()
    io.save(ckpt, io.checkpoint_container(res.x, {**manifest, "reason": res.trace.reason},
                                          memory))
    summary = {"baseline": res.baseline.to_dict(), "train": res.report.to_dict(),
               "improvement": res.baseline.overall / res.report.overall,
               "iterations": memory.iteration, "reason": res.trace.reason,
               "monotone": res.trace.is_monotone()}
    _dump_json(out / f"functional_{kind.value}_report.json", summary)
    print(f"functional[{kind.value}]: baseline MSE {res.baseline.overall:.6e} -> "
          f"{res.report.overall:.6e} (x{summary['improvement']:.1f}) after "
          f"{memory.iteration} iterations [{res.trace.reason}]")
    return 0


def _load_checkpoint_for(cfg, path):
    c = io.load(path, "checkpoint")
    grid = GridSpec.from_dict(c.meta["grid"])
    if not grid.same_space(cfg.tdse.space_grid(1, 1)):
        raise io.ConfigError(f"{path}: checkpoint grid {grid.to_dict()} does not match "
                             "the configured grid")
    if c.meta.get("data_hash") != cfg.data_hash:
        raise io.ConfigError(f"{path}: checkpoint was trained on different reference data")
    return c, grid


def _score(cfg, args, write: bool) -> int:
    c, grid = _load_checkpoint_for(cfg, args.checkpoint)
    out = _workdir(cfg)
    extra = getattr(args, "extra_steps", None)
    if c.meta["model"] == "pointwise":
        extra = extra or 0
        p = float(c.meta["p"])
        momenta = [p]
        pair = load_pair(cfg, p, int(c.meta["time_stride"]))
        ref = load_reference(cfg, p, int(c.meta["time_stride"]), grid.K + 1)
        data = [TrajectoryData(f"p={p:+.2f}", pair, ref)]
        report, trajs = rollout_and_score(c["x"], data, grid, extra_steps=extra,
                                          train_labels=[data[0].label])
        tag = "pointwise"
    else:
        fc = cfg.functional
        extra = fc.extra_steps if extra is None else extra
        model = Mlp.from_manifest(c.meta["manifest"])
        train_p = c.meta["train_p"]
        momenta = args.p or [*train_p, *[p for p in fc.test_p if p not in train_p]]
        data = _functional_data(cfg, momenta, grid.K + extra + 1)
        labels = [f"p={p:+.2f}" for p in train_p]
        report, trajs = rollout_and_score(c["x"], data, grid, extra_steps=extra, model=model,
                                          train_labels=labels)
        tag = f"{'rollout' if write else 'evaluate'}_{model.kind.value}"
    if write:
        long_grid = build_grid(grid.L_min, grid.L_max, grid.J, grid.dt * (grid.K + extra),
                               grid.K + extra)
        for p, d in zip(momenta, data):
            traj = trajs[d.label]
            _rect_validate(traj.densities, long_grid)
            vc = traj.vc if traj.vc is not None else np.zeros(traj.states.shape)
            meta = {**c.meta, "grid": long_grid.to_dict(), "p": p, "extra_steps": extra,
                    "train_K": grid.K, "source_checkpoint_hash": io.hash_of(c.meta)}
            io.save(out / f"{tag}_{io.p_tag(p)}.tdk",
                    io.Container("prediction", {"density": traj.densities,
                                                "reference": d.ref[: long_grid.K + 1],
                                                "vc": vc}, meta))
    _dump_json(out / f"{tag}_report.json", {**report.to_dict(), "extra_steps": extra})
    for line in report.lines():
        print(line)
    return 0


def cmd_rollout(cfg, args) -> int:
    return _score(cfg, args, write=True)


def cmd_evaluate(cfg, args) -> int:
    args.extra_steps = 0
    return _score(cfg, args, write=False)


def cmd_export_csv(cfg, args) -> int:
    out = Path(args.out) if args.out else _workdir(cfg) / "csv"
    for path in args.files:
        c = io.load(path)
        if c.kind not in ("prediction", "reference"):
            raise io.ConfigError(f"{path}: cannot export a '{c.kind}' file")
        grid = GridSpec.from_dict(c.meta["grid"])
        if c.kind == "reference":
            cols = {"n_reference": c["density"]}
        else:
            cols = {"n_reference": c["reference"], "n_predicted": c["density"],
                    "v_c": c["vc"]}
        n_frames = next(iter(cols.values())).shape[0]
        for text in args.times:
            t = io.parse_time(text)
            k = io.snap_frame(t, grid.dt, n_frames)
            name = f"{Path(path).stem}_k{k:06d}.csv"
            io.write_csv(out / name, grid.x, {n: a[k] for n, a in cols.items()})
            print(f"{path}: t={text} -> frame {k} (t = {k * grid.dt:.17g} a.u.) -> {out / name}")
    return 0


def cmd_gradcheck(cfg, args) -> int:
    lines = gradcheck.run_all(seed=args.seed)
    for line in lines:
        print(line)
    return 0 if all(line.startswith("PASS") for line in lines) else 1


# ---------------------------------------------------------------- parser

COMMANDS = {
    "generate-reference": (cmd_generate_reference, "two-electron reference densities"),
    "invert-initial": (cmd_invert_initial, "exact Kohn-Sham initial pairs from snapshots"),
    "train-pointwise": (cmd_train_pointwise, "learn the correlation potential on the grid"),
    "train-functional": (cmd_train_functional, "learn a memory functional"),
    "rollout": (cmd_rollout, "propagate a checkpoint and write predicted trajectories"),
    "evaluate": (cmd_evaluate, "MSE of a checkpoint on train and test momenta"),
    "export-csv": (cmd_export_csv, "per-time CSV slices of trajectory files"),
    "gradcheck": (cmd_gradcheck, "finite-difference checks of the adjoint gradients"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", default="desk", choices=sorted(io.PRESETS))
    common.add_argument("--config", type=Path, help="JSON file layered over the preset")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted override, repeatable")
    common.add_argument("--workdir", help="shorthand for --set workdir=...")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="tdkslearn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (fn, help_) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=fn)
        if name in ("generate-reference", "invert-initial", "rollout", "evaluate"):
            p.add_argument("--p", type=_float_list, help="comma-separated momenta")
        if name in ("train-pointwise", "train-functional"):
            p.add_argument("--resume", type=Path, help="checkpoint to continue from")
        if name == "train-functional":
            p.add_argument("--kind", choices=[k.value for k in ModelKind])
            p.add_argument("--train-p", type=_float_list)
        if name in ("rollout", "evaluate"):
            p.add_argument("--checkpoint", type=Path, required=True)
        if name == "rollout":
            p.add_argument("--extra-steps", type=int)
        if name == "export-csv":
            p.add_argument("files", nargs="+", type=Path)
            p.add_argument("--times", type=lambda s: s.split(","), required=True,
                           help="comma-separated times, a.u. or with an 'fs' suffix")
            p.add_argument("--out", type=Path)
        if name == "gradcheck":
            p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.workdir:
        overrides.append(f"workdir={args.workdir}")
    try:
        cfg = io.load_config(args.preset, args.config, overrides)
        return args.func(cfg, args)
    except (io.ConfigError, io.FormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
