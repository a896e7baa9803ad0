"""Run configuration, the binary container format, checkpoints and CSV export.

Container layout::

    uint64 little-endian   header length in bytes
    header                 UTF-8 JSON, keys sorted
    payload                arrays in header order, little-endian float64, row-major

Complex arrays are stored as two consecutive real arrays ``name.re`` and
``name.im``.  Nothing time-dependent goes into a header, so identical inputs
give byte-identical files.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .grid import FS_PER_AU, GridSpec, build_grid, fs_to_au

FORMAT_NAME = "tdkslearn"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")


class FormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- hashing

def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def hash_of(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- container

@dataclass
class Container:
    kind: str                               # "reference", "ks_pair", "checkpoint", ...
    arrays: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.arrays[name]


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def encode(c: Container) -> bytes:
    entries, blobs = [], []
    for name, arr in c.arrays.items():
        arr = np.asarray(arr)
        parts = ([(f"{name}.re", arr.real), (f"{name}.im", arr.imag)]
                 if np.iscomplexobj(arr) else [(name, arr)])
        for pname, part in parts:
            part = np.ascontiguousarray(part, dtype="<f8")
            entries.append({"name": pname, "shape": list(part.shape), "dtype": "<f8"})
            blobs.append(part.tobytes())
    header = {"format": FORMAT_NAME, "format_version": FORMAT_VERSION, "kind": c.kind,
              "arrays": entries, "meta": c.meta, "code_version": __version__,
              "fs_per_au": FS_PER_AU}
    hbytes = canonical_json(header).encode()
    return _LEN.pack(len(hbytes)) + hbytes + b"".join(blobs)


def decode(data: bytes, source: str = "<bytes>") -> Container:
    if len(data) < _LEN.size:
        raise FormatError(f"{source}: file too short for a header")
    (hlen,) = _LEN.unpack_from(data, 0)
    if _LEN.size + hlen > len(data):
        raise FormatError(f"{source}: header length {hlen} exceeds file size")
    try:
        header = json.loads(data[_LEN.size:_LEN.size + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: header is not valid JSON ({exc})") from exc
    if header.get("format") != FORMAT_NAME:
        raise FormatError(f"{source}: not a {FORMAT_NAME} file")
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: format version {version} is not supported by this "
                          f"build (reads version {FORMAT_VERSION}); regenerate the file or "
                          f"use a matching tdkslearn release")
    offset = _LEN.size + hlen
    raw = {}
    for e in header["arrays"]:
        if e.get("dtype") != "<f8":
            raise FormatError(f"{source}: array {e['name']} has unsupported dtype {e['dtype']}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        nbytes = 8 * count
        if offset + nbytes > len(data):
            raise FormatError(f"{source}: payload truncated in array {e['name']}")
        raw[e["name"]] = np.frombuffer(data, dtype="<f8", count=count,
                                       offset=offset).reshape(e["shape"]).astype(np.float64)
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{source}: {len(data) - offset} trailing bytes after payload")
    arrays = {}
    for name, arr in raw.items():
        if name.endswith(".im"):
            continue
        if name.endswith(".re") and name[:-3] + ".im" in raw:
            base = name[:-3]
            arrays[base] = arr + 1j * raw[base + ".im"]
        else:
            arrays[name] = arr
    c = Container(header["kind"], arrays, header.get("meta", {}))
    c.meta.setdefault("_code_version", header.get("code_version"))
    return c


def save(path, c: Container) -> None:
    atomic_write_bytes(path, encode(c))


def load(path, kind: str | None = None) -> Container:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from exc
    c = decode(data, str(path))
    if kind is not None and c.kind != kind:
        raise FormatError(f"{path}: expected a '{kind}' file, found '{c.kind}'")
    return c


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        (hlen,) = _LEN.unpack(fh.read(_LEN.size))
        return json.loads(fh.read(hlen).decode())


# ---------------------------------------------------------------- configuration

@dataclass
class OptimConfig:
    memory: int = 10
    grad_tol: float = 1e-6
    rel_f_tol: float = 2.22e-9
    max_iter: int = 500

    def options(self):
        from .optim import LbfgsOptions
        return LbfgsOptions(memory=self.memory, grad_tol=self.grad_tol,
                            rel_f_tol=self.rel_f_tol, max_iter=self.max_iter)


@dataclass
class TdseConfig:
    L_min: float = -40.0
    L_max: float = 20.0
    J: int = 240
    dt: float = 0.0025              # a.u.; ``dt_fs`` is accepted on input
    steps: int = 2500
    save_stride: int = 5
    space_stride: int = 2
    packet_center: float = 10.0
    packet_sigma: float = 1.0
    momenta: list = field(default_factory=lambda: [-1.0, -1.2, -1.4, -1.5, -1.6, -1.8])

    def fine_grid(self) -> GridSpec:
        return build_grid(self.L_min, self.L_max, self.J, self.dt * self.steps, self.steps)

    def space_grid(self, K: int, time_stride: int) -> GridSpec:
        """Coarse TDKS grid for ``K`` steps of ``time_stride`` fine steps each."""
        return build_grid(self.L_min, self.L_max, self.J // self.space_stride,
                          self.dt * time_stride * K, K)


@dataclass
class PointwiseConfig:
    p: float = -1.5
    K: int = 400
    time_stride: int = 5
    mu: float = 1e-5
    optim: OptimConfig = field(default_factory=OptimConfig)


@dataclass
class FunctionalConfig:
    kind: str = "phi"
    hidden: list = field(default_factory=lambda: [64, 64, 64])
    seed: int = 0
    sigma: float = 0.01
    K: int = 80
    time_stride: int = 25
    train_p: list = field(default_factory=lambda: [-1.5])
    test_p: list = field(default_factory=lambda: [-1.2, -1.4, -1.6])
    extra_steps: int = 20
    optim: OptimConfig = field(default_factory=OptimConfig)


@dataclass
class RunConfig:
    preset: str = "desk"
    workdir: str = "runs/desk"
    checkpoint_every: int = 50
    tdse: TdseConfig = field(default_factory=TdseConfig)
    pointwise: PointwiseConfig = field(default_factory=PointwiseConfig)
    functional: FunctionalConfig = field(default_factory=FunctionalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def hash(self) -> str:
        d = self.to_dict()
        d.pop("workdir")
        return hash_of(d)

    @property
    def data_hash(self) -> str:
        """Identifies the reference data: only the two-electron settings enter."""
        return hash_of(dataclasses.asdict(self.tdse))

    def validate(self) -> "RunConfig":
        t = self.tdse
        t.fine_grid()  # raises on invalid extents
        if t.J % t.space_stride or (t.J // t.space_stride) % 2:
            raise ConfigError(f"tdse.space_stride={t.space_stride} must divide J={t.J} into "
                              "an even number of intervals")
        for name, sec, extra in (("pointwise", self.pointwise, 0),
                                 ("functional", self.functional, self.functional.extra_steps)):
            if sec.time_stride % t.save_stride:
                raise ConfigError(f"{name}.time_stride={sec.time_stride} is not a multiple "
                                  f"of tdse.save_stride={t.save_stride}")
            need = sec.time_stride * (sec.K + extra)
            if need > t.steps:
                raise ConfigError(f"{name} needs {need} two-electron steps, tdse.steps={t.steps}")
        if not 0 <= self.pointwise.mu:
            raise ConfigError("pointwise.mu must be non-negative")
        if self.functional.sigma <= 0 or t.packet_sigma <= 0:
            raise ConfigError("sigma values must be positive")
        from .mlp import ModelKind
        try:
            ModelKind.parse(self.functional.kind)
        except ValueError:
            raise ConfigError(f"functional.kind must be 'phi' or 'density', "
                              f"got {self.functional.kind!r}") from None
        return self


PRESETS = {
    "desk": {},
    "paper": {
        "preset": "paper",
        "workdir": "runs/paper",
        "tdse": {"L_min": -80.0, "L_max": 40.0, "J": 1200, "dt_fs": 2.4e-5, "steps": 36000,
                 "save_stride": 1, "space_stride": 2},
        "pointwise": {"K": 30000, "time_stride": 1, "mu": 1e-5,
                      "optim": {"max_iter": 15000}},
        "functional": {"hidden": [256, 256, 256], "K": 300, "time_stride": 100,
                       "train_p": [-1.0, -1.8], "test_p": [-1.2, -1.4, -1.5, -1.6],
                       "extra_steps": 60, "optim": {"max_iter": 15000}},
    },
}


def _merge(cls, base, updates: dict, where: str):
    out = copy.deepcopy(base)
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in updates.items():
        target = key
        if key.endswith("_fs"):
            target = key[:-3]
            if target not in names or target != "dt":
                raise ConfigError(f"unknown key '{where}{key}'")
            value = fs_to_au(float(value))
        if target not in names:
            raise ConfigError(f"unknown key '{where}{key}' "
                              f"(allowed: {', '.join(sorted(names))})")
        cur = getattr(out, target)
        if dataclasses.is_dataclass(cur):
            if not isinstance(value, dict):
                raise ConfigError(f"'{where}{key}' must be a table")
            value = _merge(type(cur), cur, value, f"{where}{key}.")
        else:
            value = _coerce(cur, value, f"{where}{key}")
        setattr(out, target, value)
    return out


def _coerce(cur, value, key):
    try:
        if isinstance(cur, bool):
            return bool(value)
        if isinstance(cur, int):
            if float(value) != int(float(value)):
                raise ValueError
            return int(float(value))
        if isinstance(cur, float):
            return float(value)
        if isinstance(cur, list):
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            proto = cur[0] if cur else 0.0
            return [type(proto)(float(v)) if isinstance(proto, (int, float)) else v
                    for v in value]
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value {value!r} for '{key}'") from None


def parse_override(text: str) -> dict:
    """``a.b.c=value`` to a nested dict; values are JSON when they parse as JSON."""
    if "=" not in text:
        raise ConfigError(f"override '{text}' is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out = cur = {}
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return out


def _deep_update(a: dict, b: dict) -> dict:
    for k, v in b.items():
        if isinstance(v, dict) and isinstance(a.get(k), dict):
            _deep_update(a[k], v)
        else:
            a[k] = v
    return a


def load_config(preset: str = "desk", path=None, overrides=()) -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset '{preset}' (choose from {', '.join(PRESETS)})")
    layers = [PRESETS[preset]]
    if path is not None:
        try:
            layers.append(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for o in overrides:
        layers.append(parse_override(o))
    cfg = RunConfig()
    for layer in layers:
        cfg = _merge(RunConfig, cfg, layer, "")
    return cfg.validate()


def config_from_dict(d: dict) -> RunConfig:
    return _merge(RunConfig, RunConfig(), d, "").validate()


# ---------------------------------------------------------------- file names

def p_tag(p: float) -> str:
    """``-1.5 -> "pm1_50"``; safe in file names on every platform."""
    sign = "m" if p < 0 else "p"
    return f"p{sign}{abs(p):.2f}".replace(".", "_")


def reference_path(workdir, p) -> Path:
    return Path(workdir) / "data" / f"reference_{p_tag(p)}.tdk"


def snapshot_path(workdir, p) -> Path:
    return Path(workdir) / "data" / f"snapshots_{p_tag(p)}.tdk"


def ks_pair_path(workdir, p, time_stride) -> Path:
    return Path(workdir) / "data" / f"kspair_{p_tag(p)}_s{time_stride}.tdk"


# ---------------------------------------------------------------- typed payloads

def grid_meta(grid: GridSpec) -> dict:
    return grid.to_dict()


def check_grid(meta: dict, grid: GridSpec, source) -> None:
    got = GridSpec.from_dict(meta["grid"])
    if not got.same_space(grid):
        raise ConfigError(f"{source}: spatial grid {got.to_dict()} does not match the "
                          f"configured grid {grid.to_dict()}")


def check_data_hash(meta: dict, cfg: RunConfig, source) -> None:
    if meta.get("data_hash") != cfg.data_hash:
        raise ConfigError(f"{source} was generated with different two-electron settings "
                          f"(data hash {meta.get('data_hash')} vs {cfg.data_hash}); "
                          "regenerate the reference data")


def validate_density_rows(dens: np.ndarray, grid: GridSpec, tol: float = 1e-6) -> None:
    from .grid import simpson_weights
    if np.any(dens < 0):
        raise ValueError("density has negative entries")
    integrals = dens @ simpson_weights(grid)
    bad = np.flatnonzero(np.abs(integrals - 2.0) > tol)
    if bad.size:
        raise ValueError(f"density row {bad[0]} integrates to {integrals[bad[0]]:.10f}, "
                         f"expected 2 +- {tol:g}")


def checkpoint_container(x: np.ndarray, manifest: dict, memory=None) -> Container:
    arrays = {"x": np.asarray(x, dtype=float)}
    meta = dict(manifest)
    if memory is not None:
        meta["iteration"] = int(memory.iteration)
        meta["n_pairs"] = len(memory.S)
        if memory.S:
            arrays["lbfgs_s"] = np.array(memory.S)
            arrays["lbfgs_y"] = np.array(memory.Y)
    return Container("checkpoint", arrays, meta)


def memory_from_checkpoint(c: Container):
    from .optim import LbfgsMemory
    mem = LbfgsMemory(iteration=int(c.meta.get("iteration", 0)))
    if "lbfgs_s" in c.arrays:
        mem.S = [row.copy() for row in c.arrays["lbfgs_s"]]
        mem.Y = [row.copy() for row in c.arrays["lbfgs_y"]]
    return mem


# ---------------------------------------------------------------- CSV export

def parse_time(text: str) -> float:
    """``"0.432fs"`` or ``"12.5"`` (a.u.) to atomic units."""
    t = str(text).strip().lower()
    if t.endswith("fs"):
        return fs_to_au(float(t[:-2]))
    if t.endswith("au"):
        t = t[:-2]
    return float(t)


def snap_frame(t: float, dt: float, n_frames: int) -> int:
    k = int(round(t / dt))
    if t < -0.5 * dt or k > n_frames - 1:
        raise ValueError(f"time {t:.6g} a.u. is outside the trajectory "
                         f"[0, {(n_frames - 1) * dt:.6g}] a.u.")
    return k


def write_csv(path, x, columns: dict) -> None:
    """Columns printed with 17 significant digits (exact float64 round trip)."""
    import io as _io
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = ["x", *columns]
    w.writerow(names)
    cols = [np.asarray(x), *[np.asarray(c) for c in columns.values()]]
    for i in range(len(cols[0])):
        w.writerow([f"{c[i]:.17g}" for c in cols])
    atomic_write_text(path, buf.getvalue())


def read_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0]
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    return {n: data[:, i] for i, n in enumerate(names)}
