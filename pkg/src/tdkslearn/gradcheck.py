"""Finite-difference checks of the adjoint gradients on tiny instances.

Each check returns a :class:`CheckResult`.  Relative errors are
``max|g - fd| / max|fd|`` at every step size of the sweep; the best one is
compared against the tolerance, so the floor set by FD truncation and
rounding does not mask a wrong gradient (a wrong gradient is wrong at every h).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import adjoint
from .grid import build_grid
from .mlp import Mlp, ModelKind
from .tdks import build_cache, density_loss, propagate_functional

DEFAULT_STEPS = (1e-4, 1e-5, 1e-6)


@dataclass
class CheckResult:
    name: str
    errors: dict = field(default_factory=dict)   # step size -> relative error
    tol: float = 0.0
    seconds: float = 0.0

    @property
    def best(self) -> float:
        return min(self.errors.values())

    @property
    def passed(self) -> bool:
        return self.best < self.tol

    def line(self) -> str:
        sweep = " ".join(f"h={h:.0e}:{e:.2e}" for h, e in self.errors.items())
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: best {self.best:.3e} < {self.tol:g} ({sweep}) [{self.seconds:.2f}s]"


def relative_error(g: np.ndarray, fd: np.ndarray) -> float:
    scale = float(np.max(np.abs(fd)))
    return float(np.max(np.abs(g - fd))) / (scale if scale > 0 else 1.0)


def central_differences(f, x: np.ndarray, h: float) -> np.ndarray:
    """Coordinate-wise central differences of a scalar function."""
    x = np.array(x, dtype=float)
    out = np.empty(x.size)
    flat = x.reshape(-1)
    for i in range(flat.size):
        xi = flat[i]
        flat[i] = xi + h
        fp = f(x)
        flat[i] = xi - h
        fm = f(x)
        flat[i] = xi
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def tiny_grid(J: int = 8, K: int = 3, dt: float = 0.1):
    return build_grid(-4.0, 4.0, J, dt * K, K)


def random_state(rng, n: int, width: float = 1.0) -> np.ndarray:
    phi = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    return phi / np.sqrt(np.sum(np.abs(phi) ** 2) * width)


def check_pointwise(J: int = 8, K: int = 3, mu: float = 1e-3, seed: int = 0,
                    steps=DEFAULT_STEPS, tol: float = 1e-6) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    grid = tiny_grid(J, K)
    cache = build_cache(grid)
    phi0 = random_state(rng, J + 1, grid.dx)
    ref = rng.uniform(0.0, 0.5, size=(K + 1, J + 1))
    Vc = 0.5 * rng.standard_normal((K + 1, J + 1))
    _, rep = adjoint.pointwise_objective(phi0, Vc, ref, mu, cache)

    def f(V):
        return adjoint.pointwise_objective(phi0, V, ref, mu, cache)[1].objective

    res = CheckResult(f"pointwise J={J} K={K}", tol=tol)
    for h in steps:
        res.errors[h] = relative_error(rep.grad, central_differences(f, Vc, h))
    res.seconds = time.perf_counter() - t0
    return res


def tiny_functional(kind, J: int = 8, K: int = 5, hidden=(8, 8, 8), sigma: float = 0.3,
                    seed: int = 0):
    rng = np.random.default_rng(seed)
    grid = tiny_grid(J, K)
    cache = build_cache(grid)
    model = Mlp(ModelKind.parse(kind), J + 1, tuple(hidden))
    theta = model.init_params(seed, sigma)
    phi0 = random_state(rng, J + 1, grid.dx)
    phi1 = random_state(rng, J + 1, grid.dx)
    ref = rng.uniform(0.0, 0.5, size=(K + 1, J + 1))
    return cache, model, theta, phi0, phi1, ref


def check_functional(kind, J: int = 8, K: int = 5, hidden=(8, 8, 8), seed: int = 0,
                     steps=DEFAULT_STEPS, tol: float = 1e-5) -> CheckResult:
    t0 = time.perf_counter()
    cache, model, theta, phi0, phi1, ref = tiny_functional(kind, J, K, hidden, seed=seed)
    _, rep = adjoint.functional_objective(phi0, phi1, ref, theta, model, cache)

    def f(th):
        return density_loss(propagate_functional(phi0, phi1, model, th, K, cache), ref)

    res = CheckResult(f"functional[{model.kind.value}] J={J} K={K} hidden={hidden}", tol=tol)
    for h in steps:
        res.errors[h] = relative_error(rep.grad, central_differences(f, theta, h))
    res.seconds = time.perf_counter() - t0
    return res


def mask_memory_inputs(model: Mlp, theta: np.ndarray) -> np.ndarray:
    """Zero the first-layer columns that read the previous state."""
    layers = [(W.copy(), b.copy()) for W, b in model.unflatten(theta)]
    half = model.n_in // 2
    layers[0][0][:, half:] = 0.0
    return model.flatten(layers)


def check_delay_ablation(kind, J: int = 8, K: int = 5, hidden=(8, 8, 8), seed: int = 0):
    """With the memory inputs masked, the delayed term must contribute exactly nothing.

    Returns ``(masked_difference, unmasked_difference)``: the max gradient
    change from dropping the delayed term, with and without the mask.  The
    first must be exactly 0, the second must not.
    """
    cache, model, theta, phi0, phi1, ref = tiny_functional(kind, J, K, hidden, seed=seed)
    diffs = []
    for th in (mask_memory_inputs(model, theta), theta):
        traj = propagate_functional(phi0, phi1, model, th, K, cache)
        full = adjoint.solve_adjoint_functional(traj, ref, th, model, cache)
        nodelay = adjoint.solve_adjoint_functional(traj, ref, th, model, cache,
                                                   include_delay=False)
        diffs.append(float(np.max(np.abs(full.grad - nodelay.grad))))
    return diffs[0], diffs[1]


def check_block_jacobian(J: int = 8, seed: int = 0, trials: int = 3) -> float:
    """Max abs difference between the VJP and the transposed dense block Jacobian."""
    rng = np.random.default_rng(seed)
    grid = tiny_grid(J, 3)
    cache = build_cache(grid)
    worst = 0.0
    for _ in range(trials):
        phi = random_state(rng, J + 1, grid.dx)
        vc = rng.standard_normal(J + 1)
        lam = rng.standard_normal(J + 1) + 1j * rng.standard_normal(J + 1)
        lin = adjoint.linearize(phi, vc, cache)
        got = adjoint.vjp_step_state(lam, lin, phi, cache)
        B = adjoint.block_jacobian(phi, vc, cache)
        want = np.concatenate([lam.real, lam.imag]) @ B
        n = J + 1
        worst = max(worst, float(np.max(np.abs(got.real - want[:n]))),
                    float(np.max(np.abs(got.imag - want[n:]))))
    return worst


def run_all(seed: int = 0) -> list[str]:
    """All suites as printable lines (used by the ``gradcheck`` command)."""
    lines = [check_pointwise(seed=seed).line()]
    for kind in ModelKind:
        lines.append(check_functional(kind, seed=seed).line())
        masked, unmasked = check_delay_ablation(kind, seed=seed)
        ok = masked == 0.0 and unmasked > 0.0
        lines.append(f"{'PASS' if ok else 'FAIL'} delay ablation[{kind.value}]: "
                     f"masked {masked:.1e}, unmasked {unmasked:.3e}")
    err = check_block_jacobian(seed=seed)
    lines.append(f"{'PASS' if err < 1e-12 else 'FAIL'} block Jacobian J=8: max abs {err:.3e}")
    return lines
