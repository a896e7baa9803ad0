"""Forward propagation of the discretized one-orbital TDKS equation.

One step is ``phi' = P (e * (P phi))`` with ``P = exp(-i K dt/2)`` (dense,
exact, from an eigendecomposition of ``K = -Laplacian/2``) and
``e = exp(-i v dt)`` the diagonal potential phase, where
``v = v_ext + W(|phi|^2 * w) + v_c``.  The middle term is the Hartree and
exchange potentials combined (exchange is minus half of Hartree for a
doubly occupied orbital).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .grid import (GridSpec, external_potential, interaction_matrix, laplacian4,
                   simpson_pattern)


def ks_density(phi: np.ndarray) -> np.ndarray:
    """``n = 2 |phi|^2``, evaluated as ``2 (re^2 + im^2)`` everywhere in the package."""
    return 2.0 * (phi.real * phi.real + phi.imag * phi.imag)


def array_digest(*arrays, extra: str = "") -> str:
    h = hashlib.sha256(extra.encode())
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class PropagatorCache:
    grid: GridSpec
    P: np.ndarray          # exp(-i K dt/2), complex symmetric
    evals: np.ndarray      # eigenvalues of K
    evecs: np.ndarray      # orthogonal eigenvectors of K
    v_ext: np.ndarray
    W: np.ndarray
    w: np.ndarray          # dimensionless Simpson pattern (dx lives in W)

    @property
    def dt(self) -> float:
        return self.grid.dt

    def kinetic_exponential(self, dt: float) -> np.ndarray:
        """``exp(-i K dt)`` for arbitrary ``dt`` from the stored eigendecomposition."""
        S = self.evecs
        P = (S * np.exp(-1j * self.evals * dt)) @ S.T
        return 0.5 * (P + P.T)


def build_cache(grid: GridSpec) -> PropagatorCache:
    K = -0.5 * laplacian4(grid).toarray()
    try:
        evals, evecs = np.linalg.eigh(K)
    except np.linalg.LinAlgError as exc:  # pragma: no cover
        raise RuntimeError(f"eigendecomposition of the kinetic matrix failed "
                           f"(cond estimate {np.linalg.cond(K):.3e})") from exc
    P = (evecs * np.exp(-0.5j * evals * grid.dt)) @ evecs.T
    P = 0.5 * (P + P.T)
    for a in (P, evecs, evals):
        a.setflags(write=False)
    return PropagatorCache(grid, P, evals, evecs, external_potential(grid),
                           interaction_matrix(grid), simpson_pattern(grid.J))


def hartree_exchange(phi: np.ndarray, cache: PropagatorCache) -> np.ndarray:
    return cache.W @ ((phi.real**2 + phi.imag**2) * cache.w)


def potential_vector(phi: np.ndarray, vc: np.ndarray, cache: PropagatorCache) -> np.ndarray:
    return cache.v_ext + hartree_exchange(phi, cache) + vc


def phase_factor(v: np.ndarray, dt: float) -> np.ndarray:
    return np.cos(v * dt) - 1j * np.sin(v * dt)


def step(phi: np.ndarray, vc: np.ndarray, cache: PropagatorCache) -> np.ndarray:
    v = potential_vector(phi, vc, cache)
    if not np.all(np.isfinite(v)):
        bad = int(np.flatnonzero(~np.isfinite(v))[0])
        raise FloatingPointError(f"non-finite potential at grid index {bad}")
    u = cache.P @ phi
    return cache.P @ (phase_factor(v, cache.dt) * u)


def norm(phi: np.ndarray, cache_or_grid) -> float:
    """L2 norm under Simpson quadrature."""
    grid = getattr(cache_or_grid, "grid", cache_or_grid)
    w = simpson_pattern(grid.J) * grid.dx
    return float(np.sqrt(w @ (phi.real**2 + phi.imag**2)))


def l2_norm(phi: np.ndarray, cache_or_grid) -> float:
    """``sqrt(dx * sum |phi|^2)``: the norm the unitary step conserves exactly.

    The Simpson norm is close but not invariant, since ``P`` is unitary in
    the plain Euclidean inner product.
    """
    grid = getattr(cache_or_grid, "grid", cache_or_grid)
    return float(np.sqrt(grid.dx * np.sum(phi.real**2 + phi.imag**2)))


@dataclass
class TdksTrajectory:
    states: np.ndarray                 # (K+1, J+1) complex
    grid: GridSpec
    provenance: str                    # digest of (initial states, control)
    vc: np.ndarray | None = None       # correlation potential that drove each step
    meta: dict = field(default_factory=dict)

    @property
    def densities(self) -> np.ndarray:
        return ks_density(self.states)

    def __len__(self):
        return len(self.states)


def _check_row(phi, k):
    if not np.all(np.isfinite(phi)):
        raise FloatingPointError(f"propagation produced non-finite values at step {k}")


def pointwise_digest(phi0: np.ndarray, Vc: np.ndarray) -> str:
    return array_digest(phi0, Vc, extra="pointwise")


def propagate_pointwise(phi0: np.ndarray, Vc: np.ndarray,
                        cache: PropagatorCache) -> TdksTrajectory:
    """Trajectory of ``K+1`` states; row ``k`` of ``Vc`` drives step ``k -> k+1``.

    Row ``K`` of ``Vc`` is carried for shape alignment and never used.
    """
    K = Vc.shape[0] - 1
    if Vc.shape[1] != phi0.shape[0]:
        raise ValueError(f"Vc has {Vc.shape[1]} columns, state has {phi0.shape[0]} points")
    states = np.empty((K + 1, phi0.shape[0]), dtype=np.complex128)
    states[0] = phi0
    for k in range(K):
        states[k + 1] = step(states[k], Vc[k], cache)
        _check_row(states[k + 1], k + 1)
    return TdksTrajectory(states, cache.grid, pointwise_digest(phi0, Vc), Vc)


def propagate_functional(phi0: np.ndarray, phi1: np.ndarray, model, theta: np.ndarray,
                         steps: int, cache: PropagatorCache) -> TdksTrajectory:
    """Memory-model propagation ``phi_{k+1} = F(phi_k, phi_{k-1}; theta)`` for k >= 1.

    ``model`` is an :class:`tdkslearn.mlp.Mlp`; ``theta`` its flat parameters.
    Returns ``steps + 1`` states, the first two being ``phi0`` and ``phi1``.
    """
    if steps < 1:
        raise ValueError("need at least one step")
    n = phi0.shape[0]
    states = np.empty((steps + 1, n), dtype=np.complex128)
    vcs = np.zeros((steps + 1, n))
    states[0], states[1] = phi0, phi1
    params = model.unflatten(theta)
    for k in range(1, steps):
        vcs[k] = model.forward(states[k], states[k - 1], params)
        states[k + 1] = step(states[k], vcs[k], cache)
        _check_row(states[k + 1], k + 1)
    return TdksTrajectory(states, cache.grid, model.digest(theta, phi0, phi1), vcs)


def density_loss(traj: TdksTrajectory | np.ndarray, ref: np.ndarray) -> float:
    """``1/2 sum_k sum_j (2|phi|^2 - n_ref)^2`` (no quadrature weights)."""
    dens = traj.densities if isinstance(traj, TdksTrajectory) else np.asarray(traj)
    if dens.shape != ref.shape:
        raise ValueError(f"trajectory densities {dens.shape} vs reference {ref.shape}")
    r = dens - ref
    return 0.5 * float(np.sum(r * r))


def mse_from_loss(loss: float, shape) -> float:
    return 2.0 * loss / (shape[0] * shape[1])


def smoothness_penalty(Vc: np.ndarray, mu: float, grid: GridSpec) -> tuple[float, np.ndarray]:
    """``mu * sum_k sum_j ((Vc[k,j+1] - Vc[k,j]) / dx)^2`` and its exact gradient."""
    if mu < 0:
        raise ValueError("mu must be non-negative")
    d = np.diff(Vc, axis=1) / grid.dx
    val = mu * float(np.sum(d * d))
    g = np.zeros_like(Vc)
    c = (2.0 * mu / grid.dx) * d
    g[:, 1:] += c
    g[:, :-1] -= c
    return val, g
