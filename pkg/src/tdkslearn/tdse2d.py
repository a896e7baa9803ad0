"""Two electrons in one dimension: the reference-data generator.

The wavefunction Psi(x1, x2) lives on a square grid and is stored as a 2D
complex array whose row-major flattening is the ``(J+1)**2`` state vector.
Time stepping is second-order splitting, with the kinetic factor applied as a
degree-4 Taylor polynomial of the banded 2D Laplacian (never assembled).
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.linalg import eig_banded

from . import kernels
from .grid import (GridSpec, external_potential, first_derivative, laplacian4,
                   simpson_weights, soft_coulomb)
from .tdks import ks_density

log = logging.getLogger(__name__)

#: relative norm drift beyond which a run is considered broken
NORM_DRIFT_LIMIT = 1e-6
#: density floor used in the j/n quotient of the Kohn-Sham inversion
DENSITY_FLOOR = 1e-12


class NormDriftError(RuntimeError):
    pass


class KsInversionWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PacketSpec:
    center: float = 10.0
    p: float = -1.5
    sigma: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"packet width must be positive, got {self.sigma}")


@dataclass
class TwoBodyWavefunction:
    psi: np.ndarray  # (J+1, J+1) complex, axis 0 is x1
    grid: GridSpec

    @property
    def vector(self) -> np.ndarray:
        return self.psi.reshape(-1)

    def norm(self) -> float:
        w = simpson_weights(self.grid)
        return float(w @ (np.abs(self.psi) ** 2) @ w)

    def swap_residual(self) -> float:
        return float(np.max(np.abs(self.psi - self.psi.T)))


@dataclass
class KsInitialPair:
    phi0: np.ndarray
    phi1: np.ndarray
    dt: float


@dataclass
class TdseRun:
    densities: np.ndarray          # (frames, J+1)
    steps: np.ndarray              # fine step index of each frame
    snapshots: dict = field(default_factory=dict)
    final: TwoBodyWavefunction | None = None
    max_norm_drift: float = 0.0
    energies: np.ndarray | None = None


def _hamiltonian_bands(grid: GridSpec) -> np.ndarray:
    ab = -0.5 * laplacian4(grid).upper_bands()
    ab[2] += external_potential(grid)
    return ab


def hydrogen_ground_state(grid: GridSpec) -> tuple[np.ndarray, float]:
    """Lowest eigenpair of ``-1/2 Laplacian + v_ext`` on the 1D grid.

    The returned orbital is positive and normalized under Simpson quadrature.
    """
    ab = _hamiltonian_bands(grid)
    evals, evecs = eig_banded(ab, lower=False, select="i", select_range=(0, 0))
    E = float(evals[0])
    phi = evecs[:, 0]
    H = -0.5 * laplacian4(grid).toarray() + np.diag(external_potential(grid))
    resid = float(np.linalg.norm(H @ phi - E * phi))
    if resid > 1e-10:
        raise RuntimeError(f"ground-state eigensolver did not converge: residual {resid:.3e}")
    if phi.sum() < 0:
        phi = -phi
    phi = phi / np.sqrt(simpson_weights(grid) @ phi**2)
    return phi, E


def gaussian_packet(grid: GridSpec, packet: PacketSpec) -> np.ndarray:
    x = grid.x
    return np.exp(-((x - packet.center) ** 2) / (4.0 * packet.sigma**2) + 1j * packet.p * x)


def initial_wavefunction(grid: GridSpec, packet: PacketSpec,
                         phi_h: np.ndarray | None = None) -> TwoBodyWavefunction:
    """Symmetrized product of the atomic orbital and an incoming Gaussian packet."""
    if phi_h is None:
        phi_h, _ = hydrogen_ground_state(grid)
    g = gaussian_packet(grid, packet)
    a = np.outer(phi_h, g)
    psi = a + a.T
    w = simpson_weights(grid)
    psi /= np.sqrt(w @ (np.abs(psi) ** 2) @ w)
    return TwoBodyWavefunction(psi, grid)


def two_body_potential(grid: GridSpec) -> np.ndarray:
    v = external_potential(grid)
    r = np.abs(np.subtract.outer(np.arange(grid.J + 1), np.arange(grid.J + 1))) * grid.dx
    return v[:, None] + v[None, :] + soft_coulomb(r)


def one_electron_density(psi: TwoBodyWavefunction) -> np.ndarray:
    w = simpson_weights(psi.grid)
    return 2.0 * ((psi.psi.real**2 + psi.psi.imag**2) @ w)


def current_density(psi: TwoBodyWavefunction) -> np.ndarray:
    grid = psi.grid
    d1 = first_derivative(psi.psi, grid.dx, axis=0)
    return 2.0 * (np.imag(np.conj(psi.psi) * d1) @ simpson_weights(grid))


def energy(psi: TwoBodyWavefunction, V: np.ndarray | None = None) -> float:
    grid = psi.grid
    if V is None:
        V = two_body_potential(grid)
    lap = kernels.laplacian2d(psi.psi, laplacian4(grid).coeffs)
    Hpsi = -0.5 * lap + V * psi.psi
    w = simpson_weights(grid)
    return float(np.real(w @ (np.conj(psi.psi) * Hpsi) @ w))


def propagate_tdse(psi0: TwoBodyWavefunction, steps: int, save_stride: int = 1,
                   snapshot_steps=(), track_energy: bool = False,
                   use_numba: bool | None = None) -> TdseRun:
    """Split-operator propagation ``psi <- P_K P_V P_K psi`` with time step ``grid.dt``.

    Densities are recorded at step 0 and every ``save_stride`` steps; full
    wavefunctions only at ``snapshot_steps``.  Raises :class:`NormDriftError`
    when the norm drifts by more than ``NORM_DRIFT_LIMIT``.
    """
    if steps < 0 or save_stride < 1:
        raise ValueError("need steps >= 0 and save_stride >= 1")
    grid = psi0.grid
    dt = grid.dt
    coeffs = laplacian4(grid).coeffs
    V = two_body_potential(grid)
    phase = np.cos(V * dt) - 1j * np.sin(V * dt)
    tau = 0.25j * dt  # -i (-1/2 Lap) dt/2
    snapshot_steps = set(int(s) for s in snapshot_steps)

    psi = psi0.psi.astype(np.complex128, copy=True)
    norm0 = psi0.norm()
    frames, idx, energies = [], [], []
    snaps = {}
    max_drift = 0.0

    def record(k, psi):
        nonlocal max_drift
        wf = TwoBodyWavefunction(psi, grid)
        n = one_electron_density(wf)
        drift = abs(float(simpson_weights(grid) @ n) / 2.0 - norm0) / norm0
        max_drift = max(max_drift, drift)
        if drift > NORM_DRIFT_LIMIT:
            raise NormDriftError(
                f"relative norm drift {drift:.3e} at step {k} exceeds {NORM_DRIFT_LIMIT:g}; "
                f"dt={dt:.4e} is too large for the Taylor kinetic propagator")
        frames.append(n)
        idx.append(k)
        if track_energy:
            energies.append(energy(wf, V))

    for k in range(steps + 1):
        if k > 0:
            psi = kernels.split_step(psi, phase, tau, coeffs, use_numba=use_numba)
        if k % save_stride == 0:
            record(k, psi)
        if k in snapshot_steps:
            snaps[k] = TwoBodyWavefunction(psi.copy(), grid)
        if k and k % 1000 == 0:
            log.debug("tdse step %d/%d", k, steps)
    return TdseRun(np.array(frames), np.array(idx), snaps, TwoBodyWavefunction(psi, grid),
                   max_drift, np.array(energies) if track_energy else None)


def _nudge(a: np.ndarray, n_ulp: int) -> np.ndarray:
    out = a.copy()
    target = np.inf if n_ulp > 0 else -np.inf
    for _ in range(abs(n_ulp)):
        out = np.nextafter(out, target)
    return out


def _match_density(re: np.ndarray, im: np.ndarray, n: np.ndarray, reach: int = 64,
                   max_phase_shift: float = 1e-6):
    """Move (re, im) by rounding-level amounts so ``ks_density`` reproduces ``n`` exactly.

    One component is stepped ulp by ulp away from its value and the other
    re-solved from ``n/2``, trying a couple of ulps around the root.  The
    larger component is stepped first; leftovers (mostly ``|re| ~ |im|``)
    get a second pass stepping the smaller one, and the few entries still
    unmatched a dense sweep along the circle.  Candidates that rotate the
    phase by more than ``max_phase_shift`` are rejected; entries that find
    no match keep their values.
    """
    re, im = re.copy(), im.copy()
    for prefer_big in (True, False):
        bad = np.flatnonzero(ks_density(re + 1j * im) != n)
        if bad.size == 0:
            return re, im
        _search(re, im, n, bad, prefer_big, reach, max_phase_shift)
    # rare leftovers: exact pairs can be sparse near the starting point
    for i in np.flatnonzero(ks_density(re + 1j * im) != n):
        _sweep(re, im, n, i, max_phase_shift)
    return re, im


def _sweep(re, im, n, i, max_phase_shift, width=2**17):
    """Dense vectorized search along the circle for a single entry."""
    off = np.arange(-width, width + 1, dtype=float)
    order = np.argsort(np.abs(off), kind="stable")
    half = n[i] / 2.0
    angle0 = np.arctan2(im[i], re[i])
    for step_im in (False, True):
        fixed, other = (im[i], re[i]) if step_im else (re[i], im[i])
        b = fixed + off * np.spacing(fixed)
        root = np.copysign(np.sqrt(np.maximum(half - b * b, 0.0)), other)
        for k in (0, 1, -1, 2, -2, 3, -3):
            s_ = _nudge(root, k) if k else root
            rr, ii = (s_, b) if step_im else (b, s_)
            hit = 2.0 * (rr * rr + ii * ii) == n[i]
            hit &= np.abs(np.angle(np.exp(1j * (np.arctan2(ii, rr) - angle0)))) <= max_phase_shift
            if hit.any():
                j = order[np.argmax(hit[order])]
                re[i], im[i] = rr[j], ii[j]
                return


def _search(re, im, n, bad, prefer_big, reach, max_phase_shift):
    r0, i0, target = re[bad], im[bad], n[bad]
    half = target / 2.0
    angle0 = np.arctan2(i0, r0)
    # swap: the imaginary part is the stepped component
    swap = (np.abs(i0) > np.abs(r0)) == prefer_big
    stepped = np.where(swap, i0, r0)
    sign = np.where(np.signbit(np.where(swap, r0, i0)), -1.0, 1.0)
    done = np.zeros(bad.size, dtype=bool)

    def attempt(b):
        root = sign * np.sqrt(np.maximum(half - b * b, 0.0))
        for k in (0, 1, -1, 2, -2):
            s_ = _nudge(root, k) if k else root
            rr, ii = np.where(swap, s_, b), np.where(swap, b, s_)
            hit = ~done & (2.0 * (rr * rr + ii * ii) == target)
            shift = np.angle(np.exp(1j * (np.arctan2(ii, rr) - angle0)))
            hit &= np.abs(shift) <= max_phase_shift
            re[bad[hit]] = rr[hit]
            im[bad[hit]] = ii[hit]
            done[hit] = True

    attempt(stepped)
    up, down = stepped, stepped
    for _ in range(reach):
        if done.all():
            break
        up = np.nextafter(up, np.inf)
        down = np.nextafter(down, -np.inf)
        attempt(up)
        attempt(down)


def exact_ks_state(n: np.ndarray, j: np.ndarray, grid: GridSpec,
                   floor: float = DENSITY_FLOOR) -> np.ndarray:
    """Doubly occupied orbital with density ``n`` and current ``j``.

    ``phi = sqrt(n/2) exp(iS)`` with ``dS/dx = j/n`` integrated from ``L_min``
    (``S(L_min) = 0``).  The quotient uses ``max(n, floor)``.
    """
    n = np.asarray(n, dtype=float)
    j = np.asarray(j, dtype=float)
    if np.any(n < 0):
        raise ValueError("density has negative entries")
    low = n < floor
    if np.any(low):
        jmax = np.max(np.abs(j)) if j.size else 0.0
        hot = low & (np.abs(j) > 1e-6 * max(jmax, 1e-300))
        if np.any(hot):
            xs = grid.x[hot]
            warnings.warn(f"density below {floor:g} where current is significant over "
                          f"x in [{xs.min():.3f}, {xs.max():.3f}]", KsInversionWarning,
                          stacklevel=2)
    S = cumulative_simpson(j / np.maximum(n, floor), dx=grid.dx, initial=0.0)
    amp = np.sqrt(n / 2.0)
    re, im = amp * np.cos(S), amp * np.sin(S)
    re, im = _match_density(re, im, n)
    return re + 1j * im


def orbital_current(phi: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Current of a doubly occupied orbital, ``2 Im(conj(phi) dphi/dx)``."""
    return 2.0 * np.imag(np.conj(phi) * first_derivative(phi, grid.dx))


def ks_initial_pair(psi_a: TwoBodyWavefunction, psi_b: TwoBodyWavefunction, dt: float,
                    space_stride: int = 1) -> KsInitialPair:
    """Exact Kohn-Sham orbitals for two frames ``dt`` apart, on every ``space_stride``-th point.

    The inversion runs on the two-electron grid; the orbitals are then subsampled.
    """
    out = []
    for wf in (psi_a, psi_b):
        phi = exact_ks_state(one_electron_density(wf), current_density(wf), wf.grid)
        out.append(phi[::space_stride].copy())
    return KsInitialPair(out[0], out[1], dt)
