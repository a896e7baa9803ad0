"""Discrete adjoints of the split-step TDKS propagator.

Costates are kept as complex vectors ``lam = lam_R + i lam_I``; the real pair
``(lam_R, lam_I)`` is what multiplies the real/imaginary split of the
propagator.  For a step ``F(phi) = P (e * u)`` with ``u = P phi`` and
``e = exp(-i v dt)``, contracting ``[lam_R; lam_I]^T J F`` gives

    c = P conj(lam)                   (P is complex symmetric)
    r = dt * Im(c * e * u)            real cotangent on the potential v
    g = conj(P (c * e)) + (2 w * (W r)) * phi   (+ model terms)

``r`` is also the gradient with respect to a pointwise ``v_c``, and the
cotangent fed to the network for parameter gradients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tdks import (PropagatorCache, TdksTrajectory, density_loss, ks_density,
                   phase_factor, potential_vector, propagate_functional,
                   propagate_pointwise, smoothness_penalty)


@dataclass
class StepLinearization:
    u: np.ndarray   # P phi
    e: np.ndarray   # exp(-i v dt)
    v: np.ndarray


@dataclass
class GradientReport:
    grad: np.ndarray
    objective: float
    misfit: float
    regularizer: float = 0.0
    costates: np.ndarray | None = None


def linearize(phi: np.ndarray, vc: np.ndarray, cache: PropagatorCache) -> StepLinearization:
    v = potential_vector(phi, vc, cache)
    return StepLinearization(cache.P @ phi, phase_factor(v, cache.dt), v)


def final_condition(phi_K: np.ndarray, n_K: np.ndarray) -> np.ndarray:
    """``lam_K = 4 (2|phi_K|^2 - n_K) phi_K``: gradient of the last misfit row."""
    return 4.0 * (ks_density(phi_K) - n_K) * phi_K


def misfit_gradient(phi: np.ndarray, n_ref: np.ndarray) -> np.ndarray:
    return 4.0 * (ks_density(phi) - n_ref) * phi


def pullback(lam: np.ndarray, lin: StepLinearization, cache: PropagatorCache):
    """Split the step VJP into the direct kinetic/phase part and the potential cotangent."""
    ce = (cache.P @ np.conj(lam)) * lin.e
    direct = np.conj(cache.P @ ce)
    r = cache.dt * np.imag(ce * lin.u)
    return direct, r


def hartree_pullback(r: np.ndarray, phi: np.ndarray, cache: PropagatorCache) -> np.ndarray:
    return (2.0 * cache.w * (cache.W @ r)) * phi


def vjp_step_state(lam: np.ndarray, lin: StepLinearization, phi: np.ndarray,
                   cache: PropagatorCache) -> np.ndarray:
    """``[lam_R; lam_I]^T J_phi F`` as a complex vector (real part = phi_R block)."""
    direct, r = pullback(lam, lin, cache)
    return direct + hartree_pullback(r, phi, cache)


def backstep_pointwise(lam_next, phi_k, vc_k, n_k, cache) -> np.ndarray:
    lin = linearize(phi_k, vc_k, cache)
    return misfit_gradient(phi_k, n_k) + vjp_step_state(lam_next, lin, phi_k, cache)


def solve_adjoint_pointwise(traj: TdksTrajectory, ref: np.ndarray, Vc: np.ndarray,
                            cache: PropagatorCache) -> np.ndarray:
    """Costates ``lam_1..lam_K`` (row 0 is left at zero: the initial state is fixed)."""
    states = traj.states
    K = len(states) - 1
    Lam = np.zeros_like(states)
    Lam[K] = final_condition(states[K], ref[K])
    for k in range(K - 1, 0, -1):
        Lam[k] = backstep_pointwise(Lam[k + 1], states[k], Vc[k], ref[k], cache)
    return Lam


def gradient_vc(traj: TdksTrajectory, Lam: np.ndarray, Vc: np.ndarray, mu: float,
                cache: PropagatorCache, ref: np.ndarray | None = None) -> GradientReport:
    """Gradient of misfit + smoothness penalty with respect to every entry of ``Vc``."""
    K = len(traj.states) - 1
    g = np.zeros(Vc.shape)
    for ell in range(K):
        lin = linearize(traj.states[ell], Vc[ell], cache)
        g[ell] = pullback(Lam[ell + 1], lin, cache)[1]
    reg, greg = smoothness_penalty(Vc, mu, cache.grid)
    misfit = density_loss(traj, ref) if ref is not None else float("nan")
    return GradientReport(g + greg, misfit + reg, misfit, reg, Lam)


def pointwise_objective(phi0: np.ndarray, Vc: np.ndarray, ref: np.ndarray, mu: float,
                        cache: PropagatorCache, keep_costates: bool = False):
    """Forward solve, backward sweep and gradient in one pass.

    Only the forward states are stored; each step's linearization is
    recomputed during the backward sweep.
    """
    traj = propagate_pointwise(phi0, Vc, cache)
    states = traj.states
    K = len(states) - 1
    g = np.zeros(Vc.shape)
    Lam = np.zeros_like(states) if keep_costates else None
    lam = final_condition(states[K], ref[K])
    for k in range(K - 1, -1, -1):
        if keep_costates:
            Lam[k + 1] = lam
        lin = linearize(states[k], Vc[k], cache)
        direct, r = pullback(lam, lin, cache)
        g[k] = r
        if k > 0:
            lam = misfit_gradient(states[k], ref[k]) + direct + hartree_pullback(r, states[k], cache)
    misfit = density_loss(traj, ref)
    reg, greg = smoothness_penalty(Vc, mu, cache.grid)
    return traj, GradientReport(g + greg, misfit + reg, misfit, reg, Lam)


def solve_adjoint_functional(traj: TdksTrajectory, ref: np.ndarray, theta: np.ndarray,
                             model, cache: PropagatorCache, include_delay: bool = True,
                             keep_costates: bool = False) -> GradientReport:
    """Delayed costate recursion and parameter gradient for a memory model.

    ``lam_K`` is the final misfit gradient; for k = K-1..1

        lam_k = misfit_k + lam_{k+1}^T J_phi F(phi_k, phi_{k-1})
                         + lam_{k+2}^T J_phi' F(phi_{k+1}, phi_k),

    the last term being absent at k = K-1.  The gradient is
    ``sum_{k=1}^{K-1} lam_{k+1}^T grad_theta F(phi_k, phi_{k-1})``, accumulated
    from k = K-1 downwards.  ``include_delay=False`` drops the J_phi' term
    (used to check the delay structure).
    """
    states = traj.states
    if model.digest(theta, states[0], states[1]) != traj.provenance:
        raise ValueError("trajectory was not produced by these parameters; "
                         "re-propagate before computing gradients")
    if ref.shape != states.shape:
        raise ValueError(f"reference {ref.shape} vs trajectory {states.shape}")
    K = len(states) - 1
    params = model.unflatten(theta)
    grad = np.zeros(model.n_params)
    Lam = np.zeros_like(states) if keep_costates else None
    lam_next = final_condition(states[K], ref[K])
    carry = np.zeros(states.shape[1], dtype=np.complex128)
    for k in range(K - 1, 0, -1):
        if keep_costates:
            Lam[k + 1] = lam_next
        phi, prev = states[k], states[k - 1]
        vc = traj.vc[k] if traj.vc is not None else model.forward(phi, prev, params)
        lin = linearize(phi, vc, cache)
        direct, r = pullback(lam_next, lin, cache)
        dR, dI, dpR, dpI, dtheta = model.vjp(phi, prev, params, r)
        grad += dtheta
        lam = (misfit_gradient(phi, ref[k]) + direct + hartree_pullback(r, phi, cache)
               + (dR + 1j * dI) + carry)
        carry = (dpR + 1j * dpI) if include_delay else np.zeros_like(carry)
        lam_next = lam
    if keep_costates:
        Lam[1] = lam_next
    misfit = density_loss(traj, ref)
    return GradientReport(grad, misfit, misfit, 0.0, Lam)


def functional_objective(phi0, phi1, ref, theta, model, cache):
    traj = propagate_functional(phi0, phi1, model, theta, len(ref) - 1, cache)
    return traj, solve_adjoint_functional(traj, ref, theta, model, cache)


def block_jacobian(phi: np.ndarray, vc: np.ndarray, cache: PropagatorCache) -> np.ndarray:
    """Explicit ``2(J+1)`` square real Jacobian of one step, entry by entry.

    Built directly from the derivative of ``sum_qr P_lq exp(-i V_qq dt) P_qr phi_r``
    with ``dV_qq/dphi_m = 2 W_qm w_m phi_m``; only meant for small grids.
    """
    P, dt = cache.P, cache.dt
    v = potential_vector(phi, vc, cache)
    e = phase_factor(v, dt)
    u = P @ phi
    QR = 2.0 * cache.W * (cache.w * phi.real)[None, :]
    QI = 2.0 * cache.W * (cache.w * phi.imag)[None, :]
    dR = P @ (e[:, None] * ((-1j * dt) * u[:, None] * QR + P))
    dI = P @ (e[:, None] * ((-1j * dt) * u[:, None] * QI + 1j * P))
    return np.block([[dR.real, dI.real], [dR.imag, dI.imag]])


def dense_vc_jacobian(phi, vc, cache) -> np.ndarray:
    """``d[F_R; F_I]/d v_c`` as a ``2(J+1) x (J+1)`` real matrix."""
    P, dt = cache.P, cache.dt
    e = phase_factor(potential_vector(phi, vc, cache), dt)
    u = P @ phi
    dF = P * (e * (-1j * dt) * u)[None, :]
    return np.vstack([dF.real, dF.imag])

