import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tdkslearn import adjoint, gradcheck
from tdkslearn.gradcheck import central_differences, random_state, tiny_functional, tiny_grid
from tdkslearn.mlp import ModelKind
from tdkslearn.tdks import build_cache, density_loss, ks_density, propagate_functional, \
    propagate_pointwise, step


def _real_grad_to_complex(f, phi, h=1e-6):
    """Central-difference gradient of a real function of a complex vector as gR + i gI."""
    n = len(phi)
    x = np.concatenate([phi.real, phi.imag])
    g = central_differences(lambda v: f(v[:n] + 1j * v[n:]), x, h)
    return g[:n] + 1j * g[n:]


def test_final_condition_examples():
    phi = np.array([0.3 + 0.4j, -0.1j])
    assert np.array_equal(adjoint.final_condition(phi, ks_density(phi)), np.zeros(2))
    assert adjoint.final_condition(np.array([1 + 0j]), np.array([0.0]))[0] == 8.0
    assert adjoint.final_condition(np.array([1j]), np.array([4.0]))[0] == -8j


def test_vjp_zero_cotangent(rng):
    cache = build_cache(tiny_grid(8))
    phi = random_state(rng, 9, cache.grid.dx)
    lin = adjoint.linearize(phi, rng.standard_normal(9), cache)
    assert np.array_equal(adjoint.vjp_step_state(np.zeros(9, complex), lin, phi, cache),
                          np.zeros(9, complex))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), J=st.sampled_from([4, 6, 8]))
def test_vjp_matches_block_jacobian(seed, J):
    rng = np.random.default_rng(seed)
    cache = build_cache(tiny_grid(J))
    n = J + 1
    phi = random_state(rng, n, cache.grid.dx)
    vc = rng.standard_normal(n)
    lam = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    got = adjoint.vjp_step_state(lam, adjoint.linearize(phi, vc, cache), phi, cache)
    want = np.concatenate([lam.real, lam.imag]) @ adjoint.block_jacobian(phi, vc, cache)
    assert np.max(np.abs(got.real - want[:n])) < 1e-12
    assert np.max(np.abs(got.imag - want[n:])) < 1e-12


def test_block_jacobian_matches_finite_differences(rng):
    # the dense oracle itself, checked against the step function
    cache = build_cache(tiny_grid(6))
    n = 7
    phi = random_state(rng, n, cache.grid.dx)
    vc = rng.standard_normal(n)
    B = adjoint.block_jacobian(phi, vc, cache)
    x = np.concatenate([phi.real, phi.imag])
    h = 1e-6
    fd = np.empty_like(B)
    for m in range(2 * n):
        e = np.zeros(2 * n)
        e[m] = h
        plus = step((x + e)[:n] + 1j * (x + e)[n:], vc, cache)
        minus = step((x - e)[:n] + 1j * (x - e)[n:], vc, cache)
        d = (plus - minus) / (2 * h)
        fd[:, m] = np.concatenate([d.real, d.imag])
    assert np.max(np.abs(B - fd)) / np.max(np.abs(fd)) < 1e-8


def test_vjp_matches_contracted_fd(rng):
    cache = build_cache(tiny_grid(8))
    phi = random_state(rng, 9, cache.grid.dx)
    vc = rng.standard_normal(9)
    lam = rng.standard_normal(9) + 1j * rng.standard_normal(9)
    got = adjoint.vjp_step_state(lam, adjoint.linearize(phi, vc, cache), phi, cache)

    def contracted(p):
        out = step(p, vc, cache)
        return float(lam.real @ out.real + lam.imag @ out.imag)

    errs = [np.max(np.abs(got - _real_grad_to_complex(contracted, phi, h)))
            for h in (1e-4, 1e-5, 1e-6)]
    assert min(errs) / np.max(np.abs(got)) < 1e-7


def test_vc_jacobian_matches_pullback(rng):
    cache = build_cache(tiny_grid(8))
    phi = random_state(rng, 9, cache.grid.dx)
    vc = rng.standard_normal(9)
    lam = rng.standard_normal(9) + 1j * rng.standard_normal(9)
    _, r = adjoint.pullback(lam, adjoint.linearize(phi, vc, cache), cache)
    dense = np.concatenate([lam.real, lam.imag]) @ adjoint.dense_vc_jacobian(phi, vc, cache)
    assert np.max(np.abs(r - dense)) < 1e-12


def test_backstep_zero(rng):
    cache = build_cache(tiny_grid(8))
    phi = random_state(rng, 9, cache.grid.dx)
    lam = adjoint.backstep_pointwise(np.zeros(9, complex), phi, np.zeros(9), ks_density(phi),
                                     cache)
    assert np.max(np.abs(lam)) == 0.0


def test_backstep_matches_dense_gradient(rng):
    # K=2: lam_1 is the full derivative of the loss with respect to phi_1
    cache = build_cache(tiny_grid(8, K=2))
    phi1 = random_state(rng, 9, cache.grid.dx)
    vc = rng.standard_normal(9)
    ref = rng.uniform(0, 0.5, (2, 9))

    def loss(p):
        return density_loss(np.array([ks_density(p), ks_density(step(p, vc, cache))]), ref)

    lam2 = adjoint.final_condition(step(phi1, vc, cache), ref[1])
    lam1 = adjoint.backstep_pointwise(lam2, phi1, vc, ref[0], cache)
    fd = _real_grad_to_complex(loss, phi1)
    assert np.max(np.abs(lam1 - fd)) / np.max(np.abs(fd)) < 1e-8


def test_pointwise_gradient_fd():
    res = gradcheck.check_pointwise()
    assert res.passed, res.line()


def test_perfect_fit_has_zero_gradient(rng):
    cache = build_cache(tiny_grid(8, K=3))
    phi0 = random_state(rng, 9, cache.grid.dx)
    Vc = 0.3 * rng.standard_normal((4, 9))
    ref = propagate_pointwise(phi0, Vc, cache).densities
    _, rep = adjoint.pointwise_objective(phi0, Vc, ref, 0.0, cache)
    assert rep.objective == 0.0
    assert np.max(np.abs(rep.grad)) < 1e-12


def test_row_K_gets_only_regularizer(rng):
    from tdkslearn.tdks import smoothness_penalty
    cache = build_cache(tiny_grid(8, K=3))
    phi0 = random_state(rng, 9, cache.grid.dx)
    Vc = rng.standard_normal((4, 9))
    ref = rng.uniform(0, 0.5, (4, 9))
    _, rep = adjoint.pointwise_objective(phi0, Vc, ref, 1e-3, cache)
    _, greg = smoothness_penalty(Vc, 1e-3, cache.grid)
    assert np.array_equal(rep.grad[3], greg[3])


def test_separate_solver_matches_fused(rng):
    cache = build_cache(tiny_grid(8, K=5))
    phi0 = random_state(rng, 9, cache.grid.dx)
    Vc = 0.4 * rng.standard_normal((6, 9))
    ref = rng.uniform(0, 0.5, (6, 9))
    traj, fused = adjoint.pointwise_objective(phi0, Vc, ref, 1e-4, cache, keep_costates=True)
    Lam = adjoint.solve_adjoint_pointwise(traj, ref, Vc, cache)
    rep = adjoint.gradient_vc(traj, Lam, Vc, 1e-4, cache, ref)
    assert np.allclose(rep.grad, fused.grad, rtol=0, atol=1e-14)
    assert np.allclose(Lam[1:], fused.costates[1:], rtol=0, atol=1e-14)
    assert rep.objective == pytest.approx(fused.objective, rel=1e-15)


@pytest.mark.parametrize("scale", [0.5, 3.0, -2.0])
def test_linear_in_residuals(rng, scale):
    cache = build_cache(tiny_grid(8, K=4))
    phi0 = random_state(rng, 9, cache.grid.dx)
    Vc = 0.4 * rng.standard_normal((5, 9))
    ref = rng.uniform(0, 0.5, (5, 9))
    traj, rep = adjoint.pointwise_objective(phi0, Vc, ref, 0.0, cache)
    n = traj.densities
    _, scaled = adjoint.pointwise_objective(phi0, Vc, n - scale * (n - ref), 0.0, cache)
    assert np.max(np.abs(scaled.grad - scale * rep.grad)) <= 1e-12 * np.max(np.abs(rep.grad)) * 10


@pytest.mark.parametrize("kind", list(ModelKind))
def test_functional_gradient_fd(kind):
    res = gradcheck.check_functional(kind)
    assert res.passed, res.line()


@pytest.mark.parametrize("kind", list(ModelKind))
def test_functional_zero_misfit(kind):
    cache, model, theta, phi0, phi1, _ = tiny_functional(kind)
    traj = propagate_functional(phi0, phi1, model, theta, 5, cache)
    rep = adjoint.solve_adjoint_functional(traj, traj.densities, theta, model, cache)
    assert np.max(np.abs(rep.grad)) <= 1e-12 * max(1.0, np.max(np.abs(theta)))


@pytest.mark.parametrize("kind", list(ModelKind))
def test_delay_ablation(kind):
    masked, unmasked = gradcheck.check_delay_ablation(kind)
    assert masked == 0.0
    assert unmasked > 1e-8


@pytest.mark.parametrize("kind", list(ModelKind))
def test_functional_linear_in_residuals(kind):
    cache, model, theta, phi0, phi1, ref = tiny_functional(kind)
    traj = propagate_functional(phi0, phi1, model, theta, 5, cache)
    base = adjoint.solve_adjoint_functional(traj, ref, theta, model, cache).grad
    n = traj.densities
    scaled = adjoint.solve_adjoint_functional(traj, n - 2.5 * (n - ref), theta, model,
                                              cache).grad
    assert np.max(np.abs(scaled - 2.5 * base)) <= 1e-12 * np.max(np.abs(base)) * 10


def test_functional_rejects_stale_trajectory():
    cache, model, theta, phi0, phi1, ref = tiny_functional("phi")
    traj = propagate_functional(phi0, phi1, model, theta, 5, cache)
    with pytest.raises(ValueError, match="not produced"):
        adjoint.solve_adjoint_functional(traj, ref, theta * 1.01, model, cache)
    with pytest.raises(ValueError, match="reference"):
        adjoint.solve_adjoint_functional(traj, ref[:4], theta, model, cache)


def test_costates_stay_finite_over_long_pass(desk_phi0):
    from tdkslearn.grid import build_grid
    K = 30000
    cache = build_cache(build_grid(-40.0, 20.0, 120, 0.0125 * K, K))
    Vc = np.zeros((K + 1, len(desk_phi0)))
    ref = np.tile(ks_density(desk_phi0), (K + 1, 1))
    _, rep = adjoint.pointwise_objective(desk_phi0, Vc, ref, 0.0, cache, keep_costates=True)
    peak = float(np.max(np.abs(rep.costates)))
    assert np.isfinite(peak) and np.all(np.isfinite(rep.grad))
    print(f"max |lambda| over a {K}-step backward pass: {peak:.3e}")
