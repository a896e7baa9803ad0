import logging

import numpy as np
import pytest

from tdkslearn.grid import build_grid
from tdkslearn.mlp import Mlp
from tdkslearn.optim import LbfgsOptions
from tdkslearn.tdks import build_cache, propagate_functional, propagate_pointwise, \
    smoothness_penalty, step
from tdkslearn.tdse2d import KsInitialPair
from tdkslearn.train import (EvalReport, FunctionalProblem, PointwiseProblem, TrajectoryData,
                             rollout_and_score, score_functional, train_functional,
                             train_pointwise, trajectory_mse)


def _teacher_grid(K=20):
    return build_grid(-8.0, 8.0, 16, 0.05 * K, K)


def _packet(grid, center=-1.0, momentum=0.8):
    x = grid.x
    phi = np.exp(-(x - center) ** 2 / 2 + 1j * momentum * x)
    return phi / np.sqrt(grid.dx * np.sum(np.abs(phi) ** 2))


@pytest.fixture(scope="module")
def pointwise_case():
    grid = _teacher_grid()
    cache = build_cache(grid)
    phi0 = _packet(grid)
    t = np.arange(grid.K + 1)[:, None] * grid.dt
    teacher = 0.4 * np.cos(grid.x / 2)[None, :] * (1 + t)
    ref = propagate_pointwise(phi0, teacher, cache).densities
    return grid, cache, phi0, ref


def test_trajectory_mse_formula(rng):
    ref = rng.uniform(0, 1, (3, 4))
    pred = ref + 0.1
    assert trajectory_mse(pred, ref) == pytest.approx(0.01, rel=1e-12)
    phi = np.sqrt(ref / 2) * np.exp(1j * rng.uniform(0, 6, ref.shape))
    assert trajectory_mse(phi, ref) < 1e-30


def test_pointwise_problem_validation(pointwise_case, caplog):
    grid, _, phi0, ref = pointwise_case
    with pytest.raises(ValueError, match="shape"):
        PointwiseProblem(grid, ref[:-1], phi0)
    with caplog.at_level(logging.WARNING):
        PointwiseProblem(grid, ref, phi0, mu=1e-2)
    assert "outside the tested range" in caplog.text
    caplog.clear()
    with caplog.at_level(logging.WARNING):
        PointwiseProblem(grid, ref, phi0, mu=1e-5)
    assert caplog.text == ""


def test_pointwise_training_recovers_densities(pointwise_case):
    grid, cache, phi0, ref = pointwise_case
    res = train_pointwise(PointwiseProblem(grid, ref, phi0, mu=0.0),
                          LbfgsOptions(max_iter=300, grad_tol=1e-12), cache=cache)
    base, final = res.baseline.mse["train"], res.report.mse["train"]
    assert final < base / 1000
    assert res.trace.is_monotone()
    assert res.x.shape == (grid.K + 1, grid.J + 1)
    # row K never enters the dynamics and mu=0 leaves it at the start value
    assert np.array_equal(res.x[grid.K], np.zeros(grid.J + 1))


def test_regularizer_smooths(pointwise_case):
    grid, cache, phi0, ref = pointwise_case
    opts = LbfgsOptions(max_iter=60)
    rough = train_pointwise(PointwiseProblem(grid, ref, phi0, mu=0.0), opts, cache=cache)
    smooth = train_pointwise(PointwiseProblem(grid, ref, phi0, mu=1e-4), opts, cache=cache)
    roughness = [smoothness_penalty(r.x, 1.0, grid)[0] for r in (rough, smooth)]
    assert roughness[1] < roughness[0]


def test_pointwise_deterministic(pointwise_case):
    grid, cache, phi0, ref = pointwise_case
    opts = LbfgsOptions(max_iter=10)
    a = train_pointwise(PointwiseProblem(grid, ref, phi0), opts, cache=cache)
    b = train_pointwise(PointwiseProblem(grid, ref, phi0), opts, cache=cache)
    assert np.array_equal(a.x, b.x)


@pytest.fixture(scope="module")
def functional_case():
    grid = _teacher_grid(K=12)
    cache = build_cache(grid)
    model = Mlp("density", grid.J + 1, (8, 8, 8))
    teacher = model.init_params(99, 0.3)
    data = []
    for p in (0.6, 1.0, 1.4):
        phi0 = _packet(grid, momentum=p)
        phi1 = step(phi0, np.zeros(grid.J + 1), cache)
        pair = KsInitialPair(phi0, phi1, grid.dt)
        ref = propagate_functional(phi0, phi1, model, teacher, grid.K + 6, cache).densities
        data.append(TrajectoryData(f"p={p}", pair, ref))
    return grid, cache, model, data


def test_functional_problem_validation(functional_case):
    grid, _, model, data = functional_case
    with pytest.raises(ValueError, match="at least one"):
        FunctionalProblem(grid, [], model)
    bad = TrajectoryData("x", KsInitialPair(data[0].pair.phi0, data[0].pair.phi1, 0.3),
                         data[0].ref)
    with pytest.raises(ValueError, match="dt"):
        FunctionalProblem(grid, [bad], model)
    short = TrajectoryData("x", data[0].pair, data[0].ref[:5])
    with pytest.raises(ValueError, match="does not cover"):
        FunctionalProblem(grid, [short], model)
    with pytest.raises(ValueError, match="width"):
        FunctionalProblem(grid, data, Mlp("density", 5, (8, 8, 8)))


def test_functional_training_and_rollout(functional_case):
    grid, cache, model, data = functional_case
    train, test = data[::2], data[1:2]
    prob = FunctionalProblem(grid, train, model, seed=0, sigma=0.01)
    res = train_functional(prob, LbfgsOptions(max_iter=150), cache=cache)
    assert res.trace.is_monotone()
    for d in train:
        assert res.report.mse[d.label] < res.baseline.mse[d.label] / 10
    # rolling out over the training horizon reproduces the training score exactly
    rep, trajs = rollout_and_score(res.x, train, grid, model=model,
                                   train_labels=[d.label for d in train], cache=cache)
    assert rep.mse == res.report.mse
    assert set(rep.split.values()) == {"train"}
    # extrapolated rollouts start with the training trajectory bit-for-bit
    ext, ext_trajs = rollout_and_score(res.x, data, grid, extra_steps=6, model=model,
                                       train_labels=[d.label for d in train], cache=cache)
    for d in train:
        assert np.array_equal(ext_trajs[d.label].states[: grid.K + 1], trajs[d.label].states)
    assert ext.split[test[0].label] == "test"
    assert len(ext_trajs[test[0].label]) == grid.K + 7
    held = score_functional(model, res.x, test, grid.K, cache)
    assert np.isfinite(held.overall)


def test_pointwise_rollout_rules(pointwise_case):
    grid, cache, phi0, ref = pointwise_case
    pair = KsInitialPair(phi0, step(phi0, np.zeros(grid.J + 1), cache), grid.dt)
    Vc = np.zeros((grid.K + 1, grid.J + 1))
    d = TrajectoryData("p", pair, ref)
    rep, _ = rollout_and_score(Vc, [d], grid, cache=cache)
    assert rep.mse["p"] == pytest.approx(
        trajectory_mse(propagate_pointwise(phi0, Vc, cache).states, ref), rel=0)
    with pytest.raises(ValueError, match="extrapolated"):
        rollout_and_score(Vc, [d], grid, extra_steps=1, cache=cache)
    with pytest.raises(ValueError, match="missing"):
        rollout_and_score(Vc, [TrajectoryData("q", None, ref)], grid, cache=cache)


def test_eval_report():
    r = EvalReport({"a": 1.0, "b": 3.0}, {"a": "train", "b": "test"})
    assert r.overall == 2.0
    assert r.to_dict()["overall"] == 2.0
    lines = r.lines()
    assert lines[0].startswith("a [train]") and lines[-1].startswith("overall")
