"""Training drivers for the pointwise and the memory-functional problems."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import adjoint
from .grid import GridSpec
from .mlp import Mlp
from .optim import LbfgsMemory, LbfgsOptions, OptimTrace, minimize
from .tdks import (PropagatorCache, build_cache, density_loss, mse_from_loss,
                   propagate_functional, propagate_pointwise, step)
from .tdse2d import KsInitialPair

log = logging.getLogger(__name__)

MU_RANGE = (1e-6, 1e-4)


@dataclass
class EvalReport:
    mse: dict                                   # label -> MSE
    split: dict = field(default_factory=dict)   # label -> "train" | "test"

    @property
    def overall(self) -> float:
        return float(np.mean(list(self.mse.values())))

    def to_dict(self) -> dict:
        return {"mse": {str(k): v for k, v in self.mse.items()},
                "split": {str(k): v for k, v in self.split.items()},
                "overall": self.overall}

    def lines(self) -> list[str]:
        out = [f"{k} [{self.split.get(k, '-')}] mse={v:.6e}" for k, v in self.mse.items()]
        out.append(f"overall mse={self.overall:.6e}")
        return out


def trajectory_mse(states_or_dens: np.ndarray, ref: np.ndarray) -> float:
    """The single MSE formula used everywhere: ``2 * loss / ((K+1)(J+1))``."""
    dens = states_or_dens
    if np.iscomplexobj(dens):
        dens = 2.0 * (dens.real**2 + dens.imag**2)
    return mse_from_loss(density_loss(dens, ref), ref.shape)


# ---------------------------------------------------------------- pointwise

@dataclass
class PointwiseProblem:
    grid: GridSpec          # coarse TDKS grid, K = number of training steps
    ref: np.ndarray         # (K+1, J+1)
    phi0: np.ndarray
    mu: float = 1e-5

    def __post_init__(self):
        shape = (self.grid.K + 1, self.grid.J + 1)
        if self.ref.shape != shape:
            raise ValueError(f"reference has shape {self.ref.shape}, grid needs {shape}")
        if self.mu and not MU_RANGE[0] <= self.mu <= MU_RANGE[1]:
            log.warning("mu=%g is outside the tested range [%g, %g]", self.mu, *MU_RANGE)


@dataclass
class TrainResult:
    x: np.ndarray           # flat Vc or theta
    report: EvalReport
    trace: OptimTrace
    baseline: EvalReport | None = None


def pointwise_objective_fn(problem: PointwiseProblem, cache: PropagatorCache):
    shape = (problem.grid.K + 1, problem.grid.J + 1)

    def fun(x):
        try:
            _, rep = adjoint.pointwise_objective(problem.phi0, x.reshape(shape), problem.ref,
                                                 problem.mu, cache)
        except FloatingPointError as exc:
            log.info("trial point diverged: %s", exc)
            return np.inf, None
        return rep.objective, rep.grad.ravel()

    return fun


def train_pointwise(problem: PointwiseProblem, opts: LbfgsOptions | None = None,
                    x0: np.ndarray | None = None, callback=None,
                    cache: PropagatorCache | None = None,
                    memory: LbfgsMemory | None = None) -> TrainResult:
    """L-BFGS on the flattened correlation grid, starting from ``Vc = 0`` by default."""
    cache = cache or build_cache(problem.grid)
    shape = (problem.grid.K + 1, problem.grid.J + 1)
    x0 = np.zeros(shape[0] * shape[1]) if x0 is None else np.asarray(x0, float).ravel()
    zero = np.zeros(shape)
    base = trajectory_mse(propagate_pointwise(problem.phi0, zero, cache).states, problem.ref)
    res = minimize(pointwise_objective_fn(problem, cache), x0, opts, callback, memory)
    Vc = res.x.reshape(shape)
    mse = trajectory_mse(propagate_pointwise(problem.phi0, Vc, cache).states, problem.ref)
    return TrainResult(Vc, EvalReport({"train": mse}, {"train": "train"}), res.trace,
                       EvalReport({"train": base}, {"train": "train"}))


# ---------------------------------------------------------------- functional

@dataclass
class TrajectoryData:
    label: str              # e.g. "p=-1.5"
    pair: KsInitialPair
    ref: np.ndarray         # (K+1, J+1) or longer for extrapolation


@dataclass
class FunctionalProblem:
    grid: GridSpec
    data: list[TrajectoryData]
    model: Mlp
    seed: int = 0
    sigma: float = 0.01

    def __post_init__(self):
        if not self.data:
            raise ValueError("need at least one training trajectory")
        for d in self.data:
            if d.ref.shape[1] != self.grid.J + 1 or d.ref.shape[0] < self.grid.K + 1:
                raise ValueError(f"{d.label}: reference {d.ref.shape} does not cover "
                                 f"the grid (K={self.grid.K}, J={self.grid.J})")
            if not np.isclose(d.pair.dt, self.grid.dt, rtol=1e-12, atol=0):
                raise ValueError(f"{d.label}: initial pair built for dt={d.pair.dt}, "
                                 f"grid has dt={self.grid.dt}")
        if self.model.n_points != self.grid.J + 1:
            raise ValueError("model width does not match the grid")

    def horizon(self, d: TrajectoryData) -> np.ndarray:
        return d.ref[: self.grid.K + 1]


def functional_objective_fn(problem: FunctionalProblem, cache: PropagatorCache):
    K = problem.grid.K

    def fun(theta):
        total = 0.0
        grad = np.zeros_like(theta)
        # fixed order keeps the reduction bit-reproducible
        for d in problem.data:
            try:
                traj = propagate_functional(d.pair.phi0, d.pair.phi1, problem.model, theta,
                                            K, cache)
            except FloatingPointError as exc:
                log.info("trial point diverged on %s: %s", d.label, exc)
                return np.inf, None
            rep = adjoint.solve_adjoint_functional(traj, problem.horizon(d), theta,
                                                   problem.model, cache)
            total += rep.objective
            grad += rep.grad
        return total, grad

    return fun


def zero_correlation_states(pair: KsInitialPair, steps: int, cache: PropagatorCache):
    """Functional-style rollout with ``v_c = 0``: the fixed pair, then plain steps."""
    n = pair.phi0.shape[0]
    states = np.empty((steps + 1, n), dtype=np.complex128)
    states[0], states[1] = pair.phi0, pair.phi1
    zero = np.zeros(n)
    for k in range(1, steps):
        states[k + 1] = step(states[k], zero, cache)
    return states


def train_functional(problem: FunctionalProblem, opts: LbfgsOptions | None = None,
                     theta0: np.ndarray | None = None, callback=None,
                     cache: PropagatorCache | None = None,
                     memory: LbfgsMemory | None = None) -> TrainResult:
    """Minimize the summed density misfit over all training trajectories (no regularizer)."""
    cache = cache or build_cache(problem.grid)
    K = problem.grid.K
    if theta0 is None:
        theta0 = problem.model.init_params(problem.seed, problem.sigma)
    base = {d.label: trajectory_mse(zero_correlation_states(d.pair, K, cache),
                                    problem.horizon(d)) for d in problem.data}
    res = minimize(functional_objective_fn(problem, cache), theta0, opts, callback, memory)
    report = score_functional(problem.model, res.x, problem.data, K, cache,
                              split="train")
    split = {k: "train" for k in base}
    return TrainResult(res.x, report, res.trace, EvalReport(base, split))


def score_functional(model: Mlp, theta: np.ndarray, data: list[TrajectoryData], steps: int,
                     cache: PropagatorCache, split: str = "test") -> EvalReport:
    mse, labels = {}, {}
    for d in data:
        if d.ref.shape[0] < steps + 1:
            raise ValueError(f"{d.label}: reference has {d.ref.shape[0]} frames, "
                             f"rollout needs {steps + 1}")
        traj = propagate_functional(d.pair.phi0, d.pair.phi1, model, theta, steps, cache)
        mse[d.label] = trajectory_mse(traj.states, d.ref[: steps + 1])
        labels[d.label] = split
    return EvalReport(mse, labels)


def rollout_functional(model: Mlp, theta: np.ndarray, pair: KsInitialPair, steps: int,
                       cache: PropagatorCache):
    """Predicted trajectory over ``steps`` coarse steps.

    Extra steps beyond the training horizon are produced by propagating from
    the initial pair; the dynamics are deterministic, so the training part is
    bit-identical to the stored training trajectory.
    """
    if pair is None:
        raise ValueError("no exact initial pair for this momentum")
    return propagate_functional(pair.phi0, pair.phi1, model, theta, steps, cache)


def rollout_and_score(params: np.ndarray, data: list[TrajectoryData], grid: GridSpec,
                      extra_steps: int = 0, model: Mlp | None = None,
                      train_labels=(), cache: PropagatorCache | None = None):
    """Propagate learned parameters and score against references.

    ``model=None`` means ``params`` is a pointwise correlation grid (no
    extrapolation possible in that case).  Returns ``(report, trajectories)``.
    """
    if model is None and extra_steps:
        raise ValueError("a pointwise correlation grid cannot be extrapolated")
    cache = cache or build_cache(grid)
    steps = grid.K + extra_steps
    mse, split, trajs = {}, {}, {}
    for d in data:
        if d.pair is None:
            raise ValueError(f"{d.label}: missing exact initial pair")
        if d.ref.shape[0] < steps + 1:
            raise ValueError(f"{d.label}: reference covers {d.ref.shape[0] - 1} steps, "
                             f"rollout needs {steps}")
        if model is None:
            traj = propagate_pointwise(d.pair.phi0, params.reshape(grid.K + 1, grid.J + 1),
                                       cache)
        else:
            traj = rollout_functional(model, params, d.pair, steps, cache)
        trajs[d.label] = traj
        mse[d.label] = trajectory_mse(traj.states, d.ref[: steps + 1])
        split[d.label] = "train" if d.label in train_labels else "test"
    return EvalReport(mse, split), trajs
