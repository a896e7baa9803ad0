"""Dense SELU networks mapping (phi_k, phi_{k-1}) to a correlation potential.

Two input conventions:

* ``PHI``: ``[Re phi, Im phi, Re phi', Im phi']`` (width ``4(J+1)``)
* ``DENSITY``: ``[n, n']`` with ``n = 2|phi|^2`` (width ``2(J+1)``)

Hidden layers use SELU, the output layer is affine.  Reverse-mode products
are hand-written; parameters travel as one flat vector in the canonical
order ``W_1, b_1, W_2, b_2, ...`` (weights row-major, shape ``(out, in)``).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .tdks import array_digest, ks_density

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772


class ModelKind(str, enum.Enum):
    PHI = "phi"
    DENSITY = "density"

    @classmethod
    def parse(cls, s) -> "ModelKind":
        if isinstance(s, cls):
            return s
        s = str(s).lower()
        aliases = {"phimemory": "phi", "densitymemory": "density", "n": "density"}
        return cls(aliases.get(s, s))


def selu(z):
    return SELU_LAMBDA * np.where(z > 0, z, SELU_ALPHA * np.expm1(np.minimum(z, 0.0)))


def selu_grad(z):
    # slope at exactly 0 taken from the positive branch
    return SELU_LAMBDA * np.where(z >= 0, 1.0, SELU_ALPHA * np.exp(np.minimum(z, 0.0)))


@dataclass(frozen=True)
class Mlp:
    kind: ModelKind
    n_points: int                       # J + 1
    hidden: tuple[int, ...] = (256, 256, 256)

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind.parse(self.kind))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def n_in(self) -> int:
        return (4 if self.kind is ModelKind.PHI else 2) * self.n_points

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.n_in, *self.hidden, self.n_points)

    @property
    def shapes(self) -> list[tuple[tuple[int, int], tuple[int]]]:
        w = self.widths
        return [((w[i + 1], w[i]), (w[i + 1],)) for i in range(len(w) - 1)]

    @property
    def n_params(self) -> int:
        return sum(a * b + c for (a, b), (c,) in self.shapes)

    def unflatten(self, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        theta = np.asarray(theta)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        out, i = [], 0
        for (m, n), _ in self.shapes:
            W = theta[i:i + m * n].reshape(m, n)
            i += m * n
            b = theta[i:i + m]
            i += m
            out.append((W, b))
        return out

    @staticmethod
    def flatten(layers) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in layers])

    def init_params(self, seed: int = 0, sigma: float = 0.01) -> np.ndarray:
        """I.i.d. Normal(0, sigma^2) weights and biases from a counter-based generator.

        Each array gets its own Philox stream keyed by ``(seed, 2*layer + is_bias)``,
        so an entry depends only on the seed, its layer and its position.
        """
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        layers = []
        for li, (wshape, bshape) in enumerate(self.shapes):
            arrs = []
            for which, shape in enumerate((wshape, bshape)):
                rng = np.random.Generator(np.random.Philox(key=[int(seed), 2 * li + which]))
                arrs.append(sigma * rng.standard_normal(shape))
            layers.append(tuple(arrs))
        return self.flatten(layers)

    def inputs(self, phi: np.ndarray, phi_prev: np.ndarray) -> np.ndarray:
        if self.kind is ModelKind.PHI:
            return np.concatenate([phi.real, phi.imag, phi_prev.real, phi_prev.imag])
        return np.concatenate([ks_density(phi), ks_density(phi_prev)])

    def _forward(self, x, layers):
        zs, acts = [], [x]
        a = x
        for i, (W, b) in enumerate(layers):
            z = W @ a + b
            if i < len(layers) - 1:
                zs.append(z)
                a = selu(z)
                acts.append(a)
            else:
                a = z
        return a, zs, acts

    def forward(self, phi, phi_prev, params) -> np.ndarray:
        layers = self.unflatten(params) if isinstance(params, np.ndarray) else params
        return self._forward(self.inputs(phi, phi_prev), layers)[0]

    def vjp(self, phi, phi_prev, params, cot, need_params: bool = True):
        """Reverse-mode products of ``cot . forward`` with respect to inputs and parameters.

        Returns ``(d_re, d_im, d_prev_re, d_prev_im, d_theta)``; ``d_theta`` is
        ``None`` when ``need_params`` is false.
        """
        layers = self.unflatten(params) if isinstance(params, np.ndarray) else params
        x = self.inputs(phi, phi_prev)
        _, zs, acts = self._forward(x, layers)
        g = np.asarray(cot, dtype=float)
        grads = []
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            if need_params:
                grads.append((np.outer(g, acts[i]), g.copy()))
            g = W.T @ g
            if i > 0:
                g = g * selu_grad(zs[i - 1])
        d_theta = self.flatten(grads[::-1]) if need_params else None
        n = self.n_points
        if self.kind is ModelKind.PHI:
            d = (g[:n], g[n:2 * n], g[2 * n:3 * n], g[3 * n:])
        else:
            gn, gp = g[:n], g[n:]
            d = (4.0 * phi.real * gn, 4.0 * phi.imag * gn,
                 4.0 * phi_prev.real * gp, 4.0 * phi_prev.imag * gp)
        return (*d, d_theta)

    def vjp_inputs(self, phi, phi_prev, params, cot):
        return self.vjp(phi, phi_prev, params, cot, need_params=False)[:4]

    def vjp_params(self, phi, phi_prev, params, cot) -> np.ndarray:
        return self.vjp(phi, phi_prev, params, cot)[4]

    def digest(self, theta, phi0, phi1) -> str:
        return array_digest(theta, phi0, phi1,
                            extra=f"functional:{self.kind.value}:{self.widths}")

    def manifest(self) -> dict:
        return {"kind": self.kind.value, "n_points": self.n_points,
                "hidden": list(self.hidden), "widths": list(self.widths),
                "n_params": self.n_params,
                "selu": {"lambda": SELU_LAMBDA, "alpha": SELU_ALPHA},
                "bias_init": "normal"}

    @classmethod
    def from_manifest(cls, m: dict) -> "Mlp":
        return cls(ModelKind.parse(m["kind"]), int(m["n_points"]), tuple(m["hidden"]))


def init_params(seed: int, sigma: float, kind, J: int, hidden=(256, 256, 256)):
    model = Mlp(ModelKind.parse(kind), J + 1, tuple(hidden))
    return model, model.init_params(seed, sigma)
