"""Limited-memory BFGS with a strong-Wolfe line search.

Unconstrained and deterministic.  The callback returns ``(f, grad)``; a
non-finite ``f`` at a trial point is treated as "step too long" by the line
search rather than as an error.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class LbfgsOptions:
    memory: int = 10
    grad_tol: float = 1e-6        # on max |g|
    rel_f_tol: float = 2.22e-9    # (f_old - f_new) / max(|f_old|, |f_new|, 1)
    max_iter: int = 1000
    c1: float = 1e-4
    c2: float = 0.9
    max_ls_evals: int = 20

    def __post_init__(self):
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("need 0 < c1 < c2 < 1")
        if self.memory < 1:
            raise ValueError("memory must be >= 1")


@dataclass
class IterRecord:
    iter: int
    f: float
    gnorm: float
    step: float
    evals: int

    def line(self) -> str:
        return f"{self.iter} {self.f:.17g} {self.gnorm:.6e} {self.step:.6e} {self.evals}"


@dataclass
class OptimTrace:
    records: list[IterRecord] = field(default_factory=list)
    reason: str = ""
    n_evals: int = 0

    @property
    def f(self) -> np.ndarray:
        return np.array([r.f for r in self.records])

    def is_monotone(self) -> bool:
        f = self.f
        return bool(np.all(np.diff(f) <= 0))


@dataclass
class OptimResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    trace: OptimTrace
    reason: str


def _cubic_min(a, fa, da, b, fb, db):
    """Minimizer of the cubic interpolating (a, fa, da) and (b, fb, db), or None."""
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - da * db
    if disc < 0:
        return None
    d2 = math.copysign(math.sqrt(disc), b - a)
    denom = db - da + 2.0 * d2
    if denom == 0:
        return None
    t = b - (b - a) * (db + d2 - d1) / denom
    return t if math.isfinite(t) else None


class _LineSearchFailed(Exception):
    pass


def strong_wolfe(fun, x, f0, g0, d, alpha0, opts: LbfgsOptions, counter):
    """Find ``alpha`` with sufficient decrease and ``|phi'(alpha)| <= c2 |phi'(0)|``.

    Bracketing followed by zoom with safeguarded cubic interpolation.
    Returns ``(alpha, f, g)``.
    """
    dphi0 = float(g0 @ d)
    if not dphi0 < 0:
        raise _LineSearchFailed("not a descent direction")
    c1, c2 = opts.c1, opts.c2

    def phi(a):
        if counter[0] >= opts.max_ls_evals:
            raise _LineSearchFailed("too many function evaluations")
        counter[0] += 1
        f, g = fun(x + a * d)
        f = float(f)
        if not math.isfinite(f):
            return math.inf, None, math.nan
        return f, g, float(g @ d)

    def zoom(lo, hi):
        a_lo, f_lo, g_lo, d_lo = lo
        a_hi, f_hi, d_hi = hi
        while True:
            a = None
            if math.isfinite(f_hi) and math.isfinite(d_hi):
                a = _cubic_min(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi)
            lo_b, hi_b = min(a_lo, a_hi), max(a_lo, a_hi)
            margin = 0.1 * (hi_b - lo_b)
            if a is None or not (lo_b + margin <= a <= hi_b - margin):
                a = 0.5 * (a_lo + a_hi)
            if hi_b - lo_b <= 1e-16 * max(1.0, hi_b):
                raise _LineSearchFailed("bracket collapsed")
            f, g, dd = phi(a)
            if f > f0 + c1 * a * dphi0 or f >= f_lo:
                a_hi, f_hi, d_hi = a, f, dd
            else:
                if abs(dd) <= -c2 * dphi0:
                    return a, f, g
                if dd * (a_hi - a_lo) >= 0:
                    a_hi, f_hi, d_hi = a_lo, f_lo, d_lo
                a_lo, f_lo, g_lo, d_lo = a, f, g, dd

    a_prev, f_prev, g_prev, d_prev = 0.0, f0, g0, dphi0
    a = alpha0
    for i in range(opts.max_ls_evals):
        f, g, dd = phi(a)
        if f > f0 + c1 * a * dphi0 or (i > 0 and f >= f_prev):
            return zoom((a_prev, f_prev, g_prev, d_prev), (a, f, dd))
        if abs(dd) <= -c2 * dphi0:
            return a, f, g
        if dd >= 0:
            return zoom((a, f, g, dd), (a_prev, f_prev, d_prev))
        a_prev, f_prev, g_prev, d_prev = a, f, g, dd
        a = 2.0 * a
    raise _LineSearchFailed("no bracket found")


@dataclass
class LbfgsMemory:
    """Curvature pairs and iteration counter; pass one in to resume a run exactly."""
    S: list = field(default_factory=list)
    Y: list = field(default_factory=list)
    iteration: int = 0

    def push(self, s, y, sy, limit):
        self.S.append(s)
        self.Y.append(y)
        if len(self.S) > limit:
            del self.S[0], self.Y[0]

    def clear(self):
        self.S.clear()
        self.Y.clear()

    @property
    def rho(self):
        return [1.0 / float(s @ y) for s, y in zip(self.S, self.Y)]


def _two_loop(g, S, Y, rho):
    q = g.copy()
    alphas = []
    for s, y, r in zip(reversed(S), reversed(Y), reversed(rho)):
        a = r * (s @ q)
        alphas.append(a)
        q -= a * y
    if S:
        s, y = S[-1], Y[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, r), a in zip(zip(S, Y, rho), reversed(alphas)):
        b = r * (y @ q)
        q += (a - b) * s
    return -q


def minimize(fun: Callable[[np.ndarray], tuple[float, np.ndarray]], x0: np.ndarray,
             opts: LbfgsOptions | None = None, callback=None,
             memory: LbfgsMemory | None = None) -> OptimResult:
    """Minimize ``fun`` from ``x0``.

    ``callback(iter, x, f, g, record)`` runs after every accepted iteration;
    returning ``True`` from it stops the run with reason ``"callback"``.
    ``memory`` is updated in place, so a caller can save it and later resume
    with the same curvature pairs and iteration numbering.
    Termination reasons: ``grad_tol``, ``rel_f_tol``, ``max_iter``,
    ``line_search``, ``nan``, ``callback``.
    """
    opts = opts or LbfgsOptions()
    mem = memory if memory is not None else LbfgsMemory()
    x = np.array(x0, dtype=float, copy=True)
    if not np.all(np.isfinite(x)):
        raise ValueError("x0 has non-finite entries")
    trace = OptimTrace()
    f, g = fun(x)
    f = float(f)
    trace.n_evals = 1
    if not math.isfinite(f):
        trace.reason = "nan"
        log.error("objective is not finite at the starting point")
        return OptimResult(x, f, g, trace, "nan")
    trace.records.append(IterRecord(mem.iteration, f, float(np.max(np.abs(g))), 0.0, 1))
    reason = "max_iter"
    restarted = False
    start = mem.iteration
    while True:
        gnorm = float(np.max(np.abs(g)))
        if gnorm <= opts.grad_tol:
            reason = "grad_tol"
            break
        if mem.iteration - start >= opts.max_iter:
            reason = "max_iter"
            break
        d = _two_loop(g, mem.S, mem.Y, mem.rho)
        alpha0 = 1.0 if mem.S else min(1.0, 1.0 / float(np.linalg.norm(d)))
        if not float(g @ d) < 0:
            mem.clear()
            d = -g
            alpha0 = min(1.0, 1.0 / float(np.linalg.norm(d)))
        counter = [0]
        try:
            alpha, f_new, g_new = strong_wolfe(fun, x, f, g, d, alpha0, opts, counter)
        except _LineSearchFailed as exc:
            trace.n_evals += counter[0]
            if mem.S and not restarted:
                log.info("line search failed (%s); clearing memory", exc)
                mem.clear()
                restarted = True
                continue
            log.warning("line search failed after restart: %s", exc)
            reason = "line_search"
            break
        trace.n_evals += counter[0]
        restarted = False
        mem.iteration += 1
        s = alpha * d
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            mem.push(s, y, sy, opts.memory)
        f_old = f
        x, f, g = x + s, f_new, g_new
        rec = IterRecord(mem.iteration, f, float(np.max(np.abs(g))), alpha, counter[0])
        trace.records.append(rec)
        log.info(rec.line())
        if callback is not None and callback(mem.iteration, x, f, g, rec):
            reason = "callback"
            break
        if (f_old - f) <= opts.rel_f_tol * max(abs(f_old), abs(f), 1.0):
            reason = "rel_f_tol"
            break
    trace.reason = reason
    return OptimResult(x, f, g, trace, reason)
