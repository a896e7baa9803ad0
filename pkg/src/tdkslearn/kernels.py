"""Hot loops of the two-electron solver.

Each kernel exists twice: a numba ``@njit`` version and a pure-numpy version.
The numba path is used when numba imports and ``TDKSLEARN_DISABLE_NUMBA`` is
unset (or "0").  Both paths are always importable so they can be compared.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("TDKSLEARN_DISABLE_NUMBA", "0") in ("", "0")

if HAVE_NUMBA and os.environ.get("TDKSLEARN_NUM_THREADS"):
    numba.set_num_threads(int(os.environ["TDKSLEARN_NUM_THREADS"]))


# ---------------------------------------------------------------- numpy path

def _laplacian2d_numpy(psi, c0, c1, c2):
    # rows and columns summed separately so that psi -> psi.T commutes exactly
    r = c0 * psi
    r[1:, :] += c1 * psi[:-1, :]
    r[:-1, :] += c1 * psi[1:, :]
    r[2:, :] += c2 * psi[:-2, :]
    r[:-2, :] += c2 * psi[2:, :]
    s = c0 * psi
    s[:, 1:] += c1 * psi[:, :-1]
    s[:, :-1] += c1 * psi[:, 1:]
    s[:, 2:] += c2 * psi[:, :-2]
    s[:, :-2] += c2 * psi[:, 2:]
    return r + s


def _kinetic_taylor_numpy(psi, tau, c0, c1, c2, order):
    """sum_{j<=order} (tau * L)^j / j! psi, with L the 2D Laplacian stencil."""
    out = psi.copy()
    term = psi
    for j in range(1, order + 1):
        term = _laplacian2d_numpy(term, c0, c1, c2)
        term *= tau / j
        out += term
    return out


def _split_step_numpy(psi, phase, tau, c0, c1, c2, order):
    psi = _kinetic_taylor_numpy(psi, tau, c0, c1, c2, order)
    psi *= phase
    return _kinetic_taylor_numpy(psi, tau, c0, c1, c2, order)


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _laplacian_real(f, out, c0, c1, c2):
        # f is the float64 view of a C-ordered complex array, so column
        # neighbours sit 2 apart.  Rows and columns are summed separately
        # so that psi -> psi.T commutes exactly.
        n0, m = f.shape
        for a in range(n0):
            for b in range(m):
                s0 = c0 * f[a, b]
                if a >= 1:
                    s0 += c1 * f[a - 1, b]
                if a + 1 < n0:
                    s0 += c1 * f[a + 1, b]
                if a >= 2:
                    s0 += c2 * f[a - 2, b]
                if a + 2 < n0:
                    s0 += c2 * f[a + 2, b]
                s1 = c0 * f[a, b]
                if b >= 2:
                    s1 += c1 * f[a, b - 2]
                if b + 2 < m:
                    s1 += c1 * f[a, b + 2]
                if b >= 4:
                    s1 += c2 * f[a, b - 4]
                if b + 4 < m:
                    s1 += c2 * f[a, b + 4]
                out[a, b] = s0 + s1

    @njit(cache=True)
    def _scale_accumulate(lap, term, acc, s_re, s_im):
        # term = (s_re + i s_im) * lap ; acc += term   (float views, pairs re/im)
        n0, m = lap.shape
        for a in range(n0):
            for b in range(0, m, 2):
                lr = lap[a, b]
                li = lap[a, b + 1]
                tr = s_re * lr - s_im * li
                ti = s_re * li + s_im * lr
                term[a, b] = tr
                term[a, b + 1] = ti
                acc[a, b] += tr
                acc[a, b + 1] += ti

    @njit(cache=True)
    def _multiply_phase(f, ph):
        n0, m = f.shape
        for a in range(n0):
            for b in range(0, m, 2):
                pr = ph[a, b]
                pi = ph[a, b + 1]
                re = f[a, b]
                im = f[a, b + 1]
                f[a, b] = re * pr - im * pi
                f[a, b + 1] = re * pi + im * pr

    def _laplacian2d_into(psi, out, c0, c1, c2):
        _laplacian_real(psi.view(np.float64), out.view(np.float64), c0, c1, c2)

    def _kinetic_taylor_numba(psi, tau, c0, c1, c2, order):
        out = np.array(psi, dtype=np.complex128, order="C", copy=True)
        term = out.copy()
        lap = np.empty_like(out)
        acc, tv, lv = out.view(np.float64), term.view(np.float64), lap.view(np.float64)
        for j in range(1, order + 1):
            s = tau / j
            _laplacian_real(tv, lv, c0, c1, c2)
            _scale_accumulate(lv, tv, acc, s.real, s.imag)
        return out

    def _split_step_numba(psi, phase, tau, c0, c1, c2, order):
        psi = _kinetic_taylor_numba(psi, tau, c0, c1, c2, order)
        phase = np.ascontiguousarray(phase, dtype=np.complex128)
        _multiply_phase(psi.view(np.float64), phase.view(np.float64))
        return _kinetic_taylor_numba(psi, tau, c0, c1, c2, order)

else:  # pragma: no cover
    _kinetic_taylor_numba = _kinetic_taylor_numpy
    _split_step_numba = _split_step_numpy


def kinetic_taylor(psi, tau, coeffs, order=4, use_numba=None):
    """Truncated Taylor series of ``exp(tau * Laplacian_2d)`` applied to ``psi``.

    ``tau`` is complex; for a kinetic half step it is ``+i*dt/4`` because
    ``-i*K*dt/2 = i*dt/4 * Laplacian``.
    """
    c0, c1, c2 = coeffs
    use = USE_NUMBA if use_numba is None else (use_numba and HAVE_NUMBA)
    fn = _kinetic_taylor_numba if use else _kinetic_taylor_numpy
    return fn(psi, complex(tau), float(c0), float(c1), float(c2), int(order))


def split_step(psi, phase, tau, coeffs, order=4, use_numba=None):
    """One ``P_K P_V P_K`` step on a 2D grid.  ``phase`` is the diagonal ``exp(-i V dt)``."""
    c0, c1, c2 = coeffs
    use = USE_NUMBA if use_numba is None else (use_numba and HAVE_NUMBA)
    fn = _split_step_numba if use else _split_step_numpy
    return fn(psi, phase, complex(tau), float(c0), float(c1), float(c2), int(order))


def laplacian2d(psi, coeffs, use_numba=None):
    c0, c1, c2 = coeffs
    use = USE_NUMBA if use_numba is None else (use_numba and HAVE_NUMBA)
    if use:
        psi = np.ascontiguousarray(psi, dtype=np.complex128)
        out = np.empty_like(psi)
        _laplacian2d_into(psi, out, float(c0), float(c1), float(c2))
        return out
    return _laplacian2d_numpy(psi, c0, c1, c2)
