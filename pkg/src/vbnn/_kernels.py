"""Hot contraction kernels with numba-jitted and pure-numpy backends.

Every sweep spends most of its time contracting stacks of per-observation
moment matrices.  The numba path fuses those loops; the numpy path uses
einsum and is selected with ``VBNN_NUMBA=0`` (or automatically when numba
is unavailable).  Both backends compute identical quantities; a test pins
them together and ``benchmarks/bench_kernels.py`` compares their speed.
"""

from __future__ import annotations

import os

import numpy as np

_flag = os.environ.get("VBNN_NUMBA", "auto").strip().lower()
_want_numba = _flag not in ("0", "false", "no", "off")

USE_NUMBA = False
if _want_numba:
    try:
        import numba

        USE_NUMBA = True
    except ImportError:  # pragma: no cover - exercised via env flag instead
        USE_NUMBA = False


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------

def _pair_traces_np(w2, eaat):
    # w2: (D, P, P) symmetric, eaat: (N, P, P) symmetric -> (N, D)
    return np.einsum("dpq,npq->nd", w2, eaat, optimize=True)


def _weighted_outer_np(w, eaat):
    # w: (N, D), eaat: (N, P, P) -> (D, P, P): sum_n w[n,d] * eaat[n]
    return np.einsum("nd,npq->dpq", w, eaat, optimize=True)


def _weighted_cross_np(w, cross):
    # w: (N, D), cross: (N, D, P) -> (D, P): sum_n w[n,d] * cross[n,d,:]
    return np.einsum("nd,ndp->dp", w, cross, optimize=True)


def _weighted_vec_np(w, v):
    # w: (N, D), v: (N, P) -> (D, P): sum_n w[n,d] * v[n,:]
    return np.einsum("nd,np->dp", w, v, optimize=True)


def _coef_mix_np(coef, w2):
    # coef: (N, D), w2: (D, P, P) -> (N, P, P): sum_d coef[n,d] * w2[d]
    return np.einsum("nd,dpq->npq", coef, w2, optimize=True)


def _aug_outer_np(ea, cov):
    # ea: (N, D), cov: (N, D, D) -> (N, D+1, D+1) second moment of (1, a)
    n, d = ea.shape
    out = np.empty((n, d + 1, d + 1))
    out[:, 0, 0] = 1.0
    out[:, 0, 1:] = ea
    out[:, 1:, 0] = ea
    out[:, 1:, 1:] = cov + ea[:, :, None] * ea[:, None, :]
    return out


if USE_NUMBA:
    from numba import njit

    @njit(cache=True)
    def _pair_traces_nb(w2, eaat):
        n = eaat.shape[0]
        d = w2.shape[0]
        p = w2.shape[1]
        out = np.empty((n, d))
        for i in range(n):
            for j in range(d):
                acc = 0.0
                for a in range(p):
                    for b in range(p):
                        acc += w2[j, a, b] * eaat[i, a, b]
                out[i, j] = acc
        return out

    @njit(cache=True)
    def _weighted_outer_nb(w, eaat):
        n, d = w.shape
        p = eaat.shape[1]
        out = np.zeros((d, p, p))
        for i in range(n):
            for j in range(d):
                wij = w[i, j]
                for a in range(p):
                    for b in range(p):
                        out[j, a, b] += wij * eaat[i, a, b]
        return out

    @njit(cache=True)
    def _weighted_cross_nb(w, cross):
        n, d, p = cross.shape
        out = np.zeros((d, p))
        for i in range(n):
            for j in range(d):
                wij = w[i, j]
                for a in range(p):
                    out[j, a] += wij * cross[i, j, a]
        return out

    @njit(cache=True)
    def _weighted_vec_nb(w, v):
        n, d = w.shape
        p = v.shape[1]
        out = np.zeros((d, p))
        for i in range(n):
            for j in range(d):
                wij = w[i, j]
                for a in range(p):
                    out[j, a] += wij * v[i, a]
        return out

    @njit(cache=True)
    def _coef_mix_nb(coef, w2):
        n, d = coef.shape
        p = w2.shape[1]
        out = np.zeros((n, p, p))
        for i in range(n):
            for j in range(d):
                c = coef[i, j]
                for a in range(p):
                    for b in range(p):
                        out[i, a, b] += c * w2[j, a, b]
        return out

    @njit(cache=True)
    def _aug_outer_nb(ea, cov):
        n, d = ea.shape
        out = np.empty((n, d + 1, d + 1))
        for i in range(n):
            out[i, 0, 0] = 1.0
            for a in range(d):
                out[i, 0, a + 1] = ea[i, a]
                out[i, a + 1, 0] = ea[i, a]
                for b in range(d):
                    out[i, a + 1, b + 1] = cov[i, a, b] + ea[i, a] * ea[i, b]
        return out

    pair_traces = _pair_traces_nb
    weighted_outer = _weighted_outer_nb
    weighted_cross = _weighted_cross_nb
    weighted_vec = _weighted_vec_nb
    coef_mix = _coef_mix_nb
    aug_outer = _aug_outer_nb
else:
    pair_traces = _pair_traces_np
    weighted_outer = _weighted_outer_np
    weighted_cross = _weighted_cross_np
    weighted_vec = _weighted_vec_np
    coef_mix = _coef_mix_np
    aug_outer = _aug_outer_np

NUMPY_IMPLS = {
    "pair_traces": _pair_traces_np,
    "weighted_outer": _weighted_outer_np,
    "weighted_cross": _weighted_cross_np,
    "weighted_vec": _weighted_vec_np,
    "coef_mix": _coef_mix_np,
    "aug_outer": _aug_outer_np,
}

ACTIVE_IMPLS = {
    "pair_traces": pair_traces,
    "weighted_outer": weighted_outer,
    "weighted_cross": weighted_cross,
    "weighted_vec": weighted_vec,
    "coef_mix": coef_mix,
    "aug_outer": aug_outer,
}
