"""Numerical hot kernels with a numba fast path and a pure-numpy fallback.

The backend is chosen once at import time from the environment variable
``ENTROFLOW_BACKEND``:

* ``auto`` (default): numba if importable, else numpy,
* ``numba``: require numba, fail loudly if missing,
* ``numpy``: force the pure-numpy path even when numba is installed.

Both paths implement identical summation orders per output entry
(max-subtracted log-sum-exp, left-to-right accumulation), so results agree
to the last few ulps; each backend is bitwise deterministic run-to-run.
``benchmarks/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

import os

import numpy as np

_ENV_FLAG = "ENTROFLOW_BACKEND"


def _requested_backend() -> str:
    val = os.environ.get(_ENV_FLAG, "auto").strip().lower()
    if val not in ("auto", "numba", "numpy"):
        raise ValueError(
            f"{_ENV_FLAG} must be one of auto|numba|numpy, got {val!r}"
        )
    return val


_HAS_NUMBA = False
if _requested_backend() != "numpy":
    try:
        from numba import njit

        _HAS_NUMBA = True
    except ImportError:
        if _requested_backend() == "numba":
            raise
        _HAS_NUMBA = False

USE_NUMBA = _HAS_NUMBA and _requested_backend() != "numpy"
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# pure-numpy implementations
# ---------------------------------------------------------------------------

def logsumexp_trailing_np(ex: np.ndarray) -> np.ndarray:
    """Log-sum-exp over all axes but the first, safe for -inf entries."""
    flat = ex.reshape(ex.shape[0], -1)
    m = np.max(flat, axis=1)
    out = np.full(ex.shape[0], -np.inf)
    ok = np.isfinite(m)
    if np.any(ok):
        s = np.sum(np.exp(flat[ok] - m[ok, None]), axis=1)
        out[ok] = m[ok] + np.log(s)
    return out


def lse_contract_2_np(cp: np.ndarray, b: np.ndarray) -> np.ndarray:
    """out[i] = log sum_j exp(b[j] - cp[i, j])."""
    return logsumexp_trailing_np(b[None, :] - cp)


def lse_contract_3_np(cp: np.ndarray, b1: np.ndarray, b2: np.ndarray) -> np.ndarray:
    """out[i] = log sum_{j,k} exp(b1[j] + b2[k] - cp[i, j, k])."""
    ex = (b1[:, None] + b2[None, :])[None, :, :] - cp
    return logsumexp_trailing_np(ex)


def _bernoulli_np(x: np.ndarray) -> np.ndarray:
    """B(x) = x / (e^x - 1), the Scharfetter-Gummel weight, B(0) = 1."""
    out = np.empty_like(x)
    small = np.abs(x) < 1e-5
    xs = x[small]
    out[small] = 1.0 - xs / 2.0 + xs * xs / 12.0
    xl = x[~small]
    out[~small] = xl / np.expm1(xl)
    return out


def fv_step_np(w: np.ndarray, v_face: np.ndarray, alpha: float,
               dt: float, h: float) -> np.ndarray:
    """One explicit finite-volume step with no-flux boundaries.

    ``v_face`` holds transport velocities on the n+1 cell faces (entries 0
    and n are ignored: zero flux).  alpha > 0 uses the Scharfetter-Gummel
    exponential-fitting flux, which reduces to upwind + centered diffusion
    in the respective limits; alpha == 0 is plain upwind.
    """
    v = v_face[1:-1]
    wl = w[:-1]
    wr = w[1:]
    if alpha > 0.0:
        lam = v * h / alpha
        flux = (alpha / (h * h)) * (_bernoulli_np(-lam) * wl - _bernoulli_np(lam) * wr)
    else:
        flux = (np.maximum(v, 0.0) * wl + np.minimum(v, 0.0) * wr) / h
    out = w.copy()
    out[:-1] -= dt * flux
    out[1:] += dt * flux
    return out


# ---------------------------------------------------------------------------
# numba implementations (compiled lazily at first call, cached on disk)
# ---------------------------------------------------------------------------

if _HAS_NUMBA:

    @njit(cache=True)
    def _lse_contract_2_nb(cp, b):  # pragma: no cover - exercised via dispatch
        n0, n1 = cp.shape
        out = np.empty(n0)
        for i in range(n0):
            m = -np.inf
            for j in range(n1):
                v = b[j] - cp[i, j]
                if v > m:
                    m = v
            if m == -np.inf:
                out[i] = -np.inf
                continue
            s = 0.0
            for j in range(n1):
                s += np.exp(b[j] - cp[i, j] - m)
            out[i] = m + np.log(s)
        return out

    @njit(cache=True)
    def _lse_contract_3_nb(cp, b1, b2):  # pragma: no cover
        n0, n1, n2 = cp.shape
        out = np.empty(n0)
        for i in range(n0):
            m = -np.inf
            for j in range(n1):
                for k in range(n2):
                    v = b1[j] + b2[k] - cp[i, j, k]
                    if v > m:
                        m = v
            if m == -np.inf:
                out[i] = -np.inf
                continue
            s = 0.0
            for j in range(n1):
                for k in range(n2):
                    s += np.exp(b1[j] + b2[k] - cp[i, j, k] - m)
            out[i] = m + np.log(s)
        return out

    @njit(cache=True)
    def _bernoulli_nb(x):  # pragma: no cover
        if abs(x) < 1e-5:
            return 1.0 - x / 2.0 + x * x / 12.0
        return x / np.expm1(x)

    @njit(cache=True)
    def _fv_step_nb(w, v_face, alpha, dt, h):  # pragma: no cover
        n = w.shape[0]
        out = w.copy()
        for f in range(1, n):
            v = v_face[f]
            if alpha > 0.0:
                lam = v * h / alpha
                flux = (alpha / (h * h)) * (
                    _bernoulli_nb(-lam) * w[f - 1] - _bernoulli_nb(lam) * w[f]
                )
            else:
                up = v * w[f - 1] if v > 0.0 else v * w[f]
                flux = up / h
            out[f - 1] -= dt * flux
            out[f] += dt * flux
        return out


if USE_NUMBA:
    lse_contract_2 = _lse_contract_2_nb
    lse_contract_3 = _lse_contract_3_nb
    fv_step = _fv_step_nb
else:
    lse_contract_2 = lse_contract_2_np
    lse_contract_3 = lse_contract_3_np
    fv_step = fv_step_np
