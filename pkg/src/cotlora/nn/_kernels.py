"""Row-wise numeric kernels for the toy transformer.

Each kernel exists twice: a numba ``@njit`` loop version and a vectorized
numpy version. Set ``COTLORA_NUMBA=0`` to force the numpy path (also used
automatically when numba is not importable). Matrix products are left to
numpy/BLAS in both paths.

All kernels take 2-D C-contiguous float64 arrays whose last axis is the
reduction axis; callers reshape.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

ENV_FLAG = "COTLORA_NUMBA"


def numba_requested() -> bool:
    return os.environ.get(ENV_FLAG, "1").strip().lower() not in ("0", "false", "no", "off")


# --- numpy reference path ------------------------------------------------


def np_causal_softmax(scores: np.ndarray, seq_len: int) -> np.ndarray:
    """Softmax over the last axis of ``(rows, L)`` where row ``i`` sees keys ``<= i % seq_len``."""
    rows, n = scores.shape
    q_pos = np.arange(rows) % seq_len
    masked = np.where(np.arange(n)[None, :] <= q_pos[:, None], scores, -np.inf)
    shifted = masked - masked.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def np_softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    return p * (dp - (p * dp).sum(axis=1, keepdims=True))


def np_rmsnorm_forward(x: np.ndarray, w: np.ndarray, eps: float):
    inv = 1.0 / np.sqrt((x * x).mean(axis=1) + eps)
    return x * inv[:, None] * w[None, :], inv


def np_rmsnorm_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray, inv: np.ndarray) -> np.ndarray:
    n = x.shape[1]
    g = dy * w[None, :]
    dot = (g * x).sum(axis=1)
    return inv[:, None] * g - (inv**3 * dot / n)[:, None] * x


def np_swiglu_forward(gate: np.ndarray, up: np.ndarray) -> np.ndarray:
    sig = 1.0 / (1.0 + np.exp(-gate))
    return gate * sig * up


def np_swiglu_backward(dh: np.ndarray, gate: np.ndarray, up: np.ndarray):
    sig = 1.0 / (1.0 + np.exp(-gate))
    silu = gate * sig
    dgate = dh * up * (sig * (1.0 + gate * (1.0 - sig)))
    dup = dh * silu
    return dgate, dup


def np_cross_entropy(logits: np.ndarray, targets: np.ndarray, weights: np.ndarray):
    """Weighted summed NLL over rows and its gradient w.r.t. ``logits``."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1)
    rows = np.arange(logits.shape[0])
    nll = np.log(z) - shifted[rows, targets]
    loss = float((nll * weights).sum())
    grad = e / z[:, None]
    grad[rows, targets] -= 1.0
    grad *= weights[:, None]
    return loss, grad


# --- numba path ----------------------------------------------------------

if numba is not None:
    _jit = numba.njit(cache=True, fastmath=False)

    @_jit
    def nb_causal_softmax(scores, seq_len):
        rows, n = scores.shape
        out = np.zeros_like(scores)
        for r in range(rows):
            last = r % seq_len
            m = -np.inf
            for j in range(last + 1):
                if scores[r, j] > m:
                    m = scores[r, j]
            s = 0.0
            for j in range(last + 1):
                e = math.exp(scores[r, j] - m)
                out[r, j] = e
                s += e
            for j in range(last + 1):
                out[r, j] /= s
        return out

    @_jit
    def nb_softmax_backward(p, dp):
        rows, n = p.shape
        out = np.empty_like(p)
        for r in range(rows):
            dot = 0.0
            for j in range(n):
                dot += p[r, j] * dp[r, j]
            for j in range(n):
                out[r, j] = p[r, j] * (dp[r, j] - dot)
        return out

    @_jit
    def nb_rmsnorm_forward(x, w, eps):
        rows, n = x.shape
        y = np.empty_like(x)
        inv = np.empty(rows)
        for r in range(rows):
            ss = 0.0
            for j in range(n):
                ss += x[r, j] * x[r, j]
            iv = 1.0 / math.sqrt(ss / n + eps)
            inv[r] = iv
            for j in range(n):
                y[r, j] = x[r, j] * iv * w[j]
        return y, inv

    @_jit
    def nb_rmsnorm_backward(dy, x, w, inv):
        rows, n = x.shape
        dx = np.empty_like(x)
        for r in range(rows):
            dot = 0.0
            for j in range(n):
                dot += dy[r, j] * w[j] * x[r, j]
            iv = inv[r]
            c = iv * iv * iv * dot / n
            for j in range(n):
                dx[r, j] = iv * dy[r, j] * w[j] - c * x[r, j]
        return dx

    @_jit
    def nb_swiglu_forward(gate, up):
        rows, n = gate.shape
        h = np.empty_like(gate)
        for r in range(rows):
            for j in range(n):
                g = gate[r, j]
                h[r, j] = g / (1.0 + math.exp(-g)) * up[r, j]
        return h

    @_jit
    def nb_swiglu_backward(dh, gate, up):
        rows, n = gate.shape
        dgate = np.empty_like(gate)
        dup = np.empty_like(gate)
        for r in range(rows):
            for j in range(n):
                g = gate[r, j]
                sig = 1.0 / (1.0 + math.exp(-g))
                dgate[r, j] = dh[r, j] * up[r, j] * (sig * (1.0 + g * (1.0 - sig)))
                dup[r, j] = dh[r, j] * g * sig
        return dgate, dup

    @_jit
    def nb_cross_entropy(logits, targets, weights):
        rows, n = logits.shape
        grad = np.zeros_like(logits)
        loss = 0.0
        for r in range(rows):
            w = weights[r]
            if w == 0.0:
                continue
            m = -np.inf
            for j in range(n):
                if logits[r, j] > m:
                    m = logits[r, j]
            z = 0.0
            for j in range(n):
                e = math.exp(logits[r, j] - m)
                grad[r, j] = e
                z += e
            loss += w * (math.log(z) - (logits[r, targets[r]] - m))
            for j in range(n):
                grad[r, j] = grad[r, j] / z * w
            grad[r, targets[r]] -= w
        return loss, grad


NUMPY_KERNELS = {
    "causal_softmax": np_causal_softmax,
    "softmax_backward": np_softmax_backward,
    "rmsnorm_forward": np_rmsnorm_forward,
    "rmsnorm_backward": np_rmsnorm_backward,
    "swiglu_forward": np_swiglu_forward,
    "swiglu_backward": np_swiglu_backward,
    "cross_entropy": np_cross_entropy,
}

NUMBA_KERNELS = (
    {
        "causal_softmax": nb_causal_softmax,
        "softmax_backward": nb_softmax_backward,
        "rmsnorm_forward": nb_rmsnorm_forward,
        "rmsnorm_backward": nb_rmsnorm_backward,
        "swiglu_forward": nb_swiglu_forward,
        "swiglu_backward": nb_swiglu_backward,
        "cross_entropy": lambda logits, targets, weights: _nb_ce(logits, targets, weights),
    }
    if numba is not None
    else None
)


def _nb_ce(logits, targets, weights):
    loss, grad = nb_cross_entropy(logits, targets, weights)
    return float(loss), grad


USE_NUMBA = numba is not None and numba_requested()
BACKEND = "numba" if USE_NUMBA else "numpy"
_active = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS

causal_softmax = _active["causal_softmax"]
softmax_backward = _active["softmax_backward"]
rmsnorm_forward = _active["rmsnorm_forward"]
rmsnorm_backward = _active["rmsnorm_backward"]
swiglu_forward = _active["swiglu_forward"]
swiglu_backward = _active["swiglu_backward"]
cross_entropy = _active["cross_entropy"]
