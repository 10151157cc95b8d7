"""Reference computations that share no code with the package under test."""

import numpy as np


def loop_matmul(a, b):
    """Triple-loop product over nested lists."""
    n, m, p = len(a), len(b), len(b[0])
    return [[sum(a[i][t] * b[t][j] for t in range(m)) for j in range(p)] for i in range(n)]


def loop_lora_forward(x, W, A, B, alpha):
    """``x W^T + (alpha/r) x A^T B^T`` for one input row, written out element by element."""
    d, k, r = len(W), len(W[0]), len(A)
    s = alpha / r
    h = [sum(A[j][i] * x[i] for i in range(k)) for j in range(r)]
    return [sum(W[o][i] * x[i] for i in range(k)) + s * sum(B[o][j] * h[j] for j in range(r)) for o in range(d)]


def central_difference(f, param: np.ndarray, index, h: float = 1e-6) -> float:
    """d f / d param[index] by central differences; ``param`` is restored afterwards."""
    old = param[index]
    param[index] = old + h
    up = f()
    param[index] = old - h
    down = f()
    param[index] = old
    return (up - down) / (2.0 * h)


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def toy_parameter_walk(d_model, n_heads, n_layers, d_ff, vocab_size, rank=None, targets=()):
    """Parameter totals for the toy decoder, counted from its architecture description."""
    shapes = {
        "q_proj": (d_model, d_model),
        "k_proj": (d_model, d_model),
        "v_proj": (d_model, d_model),
        "o_proj": (d_model, d_model),
        "gate_proj": (d_ff, d_model),
        "up_proj": (d_ff, d_model),
        "down_proj": (d_model, d_ff),
    }
    frozen = 2 * vocab_size * d_model + d_model  # embeddings, lm head, final norm
    trainable = 0
    for _ in range(n_layers):
        frozen += 2 * d_model  # two norms
        for name, (out_f, in_f) in shapes.items():
            frozen += out_f * in_f
            if name in targets:
                trainable += rank * in_f + out_f * rank
    return trainable, frozen

