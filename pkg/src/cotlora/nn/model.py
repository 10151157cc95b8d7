"""Miniature Qwen-shaped decoder: RMSNorm, rotary causal attention, SwiGLU feed-forward.

Every layer exposes the seven projection names q/k/v/o/gate/up/down so
adapters can be injected by name. All base tensors are frozen; ``backward``
only fills adapter gradient buffers.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import _kernels as K
from .lora import SEVEN_TARGETS, LoraAdapter, LoraLinear, NonFiniteError


@dataclass(frozen=True)
class ToyTransformerConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    vocab_size: int = 512
    max_seq_len: int = 512
    rope_base: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        for name in ("d_model", "n_heads", "n_layers", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


class RMSNorm:
    def __init__(self, weight: np.ndarray, eps: float):
        self.weight = np.ascontiguousarray(weight, dtype=np.float64)
        self.weight.setflags(write=False)
        self.eps = eps
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        x2 = np.ascontiguousarray(x.reshape(-1, x.shape[-1]))
        y, inv = K.rmsnorm_forward(x2, self.weight, self.eps)
        self._cache = (x2, inv)
        return y.reshape(x.shape)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        x2, inv = self._cache
        dx = K.rmsnorm_backward(np.ascontiguousarray(dy.reshape(x2.shape)), x2, self.weight, inv)
        return dx.reshape(dy.shape)


def rope_tables(max_len: int, head_dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    freqs = base ** (-np.arange(half) / half)
    angles = np.arange(max_len)[:, None] * freqs[None, :]
    angles = np.concatenate([angles, angles], axis=1)
    return np.cos(angles), np.sin(angles)


def _rotate_half(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)


def _rotate_half_T(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    return np.concatenate([x[..., half:], -x[..., :half]], axis=-1)


class Attention:
    def __init__(self, q, k, v, o, n_heads: int):
        self.q_proj, self.k_proj, self.v_proj, self.o_proj = q, k, v, o
        self.n_heads = n_heads
        self.last_probs: np.ndarray | None = None
        self._cache = None

    def _split(self, t: np.ndarray) -> np.ndarray:
        b, n, d = t.shape
        return t.reshape(b, n, self.n_heads, d // self.n_heads).transpose(0, 2, 1, 3)

    def forward(self, x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
        b, n, d = x.shape
        hd = d // self.n_heads
        q = self._split(self.q_proj(x))
        k = self._split(self.k_proj(x))
        v = self._split(self.v_proj(x))
        q = q * cos + _rotate_half(q) * sin
        k = k * cos + _rotate_half(k) * sin
        scale = 1.0 / math.sqrt(hd)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        p = K.causal_softmax(np.ascontiguousarray(scores.reshape(-1, n)), n).reshape(scores.shape)
        ctx = p @ v
        self.last_probs = p
        self._cache = (q, k, v, p, cos, sin, scale)
        out = ctx.transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.o_proj(out)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        q, k, v, p, cos, sin, scale = self._cache
        b, n, d = dy.shape
        dctx = self._split(self.o_proj.backward(dy))
        dp = dctx @ v.transpose(0, 1, 3, 2)
        dv = p.transpose(0, 1, 3, 2) @ dctx
        ds = K.softmax_backward(
            np.ascontiguousarray(p.reshape(-1, n)), np.ascontiguousarray(dp.reshape(-1, n))
        ).reshape(p.shape) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dq = dq * cos + _rotate_half_T(dq * sin)
        dk = dk * cos + _rotate_half_T(dk * sin)

        def merge(t):
            return t.transpose(0, 2, 1, 3).reshape(b, n, d)

        return self.q_proj.backward(merge(dq)) + self.k_proj.backward(merge(dk)) + self.v_proj.backward(merge(dv))


class SwiGLU:
    def __init__(self, gate, up, down):
        self.gate_proj, self.up_proj, self.down_proj = gate, up, down
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        g = self.gate_proj(x)
        u = self.up_proj(x)
        shape = g.shape
        g2 = np.ascontiguousarray(g.reshape(-1, shape[-1]))
        u2 = np.ascontiguousarray(u.reshape(-1, shape[-1]))
        h = K.swiglu_forward(g2, u2).reshape(shape)
        self._cache = (g2, u2, shape)
        return self.down_proj(h)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        g2, u2, shape = self._cache
        dh = self.down_proj.backward(dy)
        dg, du = K.swiglu_backward(np.ascontiguousarray(dh.reshape(g2.shape)), g2, u2)
        return self.gate_proj.backward(dg.reshape(shape)) + self.up_proj.backward(du.reshape(shape))


class DecoderLayer:
    def __init__(self, input_norm: RMSNorm, attn: Attention, post_norm: RMSNorm, mlp: SwiGLU):
        self.input_norm, self.attn, self.post_norm, self.mlp = input_norm, attn, post_norm, mlp

    def projections(self) -> dict[str, LoraLinear]:
        a, m = self.attn, self.mlp
        return {
            "q_proj": a.q_proj, "k_proj": a.k_proj, "v_proj": a.v_proj, "o_proj": a.o_proj,
            "gate_proj": m.gate_proj, "up_proj": m.up_proj, "down_proj": m.down_proj,
        }

    def forward(self, x, cos, sin):
        h = x + self.attn.forward(self.input_norm.forward(x), cos, sin)
        return h + self.mlp.forward(self.post_norm.forward(h))

    def backward(self, dy):
        dh = dy + self.post_norm.backward(self.mlp.backward(dy))
        return dh + self.input_norm.backward(self.attn.backward(dh))


class ToyTransformer:
    def __init__(self, config: ToyTransformerConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        c = config
        self.embed = np.ascontiguousarray(tensors["embed_tokens"], dtype=np.float64)
        self.embed.setflags(write=False)
        self.lm_head = np.ascontiguousarray(tensors["lm_head"], dtype=np.float64)
        self.lm_head.setflags(write=False)
        self.final_norm = RMSNorm(tensors["norm"], c.norm_eps)
        self.layers: list[DecoderLayer] = []
        for i in range(c.n_layers):
            p = f"layers.{i}."
            proj = {
                name: LoraLinear(tensors[p + name], name=p + name, seed=1000 * i + j)
                for j, name in enumerate(SEVEN_TARGETS)
            }
            self.layers.append(
                DecoderLayer(
                    RMSNorm(tensors[p + "input_norm"], c.norm_eps),
                    Attention(proj["q_proj"], proj["k_proj"], proj["v_proj"], proj["o_proj"], c.n_heads),
                    RMSNorm(tensors[p + "post_norm"], c.norm_eps),
                    SwiGLU(proj["gate_proj"], proj["up_proj"], proj["down_proj"]),
                )
            )
        self._cos, self._sin = rope_tables(c.max_seq_len, c.head_dim, c.rope_base)
        self._cache = None
        self.training = False

    @classmethod
    def init(cls, config: ToyTransformerConfig | None = None, seed: int = 0) -> "ToyTransformer":
        """Random base weights; the tiny ``lm_head`` keeps initial logits near uniform."""
        c = config or ToyTransformerConfig()
        rng = np.random.default_rng(seed)
        d, f = c.d_model, c.d_ff
        shapes = {
            "q_proj": (d, d), "k_proj": (d, d), "v_proj": (d, d), "o_proj": (d, d),
            "gate_proj": (f, d), "up_proj": (f, d), "down_proj": (d, f),
        }
        t = {"embed_tokens": rng.normal(0.0, 1.0, (c.vocab_size, d))}
        for i in range(c.n_layers):
            p = f"layers.{i}."
            t[p + "input_norm"] = np.ones(d)
            t[p + "post_norm"] = np.ones(d)
            for name in SEVEN_TARGETS:
                out_f, in_f = shapes[name]
                t[p + name] = rng.normal(0.0, 1.0 / math.sqrt(in_f), (out_f, in_f))
        t["norm"] = np.ones(d)
        t["lm_head"] = rng.normal(0.0, 0.02, (c.vocab_size, d))
        return cls(c, t)

    # --- introspection ---

    def named_projections(self) -> Iterator[tuple[str, LoraLinear]]:
        for i, layer in enumerate(self.layers):
            for name, proj in layer.projections().items():
                yield f"layers.{i}.{name}", proj

    def named_adapters(self) -> Iterator[tuple[str, LoraAdapter]]:
        for name, proj in self.named_projections():
            if proj.adapter is not None:
                yield name, proj.adapter

    def named_base_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        yield "embed_tokens", self.embed
        for i, layer in enumerate(self.layers):
            p = f"layers.{i}."
            yield p + "input_norm", layer.input_norm.weight
            yield p + "post_norm", layer.post_norm.weight
            for name, proj in layer.projections().items():
                yield p + name, proj.weight
        yield "norm", self.final_norm.weight
        yield "lm_head", self.lm_head

    def adapters(self) -> list[LoraAdapter]:
        return [a for _, a in self.named_adapters()]

    def train(self, mode: bool = True) -> "ToyTransformer":
        self.training = mode
        for _, proj in self.named_projections():
            proj.training = mode
        return self

    def eval(self) -> "ToyTransformer":
        return self.train(False)

    def zero_grad(self) -> None:
        for a in self.adapters():
            a.zero_grad()

    # --- compute ---

    def forward(self, tokens) -> np.ndarray:
        """Logits ``(L, V)`` for a 1-D sequence or ``(B, L, V)`` for a batch."""
        arr = np.asarray(tokens)
        single = arr.ndim == 1
        if single:
            arr = arr[None, :]
        if arr.ndim != 2 or not np.issubdtype(arr.dtype, np.integer):
            raise ValueError("tokens must be a 1-D or 2-D integer array")
        b, n = arr.shape
        if n == 0:
            raise ValueError("empty token sequence")
        if n > self.config.max_seq_len:
            raise ValueError(f"sequence length {n} exceeds max_seq_len {self.config.max_seq_len}")
        if arr.min() < 0 or arr.max() >= self.config.vocab_size:
            raise ValueError(f"token id out of range [0, {self.config.vocab_size})")
        cos, sin = self._cos[:n], self._sin[:n]
        x = self.embed[arr]
        for layer in self.layers:
            x = layer.forward(x, cos, sin)
        h = self.final_norm.forward(x)
        logits = h @ self.lm_head.T
        if not np.isfinite(logits).all():
            raise NonFiniteError("non-finite logits")
        self._cache = (single, arr.shape)
        return logits[0] if single else logits

    __call__ = forward

    def backward(self, dlogits: np.ndarray) -> None:
        """Accumulate adapter gradients for ``d loss / d logits``."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        single, _ = self._cache
        if single:
            dlogits = dlogits[None]
        dx = self.final_norm.backward(dlogits @ self.lm_head)
        for layer in reversed(self.layers):
            dx = layer.backward(dx)
        self._cache = None

    def attention_probs(self) -> list[np.ndarray]:
        return [layer.attn.last_probs for layer in self.layers]


def transformer_forward(tokens, model: ToyTransformer) -> np.ndarray:
    return model.forward(tokens)
