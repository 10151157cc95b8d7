"""Low-rank adapters on frozen linear projections."""

from __future__ import annotations

import fnmatch
import math
from dataclasses import dataclass, field

import numpy as np

SEVEN_TARGETS = ("q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj")


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 24
    alpha: float = 32.0
    dropout: float = 0.1
    targets: tuple[str, ...] = SEVEN_TARGETS

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be positive")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        object.__setattr__(self, "targets", tuple(self.targets))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


@dataclass
class LoraAdapter:
    """Trainable pair ``A (r x k)``, ``B (d x r)``; the update is ``(alpha / r) * B @ A``."""

    A: np.ndarray
    B: np.ndarray
    alpha: float
    dropout: float = 0.0
    grad_A: np.ndarray = field(init=False, repr=False)
    grad_B: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.A = np.ascontiguousarray(self.A, dtype=np.float64)
        self.B = np.ascontiguousarray(self.B, dtype=np.float64)
        if self.A.ndim != 2 or self.B.ndim != 2 or self.B.shape[1] != self.A.shape[0]:
            raise ShapeError(f"incompatible adapter shapes A{self.A.shape} B{self.B.shape}")
        r = self.rank
        if r > min(self.B.shape[0], self.A.shape[1]):
            raise ValueError(f"rank {r} exceeds min(d, k) = {min(self.B.shape[0], self.A.shape[1])}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        self.zero_grad()

    @classmethod
    def init(cls, d: int, k: int, rank: int, alpha: float, dropout: float, rng: np.random.Generator) -> "LoraAdapter":
        bound = 1.0 / math.sqrt(k)
        A = rng.uniform(-bound, bound, size=(rank, k))
        return cls(A, np.zeros((d, rank)), alpha, dropout)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def num_parameters(self) -> int:
        return self.A.size + self.B.size

    def delta(self) -> np.ndarray:
        return self.scaling * (self.B @ self.A)

    def zero_grad(self) -> None:
        self.grad_A = np.zeros_like(self.A)
        self.grad_B = np.zeros_like(self.B)


class LoraLinear:
    """Frozen projection ``y = x @ W.T`` with an optional low-rank side path.

    With an adapter the forward pass is
    ``x @ W.T + (alpha / r) * dropout(x) @ A.T @ B.T``. Dropout uses inverted
    scaling and only runs in training mode. ``backward`` accumulates into the
    adapter's gradient buffers; the base weight never receives a gradient.
    """

    def __init__(self, weight: np.ndarray, adapter: LoraAdapter | None = None, name: str = "", seed: int = 0):
        self.weight = np.ascontiguousarray(weight, dtype=np.float64)
        self.weight.setflags(write=False)
        self.name = name
        self.training = False
        self._seed = seed
        self.dropout_rng = np.random.default_rng(seed)
        self._cache = None
        self.adapter = None
        if adapter is not None:
            self.attach(adapter)

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    def attach(self, adapter: LoraAdapter) -> None:
        if self.adapter is not None:
            raise ValueError(f"{self.name or 'layer'} already has an adapter")
        if adapter.A.shape[1] != self.in_features or adapter.B.shape[0] != self.out_features:
            raise ShapeError(
                f"adapter A{adapter.A.shape}/B{adapter.B.shape} does not fit weight {self.weight.shape}"
            )
        self.adapter = adapter

    def reset_dropout(self, seed: int | None = None) -> None:
        self.dropout_rng = np.random.default_rng(self._seed if seed is None else seed)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"{self.name or 'layer'}: expected last dim {self.in_features}, got {x.shape}")
        y = x @ self.weight.T
        xd = mask = h = None
        ad = self.adapter
        if ad is not None:
            xd = x
            if self.training and ad.dropout > 0.0:
                keep = self.dropout_rng.random(x.shape) >= ad.dropout
                mask = keep / (1.0 - ad.dropout)
                xd = x * mask
            h = xd @ ad.A.T
            y = y + ad.scaling * (h @ ad.B.T)
        if not np.isfinite(y).all():
            raise NonFiniteError(f"{self.name or 'layer'}: non-finite output")
        self._cache = (x, xd, mask, h)
        return y

    __call__ = forward

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        x, xd, mask, h = self._cache
        dx = dy @ self.weight
        ad = self.adapter
        if ad is not None:
            d, r = ad.B.shape
            dy2 = dy.reshape(-1, d)
            h2 = h.reshape(-1, r)
            ad.grad_B += ad.scaling * (dy2.T @ h2)
            dh = ad.scaling * (dy2 @ ad.B)
            ad.grad_A += dh.T @ xd.reshape(-1, self.in_features)
            dxd = (dh @ ad.A).reshape(x.shape)
            dx = dx + (dxd * mask if mask is not None else dxd)
        return dx

    def merged_weight(self) -> np.ndarray:
        return merge_adapter(self)


def lora_forward(x: np.ndarray, layer: LoraLinear) -> np.ndarray:
    return layer.forward(x)


def merge_adapter(layer: LoraLinear) -> np.ndarray:
    """``W + (alpha / r) * B @ A``, or a copy of ``W`` when there is no adapter."""
    if layer.adapter is None:
        return layer.weight.copy()
    return layer.weight + layer.adapter.delta()


def matches_target(name: str, patterns) -> bool:
    short = name.rsplit(".", 1)[-1]
    return any(fnmatch.fnmatchcase(short, p) or fnmatch.fnmatchcase(name, p) for p in patterns)


def inject_adapters(model, targets=None, config: LoraConfig | None = None, seed: int = 0):
    """Attach a fresh adapter to every projection whose name matches ``targets``.

    Patterns are fnmatch-style and are tried against both the short name
    (``q_proj``) and the full path (``layers.0.q_proj``). ``B`` starts at
    zero, so the injected model computes exactly what the base model did.
    """
    config = config or LoraConfig()
    targets = tuple(config.targets if targets is None else targets)
    projections = list(model.named_projections())
    if any(p.adapter is not None for _, p in projections):
        raise ValueError("model already has adapters injected")
    chosen = [(n, p) for n, p in projections if matches_target(n, targets)]
    if not chosen:
        raise ValueError(f"no target matched {list(targets)}")
    rng = np.random.default_rng(seed)
    for name, proj in chosen:
        proj.attach(
            LoraAdapter.init(proj.out_features, proj.in_features, config.rank, config.alpha, config.dropout, rng)
        )
    return model


@dataclass(frozen=True)
class ParamCount:
    trainable: int
    frozen: int

    @property
    def total(self) -> int:
        return self.trainable + self.frozen


def count_parameters(model) -> ParamCount:
    """Adapter parameters are trainable; every base tensor is frozen."""
    if isinstance(model, LoraLinear):
        trainable = model.adapter.num_parameters if model.adapter is not None else 0
        return ParamCount(trainable, model.weight.size)
    trainable = sum(a.num_parameters for _, a in model.named_adapters())
    frozen = sum(t.size for _, t in model.named_base_tensors())
    return ParamCount(trainable, frozen)
