"""Supervised fine-tuning of LoRA adapters on instruction-response records."""

from __future__ import annotations

import json
import math
import re
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .nn import _kernels as K
from .nn.lora import count_parameters
from .nn.model import ToyTransformer
from .prompts.engine import InstructionRecord

PAD, UNK, BOS, SEP, EOS = "<pad>", "<unk>", "<bos>", "<sep>", "<eos>"
SPECIALS = (PAD, UNK, BOS, SEP, EOS)
# words carry their leading space, so joining the pieces restores the text
_PIECE_RE = re.compile(r" ?\w+| ?[^\w\s]+|\s+(?!\S)|\s+")


class SequenceTooLongError(ValueError):
    pass


class Tokenizer:
    """Whitespace-aware word tokenizer with a per-character fallback."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate vocabulary entries")

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int | None = None) -> "Tokenizer":
        pieces: Counter[str] = Counter()
        chars: set[str] = set()
        for text in texts:
            chars.update(text)
            pieces.update(p for p in _PIECE_RE.findall(text) if len(p) > 1)
        vocab = list(SPECIALS) + sorted(chars)
        if max_size is not None and len(vocab) > max_size:
            raise ValueError(f"vocabulary needs at least {len(vocab)} entries for characters, max_size={max_size}")
        seen = set(vocab)
        for piece, _ in sorted(pieces.items(), key=lambda kv: (-kv[1], kv[0])):
            if max_size is not None and len(vocab) >= max_size:
                break
            if piece not in seen:
                vocab.append(piece)
                seen.add(piece)
        return cls(vocab)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index[token]

    def encode(self, text: str) -> list[int]:
        out = []
        for piece in _PIECE_RE.findall(text):
            tid = self.index.get(piece)
            if tid is not None:
                out.append(tid)
            else:
                out.extend(self.index.get(ch, self.index[UNK]) for ch in piece)
        return out

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        out = []
        for i in ids:
            tok = self.tokens[int(i)]
            if skip_special and tok in SPECIALS:
                continue
            out.append(tok)
        return "".join(out)

    def to_json(self) -> str:
        return json.dumps({"tokens": self.tokens}, ensure_ascii=False, indent=0)

    @classmethod
    def from_json(cls, text: str) -> "Tokenizer":
        return cls(json.loads(text)["tokens"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def record_texts(records: Iterable[InstructionRecord]) -> Iterable[str]:
    for r in records:
        yield r.instruction
        yield r.input
        yield r.response


@dataclass(frozen=True)
class TokenizedRecord:
    ids: np.ndarray
    mask: np.ndarray  # True on response tokens and the closing <eos>
    source_id: str = ""

    def __len__(self) -> int:
        return len(self.ids)


def prompt_ids(tok: Tokenizer, instruction: str, input_text: str = "") -> list[int]:
    return [tok.id(BOS), *tok.encode(instruction), tok.id(SEP), *tok.encode(input_text), tok.id(SEP)]


def tokenize(
    record: InstructionRecord,
    tok: Tokenizer,
    max_seq_len: int | None = None,
    policy: str = "response_only",
) -> TokenizedRecord:
    """``<bos> instruction <sep> input <sep> response <eos>`` with a loss mask."""
    if not record.response.strip():
        raise ValueError("empty response")
    if policy not in ("response_only", "full_sequence"):
        raise ValueError(f"unknown loss mask policy {policy!r}")
    prefix = prompt_ids(tok, record.instruction, record.input)
    response = [*tok.encode(record.response), tok.id(EOS)]
    ids = np.array(prefix + response, dtype=np.int64)
    if max_seq_len is not None and len(ids) > max_seq_len:
        raise SequenceTooLongError(f"record {record.source_example_id!r}: {len(ids)} tokens > max_seq_len {max_seq_len}")
    mask = np.zeros(len(ids), dtype=bool)
    if policy == "response_only":
        mask[len(prefix) :] = True
    else:
        mask[1:] = True
    return TokenizedRecord(ids, mask, record.source_example_id)


def detokenize(tr: TokenizedRecord, tok: Tokenizer) -> tuple[str, str, str]:
    """Inverse of ``tokenize``: (instruction, input, response)."""
    ids = tr.ids.tolist()
    sep = tok.id(SEP)
    first = ids.index(sep)
    second = ids.index(sep, first + 1)
    end = ids.index(tok.id(EOS), second + 1)
    return tok.decode(ids[1:first]), tok.decode(ids[first + 1 : second]), tok.decode(ids[second + 1 : end])


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    grad_accum_steps: int = 2
    learning_rate: float = 2e-4
    epochs: int = 1
    seed: int = 0
    loss_mask_policy: str = "response_only"
    max_steps: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("batch_size", "grad_accum_steps", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if self.loss_mask_policy not in ("response_only", "full_sequence"):
            raise ValueError(f"unknown loss_mask_policy {self.loss_mask_policy!r}")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.grad_accum_steps

    def updates_per_epoch(self, n: int) -> int:
        return math.ceil(math.ceil(n / self.batch_size) / self.grad_accum_steps)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def collate(batch: Sequence[TokenizedRecord], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-pad to (inputs, targets, weights); the causal mask makes right padding inert."""
    n = max(len(r) for r in batch) - 1
    inputs = np.full((len(batch), n), pad_id, dtype=np.int64)
    targets = np.full((len(batch), n), pad_id, dtype=np.int64)
    weights = np.zeros((len(batch), n))
    for i, r in enumerate(batch):
        m = len(r) - 1
        inputs[i, :m] = r.ids[:-1]
        targets[i, :m] = r.ids[1:]
        weights[i, :m] = r.mask[1:]
    return inputs, targets, weights


def count_targets(batch: Sequence[TokenizedRecord]) -> int:
    return int(sum(r.mask[1:].sum() for r in batch))


def sft_step(batch: Sequence[TokenizedRecord], model: ToyTransformer, normalizer: int | None = None) -> float:
    """Forward + backward on one micro-batch; gradients accumulate in the adapters.

    The loss is the next-token cross-entropy summed over masked positions and
    divided by ``normalizer`` (default: this batch's masked count). Passing
    the masked count of a whole accumulation window makes the accumulated
    gradient equal that of the window as one batch.
    """
    if not model.adapters():
        raise ValueError("model has no adapters to train")
    count = count_targets(batch)
    if count == 0:
        raise ValueError("batch has no unmasked target tokens")
    norm = count if normalizer is None else normalizer
    inputs, targets, weights = collate(batch)
    logits = model.forward(inputs)
    v = logits.shape[-1]
    loss_sum, dlogits = K.cross_entropy(
        np.ascontiguousarray(logits.reshape(-1, v)), targets.reshape(-1), weights.reshape(-1)
    )
    model.backward(dlogits.reshape(logits.shape) / norm)
    return loss_sum / norm


class Adam:
    def __init__(self, params: list[tuple[np.ndarray, str, object]], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        # params: (tensor, grad attribute name, owner)
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p, _, _ in params]
        self.v = [np.zeros_like(p) for p, _, _ in params]
        self.t = 0

    @classmethod
    def for_model(cls, model: ToyTransformer, config: TrainConfig) -> "Adam":
        params = []
        for ad in model.adapters():
            params.append((ad.A, "grad_A", ad))
            params.append((ad.B, "grad_B", ad))
        return cls(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, (p, gname, owner) in enumerate(self.params):
            g = getattr(owner, gname)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            p -= self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    final_loss: float = float("nan")
    steps: int = 0
    micro_batches: int = 0
    epochs: int = 0
    num_records: int = 0
    wall_seconds: float = 0.0
    trainable_params: int = 0
    frozen_params: int = 0
    accounting: str = ""
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def train(
    dataset: Sequence[TokenizedRecord],
    model: ToyTransformer,
    config: TrainConfig | None = None,
    callback=None,
) -> tuple[ToyTransformer, TrainReport]:
    """Adam on adapter tensors only; shuffling and dropout follow ``config.seed``.

    ``callback(step, loss)`` runs after every optimizer update.
    """
    config = config or TrainConfig()
    if not dataset:
        raise ValueError("empty dataset")
    if not model.adapters():
        raise ValueError("model has no adapters to train")
    for i, (_, proj) in enumerate(model.named_projections()):
        proj.reset_dropout(config.seed * 7919 + i)
    rng = np.random.default_rng(config.seed)
    opt = Adam.for_model(model, config)
    params = count_parameters(model)
    report = TrainReport(
        num_records=len(dataset),
        trainable_params=params.trainable,
        frozen_params=params.frozen,
        config=config.to_dict(),
        accounting=(
            f"updates/epoch = ceil(ceil({len(dataset)}/{config.batch_size})/{config.grad_accum_steps}) "
            f"= {config.updates_per_epoch(len(dataset))}"
        ),
    )
    start = time.perf_counter()
    model.train()
    try:
        done = False
        for _ in range(config.epochs):
            order = rng.permutation(len(dataset))
            micro = [
                [dataset[j] for j in order[s : s + config.batch_size]]
                for s in range(0, len(dataset), config.batch_size)
            ]
            for w in range(0, len(micro), config.grad_accum_steps):
                window = micro[w : w + config.grad_accum_steps]
                norm = sum(count_targets(b) for b in window)
                if norm == 0:
                    raise ValueError("accumulation window has no unmasked target tokens")
                model.zero_grad()
                loss = sum(sft_step(b, model, normalizer=norm) for b in window)
                opt.step()
                report.micro_batches += len(window)
                report.steps += 1
                report.losses.append(float(loss))
                if callback is not None:
                    callback(report.steps, float(loss))
                if config.max_steps is not None and report.steps >= config.max_steps:
                    done = True
                    break
            report.epochs += 1
            if done:
                break
    finally:
        model.eval()
    report.final_loss = report.losses[-1]
    report.wall_seconds = time.perf_counter() - start
    return model, report


def label_token_ids(tok: Tokenizer) -> tuple[int, int]:
    """Token ids of the trailing label digit as written in ``Final answer: L``."""
    return tok.encode(" 0")[-1], tok.encode(" 1")[-1]


def label_accuracy(dataset: Sequence[TokenizedRecord], model: ToyTransformer, tok: Tokenizer, batch_size: int = 16) -> float:
    """Teacher-forced accuracy of the final label digit, restricted to {0, 1}.

    The label is the last response token before ``<eos>``; the prediction
    is whichever of the two digit tokens has the larger logit one position
    earlier.
    """
    zero, one = label_token_ids(tok)
    correct = 0
    for s in range(0, len(dataset), batch_size):
        batch = dataset[s : s + batch_size]
        inputs, _, _ = collate(batch)
        logits = model.forward(inputs)
        for i, r in enumerate(batch):
            pos = len(r) - 3  # input index whose next token is the label digit
            gold = int(r.ids[-2])
            if gold not in (zero, one):
                raise ValueError(f"record {r.source_id!r} does not end with a label digit")
            pred = one if logits[i, pos, one] > logits[i, pos, zero] else zero
            correct += pred == gold
    return correct / len(dataset)
