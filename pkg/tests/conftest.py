from pathlib import Path

import numpy as np
import pytest

from cotlora.core import parse_examples
from cotlora.nn import LoraConfig, ToyTransformer, ToyTransformerConfig

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def golden_examples():
    return parse_examples((FIXTURES / "golden_24.jsonl").read_text(encoding="utf-8"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


SMALL = ToyTransformerConfig(d_model=16, n_heads=2, n_layers=2, d_ff=24, vocab_size=40, max_seq_len=32)


@pytest.fixture
def small_config():
    return SMALL


@pytest.fixture
def small_model():
    return ToyTransformer.init(SMALL, seed=3)


@pytest.fixture
def small_lora():
    return LoraConfig(rank=4, alpha=8.0, dropout=0.0)
