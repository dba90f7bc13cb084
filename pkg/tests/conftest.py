from __future__ import annotations

import pytest
import torch

from medseg.gcu import GcuConfig
from medseg.model import MedSegModel
from medseg.pg import PgConfig
from medseg.synth import SynthConfig, generate_dataset
from medseg.tokenizer import build_vocab
from medseg.training import TrainConfig, train


@pytest.fixture(scope="session")
def vocab():
    return build_vocab()


def tiny_gcu_config(vocab_size: int, **overrides) -> GcuConfig:
    base = dict(patch_size=8, d_vision=16, d_model=16, n_layers=1, n_heads=2,
                d_ff=32, max_seq=96, vocab_size=vocab_size)
    base.update(overrides)
    return GcuConfig(**base)


def tiny_pg_config(**overrides) -> PgConfig:
    base = dict(d_feat=8, d_prompt=8, refine_ch=4)
    base.update(overrides)
    return PgConfig(**base)


@pytest.fixture
def tiny_model(vocab):
    torch.manual_seed(0)
    return MedSegModel(tiny_gcu_config(vocab.size), tiny_pg_config(), vocab)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(SynthConfig(num_samples=8, seed=11))


@pytest.fixture(scope="session")
def micro_overfit_model(vocab):
    """A small model memorizing four 32x32 samples; answers with EOS reliably."""
    samples = generate_dataset(SynthConfig(num_samples=4, seed=5, image_size=32))
    torch.manual_seed(0)
    model = MedSegModel(
        tiny_gcu_config(vocab.size, d_model=48, n_heads=4, d_ff=96, max_seq=128),
        tiny_pg_config(d_feat=16, d_prompt=16),
        vocab,
    )
    cfg = TrainConfig(steps=350, batch_size=4, learning_rate=2e-3, seed=0,
                      eval_every=10 ** 9)
    train(samples, model, cfg)
    model.eval()
    return model, samples
