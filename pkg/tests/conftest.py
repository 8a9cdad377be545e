from __future__ import annotations

import os
from dataclasses import replace

import pytest
import torch

from backend.config import RunManifest
from backend.decode_eval import DecodeConfig
from backend.model import ModelConfig, USRModel
from backend.optim import OptimConfig
from backend.synth_data import CorpusConfig, generate_corpus


def pytest_collection_modifyitems(config, items):
    if os.getenv("USR_SLOW", "").strip().lower() in ("1", "true", "yes"):
        return
    skip = pytest.mark.skip(reason="multi-seed experiment; set USR_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


TINY_CORPUS = CorpusConfig(
    vocab_size=5,
    min_utterance_tokens=2,
    max_utterance_tokens=4,
    frames_per_token=2,
    frames_jitter=0,
    gap_frames=1,
    video_dim=6,
    audio_rate_ratio=2,
    audio_dim=3,
    seed=7,
)


def tiny_model_config(**overrides) -> ModelConfig:
    values = dict(encoder_blocks=2, decoder_blocks=1, attn_dim=16, attn_heads=2, mlp_dim=32,
                  predictor_blocks=1, predictor_dim=16)
    values.update(overrides)
    cfg = ModelConfig.from_preset("desk", **values)
    tok = TINY_CORPUS.tokenizer
    return cfg.with_corpus(TINY_CORPUS.video_dim, TINY_CORPUS.audio_dim, TINY_CORPUS.audio_rate_ratio, tok.vocab_total)


def tiny_manifest(out_dir: str, **changes) -> RunManifest:
    base = RunManifest(
        model=ModelConfig.from_preset("desk", encoder_blocks=2, decoder_blocks=1, attn_dim=16, attn_heads=2,
                                      mlp_dim=32, predictor_blocks=1, predictor_dim=16),
        optim=OptimConfig(peak_lr=1e-3, warmup_epochs=1, total_epochs=2, batch_size_labelled=4,
                          batch_size_unlabelled=4, max_frames_labelled=200, max_frames_unlabelled=200),
        decode=DecodeConfig(beam_size=2),
        out_dir=out_dir,
    )
    return replace(base, **changes)


def directional_derivative(model: torch.nn.Module, loss_fn, seed: int = 0, eps: float = 1e-6):
    """(autograd, central-difference) derivative of ``loss_fn()`` along one random parameter direction."""
    params = [p for p in model.parameters() if p.requires_grad]
    gen = torch.Generator().manual_seed(seed)
    dirs = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    analytic = sum((p.grad * d).sum().item() for p, d in zip(params, dirs) if p.grad is not None)
    with torch.no_grad():
        for p, d in zip(params, dirs):
            p.add_(d, alpha=eps)
        plus = loss_fn().item()
        for p, d in zip(params, dirs):
            p.add_(d, alpha=-2 * eps)
        minus = loss_fn().item()
        for p, d in zip(params, dirs):
            p.add_(d, alpha=eps)
    model.zero_grad(set_to_none=True)
    return analytic, (plus - minus) / (2 * eps)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus(TINY_CORPUS, n_utterances=16, labelled_fraction=0.5, n_eval=4)


@pytest.fixture
def tiny_model() -> USRModel:
    torch.manual_seed(0)
    return USRModel(tiny_model_config()).double()


@pytest.fixture
def tok():
    return TINY_CORPUS.tokenizer
