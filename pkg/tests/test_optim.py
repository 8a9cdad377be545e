from __future__ import annotations

import math

import pytest
import torch
import torch.nn as nn

from backend.errors import ConfigError
from backend.model import USRModel
from backend.optim import (
    OptimConfig,
    adamw_step,
    build_optimizer,
    freeze_encoder_blocks,
    lr_schedule,
    schedule_steps,
)

from conftest import tiny_model_config


def test_lr_schedule_endpoints():
    assert lr_schedule(0, 10, 100, 2e-3) == 0.0
    assert lr_schedule(5, 10, 100, 2e-3) == pytest.approx(1e-3)
    assert lr_schedule(10, 10, 100, 2e-3) == 2e-3
    assert lr_schedule(55, 10, 100, 2e-3) == pytest.approx(1e-3)
    assert lr_schedule(100, 10, 100, 2e-3) == 0.0
    assert lr_schedule(0, 0, 100, 1.0) == 1.0


def test_schedule_steps_and_validation():
    assert schedule_steps(OptimConfig(warmup_epochs=5, total_epochs=30), 4) == (20, 120)
    with pytest.raises(ConfigError, match="warmup_epochs"):
        OptimConfig(warmup_epochs=30, total_epochs=30)
    with pytest.raises(ConfigError, match="grad_clip"):
        OptimConfig(grad_clip=0.0)
    with pytest.raises(ConfigError, match="save_every"):
        OptimConfig(save_every=-1)
    assert OptimConfig(save_every=0).save_every == 0


def _scalar_param_model(value: float) -> nn.Linear:
    layer = nn.Linear(1, 1, bias=False).double()
    with torch.no_grad():
        layer.weight.fill_(value)
    return layer


def test_single_adamw_step_by_hand():
    model = _scalar_param_model(1.0)
    cfg = OptimConfig(betas=(0.9, 0.98), eps=1e-8, weight_decay=0.04, grad_clip=100.0)
    opt = build_optimizer(model, cfg)
    model.weight.grad = torch.full_like(model.weight, 0.5)
    out = adamw_step(opt, lr=0.1, grad_clip=cfg.grad_clip)
    assert out.stepped and out.grad_norm == pytest.approx(0.5)

    g, lr = 0.5, 0.1
    m_hat = g  # (1 - b1) g / (1 - b1)
    v_hat = g * g
    expected = 1.0 * (1 - lr * 0.04) - lr * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert abs(model.weight.item() - expected) < 1e-12
    assert model.weight.grad is None


def test_zero_grads_without_decay_leave_params_unchanged():
    model = _scalar_param_model(0.7)
    opt = build_optimizer(model, OptimConfig(weight_decay=0.0))
    model.weight.grad = torch.zeros_like(model.weight)
    adamw_step(opt, lr=0.5, grad_clip=3.0)
    assert model.weight.item() == 0.7


def test_clipping_halves_the_gradient():
    p = nn.Parameter(torch.zeros(2, dtype=torch.float64))
    opt = torch.optim.SGD([p], lr=1.0)
    p.grad = torch.tensor([6.0, 0.0], dtype=torch.float64)
    out = adamw_step(opt, lr=1.0, grad_clip=3.0)
    assert out.grad_norm == pytest.approx(6.0)
    assert p[0].item() == pytest.approx(-3.0, abs=1e-5)


def test_non_finite_gradients_skip_the_step():
    model = _scalar_param_model(2.0)
    opt = build_optimizer(model, OptimConfig())
    model.weight.grad = torch.full_like(model.weight, float("nan"))
    out = adamw_step(opt, lr=0.1, grad_clip=3.0)
    assert not out.stepped
    assert model.weight.item() == 2.0
    assert model.weight.grad is None


def test_parameter_groups():
    torch.manual_seed(0)
    model = USRModel(tiny_model_config())
    opt = build_optimizer(model, OptimConfig(weight_decay=0.04))
    by_id = {id(p): g for g in opt.param_groups for p in g["params"]}
    assert by_id[id(model.ctc_proj.weight)]["weight_decay"] == 0.04
    assert by_id[id(model.ctc_proj.bias)]["weight_decay"] == 0.0
    assert by_id[id(model.mask_token)]["weight_decay"] == 0.0
    assert sum(len(g["params"]) for g in opt.param_groups) == len(list(model.parameters()))

    layered = build_optimizer(model, OptimConfig(layer_decay=0.5))
    by_id = {id(p): g for g in layered.param_groups for p in g["params"]}
    top = model.cfg.encoder_blocks + 1
    assert by_id[id(model.decoder.out.weight)]["lr_scale"] == 1.0
    assert by_id[id(model.video_proj.weight)]["lr_scale"] == pytest.approx(0.5 ** top)


def test_freeze_encoder_blocks():
    model = USRModel(tiny_model_config())
    frozen = freeze_encoder_blocks(model, 1)
    assert "video_extractor.frame_fc1.weight" in frozen
    assert any(n.startswith("encoder.blocks.0.") for n in frozen)
    assert not any(n.startswith(("encoder.blocks.1.", "decoder.")) for n in frozen)
    opt = build_optimizer(model, OptimConfig())
    trainable = {id(p) for g in opt.param_groups for p in g["params"]}
    assert id(model.video_proj.weight) not in trainable
