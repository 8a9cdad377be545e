from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
import torch
from torch.autograd import gradcheck

from backend.errors import ConfigError, ContractError, ShapeError
from backend.losses import (
    LossWeights,
    attention_ce_loss,
    batch_ctc_loss,
    combine_modality,
    ctc_feasible,
    ctc_loss,
    modality_loss,
    semi_loss,
    supervised_loss,
    teacher_forcing_pair,
    unlabelled_attention_loss,
    unlabelled_ctc_loss,
)
from backend.model import ALL_MODALITIES, Modality


def _collapse(path, blank):
    out, prev = [], None
    for k in path:
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def _brute_force_ctc(probs: np.ndarray, labels, blank):
    t, v = probs.shape
    total = 0.0
    for path in itertools.product(range(v), repeat=t):
        if _collapse(path, blank) == list(labels):
            total += float(np.prod([probs[i, k] for i, k in enumerate(path)]))
    return -math.log(total)


def test_ctc_single_alignment_and_empty_labels():
    lp = torch.log(torch.tensor([[0.5, 0.5]], dtype=torch.float64))
    assert abs(ctc_loss(lp, [0], blank_id=1).item() - math.log(2)) < 1e-12

    probs = torch.tensor([[0.2, 0.8], [0.6, 0.4], [0.1, 0.9]], dtype=torch.float64)
    expected = -torch.log(probs[:, 1]).sum().item()
    assert abs(ctc_loss(probs.log(), [], blank_id=1).item() - expected) < 1e-12


def test_ctc_matches_brute_force_enumeration():
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 1000:
        t = int(rng.integers(1, 5))
        v = int(rng.integers(2, 5))
        blank = v - 1
        labels = [int(x) for x in rng.integers(0, blank, size=int(rng.integers(0, t + 1)))]
        if not ctc_feasible(labels, t):
            continue
        probs = rng.dirichlet(np.ones(v), size=t)
        got = ctc_loss(torch.from_numpy(np.log(probs)), labels, blank).item()
        assert abs(got - _brute_force_ctc(probs, labels, blank)) < 1e-9
        checked += 1


def test_ctc_infeasible_and_blank_in_labels():
    lp = torch.full((2, 3), math.log(1 / 3), dtype=torch.float64)
    assert math.isinf(ctc_loss(lp, [0, 0], blank_id=2).item())
    with pytest.raises(ContractError):
        ctc_loss(lp, [2], blank_id=2)


def test_batch_ctc_skips_infeasible():
    lp = torch.full((2, 3, 3), math.log(1 / 3), dtype=torch.float64)
    out = batch_ctc_loss(lp, torch.tensor([3, 1]), [[0, 1], [0, 1]], blank_id=2)
    assert out.skipped == 1
    assert abs(out.loss.item() - ctc_loss(lp[0], [0, 1], 2).item()) < 1e-12

    none = batch_ctc_loss(lp, torch.tensor([1, 1]), [[0, 1], [1, 1]], blank_id=2)
    assert none.skipped == 2 and none.loss.item() == 0.0


def test_ctc_gradients_flow_through_logits():
    logits = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    assert gradcheck(lambda x: ctc_loss(torch.log_softmax(x, -1), [0, 1], 2), (logits,))


def test_teacher_forcing_pair():
    y_in, y_out, pad = teacher_forcing_pair([[1, 2, 9], [9]], sos_id=8, pad_id=10)
    assert y_in.tolist() == [[8, 1, 2], [8, 10, 10]]
    assert y_out.tolist() == [[1, 2, 9], [9, 10, 10]]
    assert pad.tolist() == [[False, False, False], [False, True, True]]


def test_attention_ce_cases():
    uniform = torch.zeros(3, 4, dtype=torch.float64)
    assert abs(attention_ce_loss(uniform, torch.tensor([0, 3, 1])).item() - 3 * math.log(4)) < 1e-12

    peaked = torch.full((2, 4), -1e4, dtype=torch.float64)
    peaked[0, 2] = peaked[1, 1] = 1e4
    assert attention_ce_loss(peaked, torch.tensor([2, 1])).item() < 1e-12

    with pytest.raises(ShapeError):
        attention_ce_loss(uniform, torch.tensor([0, 1]))


def test_attention_ce_ignores_padding_and_averages_over_batch():
    logits = torch.zeros(2, 3, 4, dtype=torch.float64)
    targets = torch.tensor([[0, 1, 2], [0, 3, 3]])
    pad = torch.tensor([[False, False, False], [False, True, True]])
    assert abs(attention_ce_loss(logits, targets, pad).item() - 2 * math.log(4)) < 1e-12


def test_combine_modality_arithmetic():
    c, a = torch.tensor(2.0), torch.tensor(1.0)
    assert abs(combine_modality(c, a, LossWeights(lambda_ctc=0.1)).item() - 1.1) < 1e-6
    assert combine_modality(c, a, LossWeights(lambda_ctc=1.0)).item() == 2.0
    assert combine_modality(c, a, LossWeights(lambda_ctc=0.0)).item() == 1.0


def _per_mod(v, a, av):
    return {Modality.V: torch.tensor(v, dtype=torch.float64),
            Modality.A: torch.tensor(a, dtype=torch.float64),
            Modality.AV: torch.tensor(av, dtype=torch.float64)}


def test_supervised_loss_arithmetic():
    assert abs(supervised_loss(_per_mod(1.0, 1.0, 1.0), LossWeights(lambda_v=0.3)).item() - 1.7) < 1e-12
    assert supervised_loss(_per_mod(2.0, 5.0, 7.0), LossWeights(lambda_v=1.0)).item() == 2.0
    assert supervised_loss(_per_mod(2.0, 5.0, 7.0), LossWeights(lambda_v=0.0)).item() == 12.0
    with pytest.raises(ContractError, match="av"):
        supervised_loss({Modality.V: torch.tensor(1.0), Modality.A: torch.tensor(1.0)}, LossWeights())


def test_semi_loss_arithmetic_and_reduction():
    ones = _per_mod(1.0, 1.0, 1.0)
    w = LossWeights(gamma_a=0.5, gamma_v=0.2, lambda_v=0.3)
    assert abs(semi_loss(ones, ones, w).item() - 1.7) < 1e-12

    labelled, unlabelled = _per_mod(1.5, 2.5, 3.5), _per_mod(9.0, 9.0, 9.0)
    full = LossWeights(gamma_a=1.0, gamma_v=1.0, lambda_v=0.3)
    assert abs(semi_loss(labelled, unlabelled, full).item() - supervised_loss(labelled, full).item()) < 1e-12


def test_modality_loss_bundle():
    ml = modality_loss(torch.tensor(2.0), torch.tensor(1.0), LossWeights())
    assert abs(ml.combined.item() - 1.1) < 1e-6
    assert abs(supervised_loss({m: ml for m in ALL_MODALITIES}, LossWeights()).item() - 1.1 * 1.7) < 1e-5


def test_loss_weights_validation():
    with pytest.raises(ConfigError, match="gamma_a"):
        LossWeights(gamma_a=1.5)
    w = LossWeights(tau=0.8, tau_attn=0.5)
    assert (w.ctc_threshold, w.attn_threshold) == (0.8, 0.5)


def test_unlabelled_ctc_loss_cases():
    probs = torch.tensor([[0.9, 0.05, 0.05], [0.2, 0.7, 0.1], [0.1, 0.1, 0.8]], dtype=torch.float64)
    frames = probs.argmax(-1)
    zeros = torch.zeros(3, dtype=torch.bool)
    assert unlabelled_ctc_loss(probs.log(), frames, zeros).item() == 0.0
    assert unlabelled_ctc_loss(probs.log(), frames, zeros, normalisation="none").item() == 0.0

    kept = torch.tensor([True, False, True])
    expected = -(math.log(0.9) + math.log(0.8))
    assert abs(unlabelled_ctc_loss(probs.log(), frames, kept, "none").item() - expected) < 1e-12
    assert abs(unlabelled_ctc_loss(probs.log(), frames, kept, "kept").item() - expected / 2) < 1e-12

    with pytest.raises(ContractError):
        unlabelled_ctc_loss(probs.log(), frames[:2], kept[:2])
    with pytest.raises(ConfigError):
        unlabelled_ctc_loss(probs.log(), frames, kept, "per-frame")


def test_unlabelled_attention_loss_reduces_to_supervised_ce():
    torch.manual_seed(0)
    logits = torch.randn(2, 3, 5, dtype=torch.float64)
    tokens = torch.tensor([[1, 2, 4], [0, 4, 4]])
    ones = torch.ones(2, 3, dtype=torch.bool)
    got = unlabelled_attention_loss(logits, tokens, ones, normalisation="none")
    assert abs(got.item() - attention_ce_loss(logits, tokens).item()) < 1e-12
    assert unlabelled_attention_loss(logits, tokens, torch.zeros_like(ones)).item() == 0.0
    with pytest.raises(ShapeError):
        unlabelled_attention_loss(logits, tokens[:, :2], ones[:, :2])


def test_unlabelled_attention_immediate_eos():
    logits = torch.log(torch.tensor([[0.1, 0.1, 0.8]], dtype=torch.float64))
    eos = torch.tensor([2])
    kept = unlabelled_attention_loss(logits, eos, torch.tensor([True]))
    assert abs(kept.item() + math.log(0.8)) < 1e-12
    assert unlabelled_attention_loss(logits, eos, torch.tensor([False])).item() == 0.0


def test_full_loss_graph_gradcheck():
    blank = 3
    w = LossWeights()
    targets = torch.tensor([[0, 1, 4]])

    def total(ctc_logits, att_logits):
        per_mod = {}
        for i, m in enumerate(ALL_MODALITIES):
            lp = torch.log_softmax(ctc_logits[i], -1)
            c = ctc_loss(lp, [0, 1], blank)
            a = attention_ce_loss(att_logits[i:i + 1], targets)
            per_mod[m] = modality_loss(c, a, w)
        return supervised_loss(per_mod, w)

    torch.manual_seed(3)
    ctc_logits = torch.randn(3, 4, 4, dtype=torch.float64, requires_grad=True)
    att_logits = torch.randn(3, 3, 5, dtype=torch.float64, requires_grad=True)
    assert gradcheck(total, (ctc_logits, att_logits))


def test_semi_loss_coefficients_match_finite_differences():
    w = LossWeights(gamma_a=0.5, gamma_v=0.2, lambda_v=0.3)
    expected = {
        ("labelled", Modality.V): 0.2 * 0.3, ("labelled", Modality.A): 0.5 * 0.7, ("labelled", Modality.AV): 0.5 * 0.7,
        ("unlabelled", Modality.V): 0.8 * 0.3, ("unlabelled", Modality.A): 0.5 * 0.7, ("unlabelled", Modality.AV): 0.5 * 0.7,
    }
    base = {"labelled": [1.3, 0.4, 2.2], "unlabelled": [0.7, 1.9, 0.1]}
    eps = 1e-4
    for (side, m), coeff in expected.items():
        def aggregate(delta: float) -> float:
            values = {k: _per_mod(*v) for k, v in base.items()}
            values[side][m] = values[side][m] + delta
            return semi_loss(values["labelled"], values["unlabelled"], w).item()

        numeric = (aggregate(eps) - aggregate(-eps)) / (2 * eps)
        assert abs(numeric - coeff) < 1e-9, (side, m)

    parts = {k: {m: t.requires_grad_() for m, t in _per_mod(*v).items()} for k, v in base.items()}
    semi_loss(parts["labelled"], parts["unlabelled"], w).backward()
    for (side, m), coeff in expected.items():
        assert abs(parts[side][m].grad.item() - coeff) < 1e-12


def test_filtered_positions_receive_no_gradient():
    torch.manual_seed(4)
    log_probs = torch.log_softmax(torch.randn(2, 4, 5, dtype=torch.float64), -1).requires_grad_()
    frames = torch.randint(0, 5, (2, 4))
    kept = torch.tensor([[True, False, True, False], [False, False, True, True]])
    for norm in ("kept", "none"):
        log_probs.grad = None
        unlabelled_ctc_loss(log_probs, frames, kept, norm).backward()
        assert torch.count_nonzero(log_probs.grad[~kept]) == 0
        assert torch.count_nonzero(log_probs.grad[kept]) > 0

    logits = torch.randn(2, 3, 5, dtype=torch.float64, requires_grad=True)
    tokens = torch.tensor([[1, 2, 8], [0, 4, 3]])  # 8 is padding, beyond the logit range
    kept = torch.tensor([[True, False, False], [True, True, False]])
    unlabelled_attention_loss(logits, tokens, kept).backward()
    assert torch.count_nonzero(logits.grad[~kept]) == 0
    assert torch.count_nonzero(logits.grad[kept]) > 0
