from __future__ import annotations

import itertools
import math

import pytest
import torch
import torch.nn as nn

from backend.errors import ConfigError, ContractError
from backend.losses import teacher_forcing_pair
from backend.model import Modality, USRModel
from backend.pseudo_label import (
    KeptFractionMeter,
    PseudoConfig,
    TeacherState,
    confidence_filter,
    decoder_candidates,
    ema_update,
    generate_attention_pseudo,
    generate_ctc_pseudo,
    generate_pseudo_labels,
    kept_fraction,
    masks_kept_fraction,
    momentum_at,
    momentum_schedule,
)
from backend.synth_data import collate

from conftest import tiny_model_config


class FixedDistribution:
    """Stands in for the teacher: the same next-token / per-frame distribution everywhere."""

    def __init__(self, probs: torch.Tensor):
        self.log_probs = probs.log()

    def ctc_head(self, enc_final):
        b, t, _ = enc_final.shape
        return self.log_probs.expand(b, t, -1)

    def next_token_log_probs(self, enc_final, enc_pad_mask, y_in):
        return self.log_probs.expand(y_in.shape[0], -1)


class PrefixDistribution:
    """Next-token distribution that depends on the whole prefix, drawn once per prefix."""

    def __init__(self, vocab_total: int, seed: int):
        self.vocab_total = vocab_total
        self.seed = seed

    def probs(self, prefix) -> torch.Tensor:
        gen = torch.Generator().manual_seed(hash((self.seed,) + tuple(prefix)) % (2 ** 31))
        return torch.softmax(2.0 * torch.randn(self.vocab_total, generator=gen, dtype=torch.float64), -1)

    def next_token_log_probs(self, enc_final, enc_pad_mask, y_in):
        return torch.stack([self.probs(row[1:].tolist()).log() for row in y_in])


def _scalar(value: float) -> nn.Linear:
    layer = nn.Linear(1, 1, bias=False)
    with torch.no_grad():
        layer.weight.fill_(value)
    return layer


def test_ema_update_boundaries_and_arithmetic():
    teacher, student = _scalar(1.0), _scalar(0.0)
    ema_update(teacher, student, 0.999)
    assert abs(teacher.weight.item() - 0.999) < 1e-7

    ema_update(teacher, student, 1.0)
    assert abs(teacher.weight.item() - 0.999) < 1e-7

    ema_update(teacher, _scalar(0.25), 0.0)
    assert teacher.weight.item() == 0.25


def test_ema_update_contracts_distance():
    torch.manual_seed(0)
    teacher, student = nn.Linear(3, 2).double(), nn.Linear(3, 2).double()
    before = torch.cat([(a - b).flatten() for a, b in zip(teacher.parameters(), student.parameters())]).norm()
    ema_update(teacher, student, 0.9)
    after = torch.cat([(a - b).flatten() for a, b in zip(teacher.parameters(), student.parameters())]).norm()
    assert abs(after.item() - 0.9 * before.item()) < 1e-12


def test_ema_update_rejects_mismatched_models():
    with pytest.raises(ContractError):
        ema_update(nn.Linear(3, 2), nn.Linear(3, 3), 0.5)
    with pytest.raises(ContractError):
        ema_update(nn.Linear(3, 2), nn.Linear(3, 2, bias=False), 0.5)
    with pytest.raises(ContractError):
        ema_update(nn.Linear(3, 2), nn.Linear(3, 2), 1.5)


def test_momentum_schedule_endpoints():
    assert abs(momentum_schedule(0, 100) - 0.999) < 1e-12
    assert abs(momentum_schedule(50, 100) - 0.9995) < 1e-12
    assert momentum_schedule(100, 100) == 1.0
    assert momentum_schedule(500, 100) == 1.0
    values = [momentum_schedule(s, 100) for s in range(101)]
    assert all(a <= b for a, b in zip(values, values[1:]))

    assert momentum_at(PseudoConfig(momentum_schedule="constant", mu0=0.99), 70, 100) == 0.99


def test_pseudo_config_validation():
    with pytest.raises(ConfigError, match="sampling"):
        PseudoConfig(sampling="beam")
    with pytest.raises(ConfigError, match="mu0"):
        PseudoConfig(mu0=1.5)


def test_confidence_filter_cases():
    conf = torch.tensor([0.9, 0.7, 0.85])
    assert confidence_filter(conf, 0.8).tolist() == [True, False, True]
    assert confidence_filter(conf, 0.0).all()
    assert confidence_filter(torch.tensor([1.0, 0.999]), 1.0).tolist() == [True, False]
    with pytest.raises(ConfigError):
        confidence_filter(conf, -0.1)


def test_kept_fraction_absent_window():
    assert kept_fraction(0, 0) is None
    assert masks_kept_fraction([]) is None
    assert masks_kept_fraction([torch.ones(3, dtype=torch.bool), torch.ones(2, dtype=torch.bool)]) == 1.0
    assert KeptFractionMeter().kept_fraction("ctc") is None


def test_ctc_pseudo_one_hot_and_uniform():
    one_hot = torch.tensor([0.0, 0.0, 1.0, 0.0], dtype=torch.float64).clamp(min=1e-300)
    frames, conf = generate_ctc_pseudo(FixedDistribution(one_hot), torch.zeros(2, 3, 1))
    assert frames.tolist() == [[2, 2, 2]] * 2
    assert torch.allclose(conf, torch.ones(2, 3, dtype=torch.float64))

    uniform = torch.full((9,), 1 / 9, dtype=torch.float64)
    _, conf = generate_ctc_pseudo(FixedDistribution(uniform), torch.zeros(1, 4, 1))
    assert torch.allclose(conf, torch.full((1, 4), 1 / 9, dtype=torch.float64))
    assert not confidence_filter(conf, 0.8).any()


def test_attention_pseudo_immediate_eos(tok):
    probs = torch.full((tok.vocab_total,), 0.6 / (tok.vocab_total - 1), dtype=torch.float64)
    probs[tok.eos_id] = 0.4
    tokens, conf, valid = generate_attention_pseudo(
        FixedDistribution(probs), torch.zeros(1, 3, 1), None, torch.tensor([5]), tok
    )
    assert tokens.tolist() == [[tok.eos_id]]
    assert abs(conf.item() - 0.4) < 1e-12
    assert valid.tolist() == [[True]]


def test_attention_pseudo_respects_length_cap(tok):
    probs = torch.full((tok.vocab_total,), 0.01, dtype=torch.float64)
    probs[tok.blank_id] = 0.5  # never a decoder candidate
    probs[1] = 0.3
    probs = probs / probs.sum()
    tokens, conf, valid = generate_attention_pseudo(
        FixedDistribution(probs), torch.zeros(2, 3, 1), None, torch.tensor([2, 4]), tok
    )
    assert tokens.tolist() == [[1, 1, tok.pad_id, tok.pad_id], [1, 1, 1, 1]]
    assert valid.sum(dim=1).tolist() == [2, 4]
    assert conf[0, 2:].abs().sum().item() == 0.0
    assert tok.blank_id not in decoder_candidates(tok).tolist()


def test_soft_sampling_is_seeded(tiny_model, tiny_corpus, tok):
    views = collate(tiny_corpus.unlabelled[:3], dtype=torch.float64)
    enc = tiny_model.forward_encoder(views.video, views.audio, views.lengths, (Modality.AV,))
    runs = []
    for _ in range(2):
        gen = torch.Generator().manual_seed(5)
        runs.append(generate_attention_pseudo(tiny_model, enc.outputs.final, enc.pad_mask,
                                              views.lengths + 2, tok, "soft", gen)[0])
    assert torch.equal(runs[0], runs[1])


def test_greedy_pseudo_labels_replay_under_teacher_forcing(tiny_model, tiny_corpus, tok):
    teacher = TeacherState(tiny_model)
    views = collate(tiny_corpus.unlabelled[:3], dtype=torch.float64)
    labels = generate_pseudo_labels(teacher, views, tok, PseudoConfig(), tau_ctc=0.8, tau_attn=0.8)
    assert teacher.forward_count == 3

    enc = teacher.model.forward_encoder(views.video, views.audio, views.lengths, (Modality.AV,))
    seqs = [labels.attn_tokens[i][labels.attn_valid[i]].tolist() for i in range(3)]
    y_in, y_out, pad = teacher_forcing_pair(seqs, tok.sos_id, tok.pad_id)
    with torch.no_grad():
        logits = teacher.model.decode_teacher_forced(enc.outputs.final, enc.pad_mask, y_in, pad)
    allowed = decoder_candidates(tok)
    replay = allowed[logits[..., allowed].argmax(-1)]
    assert torch.equal(replay[~pad], y_out[~pad])

    assert labels.attn_lengths.max().item() <= int(views.lengths.max()) + 2
    assert torch.equal(labels.ctc_kept, (labels.ctc_conf >= 0.8) & labels.ctc_valid)
    assert not labels.ctc_conf[~labels.ctc_valid].any()


def test_teacher_is_frozen_copy(tiny_model):
    teacher = TeacherState(tiny_model)
    assert not any(p.requires_grad for p in teacher.model.parameters())
    assert not teacher.model.training
    with torch.no_grad():
        tiny_model.ctc_proj.bias.add_(1.0)
    assert not torch.equal(teacher.model.ctc_proj.bias, tiny_model.ctc_proj.bias)
    teacher.update(tiny_model, 0.0)
    assert torch.equal(teacher.model.ctc_proj.bias, tiny_model.ctc_proj.bias)
    assert teacher.momentum == 0.0


def test_teacher_state_round_trip():
    torch.manual_seed(0)
    student = USRModel(tiny_model_config())
    teacher = TeacherState(student)
    teacher.forward_count = 11
    other = TeacherState(USRModel(tiny_model_config()))
    other.load_state_dict(teacher.state_dict())
    assert other.forward_count == 11 and math.isclose(other.momentum, 0.999)
    for a, b in zip(teacher.model.parameters(), other.model.parameters()):
        assert torch.equal(a, b)


def test_greedy_pseudo_sequence_never_beats_the_best_path(tok):
    allowed = decoder_candidates(tok).tolist()
    for seed in range(30):
        for cap in (1, 2, 3):
            dist = PrefixDistribution(tok.vocab_total, seed)
            tokens, conf, valid = generate_attention_pseudo(dist, torch.zeros(1, 2, 1), None, torch.tensor([cap]), tok)
            greedy = tokens[0][valid[0]].tolist()
            greedy_prob = math.prod(conf[0][valid[0]].tolist())

            best = 0.0
            for n in range(1, cap + 1):
                for seq in itertools.product(allowed, repeat=n):
                    if tok.eos_id in seq[:-1] or (n < cap and seq[-1] != tok.eos_id):
                        continue
                    p = math.prod(dist.probs(seq[:i])[k].item() for i, k in enumerate(seq))
                    best = max(best, p)
                    if list(seq) == greedy:
                        assert abs(p - greedy_prob) < 1e-12
            assert greedy_prob <= best + 1e-15
