from __future__ import annotations

import json

import pytest

from backend.config import (
    RunManifest,
    apply_overrides,
    load_data_manifest,
    load_manifest,
    manifest_from_dict,
    parse_override,
    save_manifest,
)
from backend.errors import ConfigError


def test_parse_override_values():
    assert parse_override("optim.peak_lr=0.001") == (["optim", "peak_lr"], 0.001)
    assert parse_override("decode.method=greedy_ctc") == (["decode", "method"], "greedy_ctc")
    assert parse_override("shared=false") == (["shared"], False)
    with pytest.raises(ConfigError):
        parse_override("optim.peak_lr")


def test_apply_overrides_builds_sections():
    data = apply_overrides({}, ["loss.tau=0.5", "optim.betas=[0.8, 0.9]"])
    assert data == {"loss": {"tau": 0.5}, "optim": {"betas": [0.8, 0.9]}}
    with pytest.raises(ConfigError, match="not a section"):
        apply_overrides({"stage": "semi"}, ["stage.x=1"])


def test_defaults_without_a_file():
    manifest = load_manifest()
    assert manifest == RunManifest()
    assert manifest.loss.lambda_v == 0.3 and manifest.loss.tau == 0.8
    assert manifest.optim.betas == (0.9, 0.98)
    assert manifest.decode.alpha == 0.1


def test_manifest_file_and_overrides(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"stage": "semi", "model": {"preset": "desk", "attn_dim": 32},
                                "optim": {"betas": [0.9, 0.95]}}))
    manifest = load_manifest(str(path), ["loss.gamma_a=0.7", "model.encoder_blocks=2"])
    assert manifest.stage == "semi"
    assert manifest.model.attn_dim == 32 and manifest.model.encoder_blocks == 2
    assert manifest.model.decoder_blocks == 2
    assert manifest.optim.betas == (0.9, 0.95)
    assert manifest.loss.gamma_a == 0.7


def test_invalid_fields_are_named():
    with pytest.raises(ConfigError, match="loss.gamma_a"):
        load_manifest("", ["loss.gamma_a=2.0"])
    with pytest.raises(ConfigError, match="Unknown key.*in optim"):
        load_manifest("", ["optim.learning_rate=0.1"])
    with pytest.raises(ConfigError, match="stage"):
        load_manifest("", ["stage=finetune"])
    with pytest.raises(ConfigError, match="model.attn_heads"):
        load_manifest("", ["model.attn_dim=30"])


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(str(tmp_path / "absent.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_manifest(str(bad))


def test_saved_manifest_reloads_identically(tmp_path):
    manifest = load_manifest("", ["stage=pretrain", "mask.start_prob=0.5", "pseudo.sampling=soft"])
    path = save_manifest(manifest, str(tmp_path))
    with open(path, encoding="utf-8") as f:
        assert manifest_from_dict(json.load(f)) == manifest


def test_data_manifest():
    dm = load_data_manifest("", ["corpus.vocab_size=6", "n_utterances=40", "n_eval=5"])
    assert dm.corpus.vocab_size == 6 and dm.n_utterances == 40 and dm.n_eval == 5
    with pytest.raises(ConfigError, match="vocab_size"):
        load_data_manifest("", ["corpus.vocab_size=1"])
