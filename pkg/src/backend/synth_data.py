# src/backend/synth_data.py
"""Synthetic "talking symbols" corpus.

Every utterance is a latent token sequence rendered twice: a low-rate,
noisy video-like view and an ``r``-times faster, cleaner audio-like view.
The two views are time-aligned (``T_a = r * T_v``) the same way lip frames
and waveform samples are.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .errors import ConfigError, NumericError
from .tokenizer import Tokenizer

logger = logging.getLogger(__name__)

# Independent RNG streams derived from the corpus seed.
_PATTERN_STREAM = 0
_UTTERANCE_STREAM = 1


@dataclass(frozen=True)
class CorpusConfig:
    vocab_size: int = 20
    min_utterance_tokens: int = 3
    max_utterance_tokens: int = 8
    frames_per_token: int = 3
    frames_jitter: int = 1
    gap_frames: int = 1
    video_dim: int = 16
    audio_rate_ratio: int = 4
    audio_dim: int = 8
    video_noise_sigma: float = 0.5
    audio_noise_sigma: float = 0.1
    seed: int = 42

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError(f"corpus.vocab_size must be >= 2, got {self.vocab_size}")
        if self.min_utterance_tokens < 1:
            raise ConfigError("corpus.min_utterance_tokens must be >= 1")
        if self.max_utterance_tokens < self.min_utterance_tokens:
            raise ConfigError("corpus.max_utterance_tokens must be >= min_utterance_tokens")
        if self.frames_per_token < 1 or self.frames_jitter < 0:
            raise ConfigError("corpus.frames_per_token must be >= 1 and frames_jitter >= 0")
        if self.gap_frames < 0:
            raise ConfigError("corpus.gap_frames must be >= 0")
        if self.audio_rate_ratio < 1:
            raise ConfigError(f"corpus.audio_rate_ratio must be >= 1, got {self.audio_rate_ratio}")
        if self.video_dim < 1 or self.audio_dim < 1:
            raise ConfigError("corpus.video_dim and corpus.audio_dim must be >= 1")
        if self.video_noise_sigma < 0 or self.audio_noise_sigma < 0:
            raise ConfigError("corpus noise sigmas must be >= 0")
        Tokenizer(self.vocab_size)  # alphabet bound

    @property
    def tokenizer(self) -> Tokenizer:
        return Tokenizer(self.vocab_size)


@dataclass(frozen=True)
class AugmentConfig:
    video_mask_max_frac: float = 0.4
    audio_mask_max_frac: float = 0.6
    frames_per_second: int = 8

    def __post_init__(self) -> None:
        for name in ("video_mask_max_frac", "audio_mask_max_frac"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"augment.{name} must be in [0, 1], got {value}")
        if self.frames_per_second < 1:
            raise ConfigError("augment.frames_per_second must be >= 1")


@dataclass
class UnlabelledSample:
    uid: int
    video: np.ndarray  # [T_v, video_dim]
    audio: np.ndarray  # [r * T_v, audio_dim]

    @property
    def num_frames(self) -> int:
        return int(self.video.shape[0])

    @property
    def rate_ratio(self) -> int:
        return int(self.audio.shape[0] // max(1, self.video.shape[0]))


@dataclass
class LabelledSample(UnlabelledSample):
    labels: List[int] = field(default_factory=list)


Sample = Union[LabelledSample, UnlabelledSample]


@dataclass
class CorpusSplits:
    labelled: List[LabelledSample]
    unlabelled: List[UnlabelledSample]
    eval: List[LabelledSample]
    config: CorpusConfig


@dataclass
class Batch:
    """One training step worth of samples, before collation."""
    labelled: List[LabelledSample]
    unlabelled: List[UnlabelledSample] = field(default_factory=list)


@dataclass
class ViewBatch:
    """Collated, zero-padded views. ``pad_mask`` is True on padded frames."""
    video: torch.Tensor  # [B, T_v, video_dim]
    audio: torch.Tensor  # [B, r * T_v, audio_dim]
    lengths: torch.Tensor  # [B] valid video frames
    uids: List[int]
    labels: Optional[List[List[int]]] = None

    @property
    def size(self) -> int:
        return int(self.video.shape[0])

    @property
    def pad_mask(self) -> torch.Tensor:
        steps = torch.arange(self.video.shape[1], device=self.lengths.device)
        return steps[None, :] >= self.lengths[:, None]


class ViewRenderer:
    """Fixed per-token patterns for both views, derived from the corpus seed."""

    def __init__(self, cfg: CorpusConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, _PATTERN_STREAM])
        self.video_patterns = rng.standard_normal((cfg.vocab_size, cfg.video_dim))
        self.audio_patterns = rng.standard_normal(
            (cfg.vocab_size, cfg.audio_rate_ratio, cfg.audio_dim)
        )

    def render_views(
        self, tokens: Sequence[int], rng: np.random.Generator
    ) -> Tuple[np.ndarray, np.ndarray]:
        cfg = self.cfg
        r = cfg.audio_rate_ratio
        video_frames: List[np.ndarray] = []
        audio_frames: List[np.ndarray] = []
        for i, tok in enumerate(tokens):
            if not 0 <= int(tok) < cfg.vocab_size:
                raise ConfigError(f"token id {tok} outside [0, {cfg.vocab_size})")
            if i > 0 and cfg.gap_frames:
                video_frames.append(np.zeros((cfg.gap_frames, cfg.video_dim)))
                audio_frames.append(np.zeros((cfg.gap_frames * r, cfg.audio_dim)))
            k = int(rng.integers(cfg.frames_per_token - cfg.frames_jitter,
                                 cfg.frames_per_token + cfg.frames_jitter + 1))
            k = max(1, k)
            video_frames.append(np.repeat(self.video_patterns[tok][None, :], k, axis=0))
            audio_frames.append(np.tile(self.audio_patterns[tok], (k, 1)))

        video = np.concatenate(video_frames, axis=0)
        audio = np.concatenate(audio_frames, axis=0)
        if cfg.video_noise_sigma > 0:
            video = video + rng.normal(0.0, cfg.video_noise_sigma, size=video.shape)
        if cfg.audio_noise_sigma > 0:
            audio = audio + rng.normal(0.0, cfg.audio_noise_sigma, size=audio.shape)
        return video.astype(np.float32), audio.astype(np.float32)


def _render_utterance(renderer: ViewRenderer, uid: int) -> LabelledSample:
    cfg = renderer.cfg
    rng = np.random.default_rng([cfg.seed, _UTTERANCE_STREAM, uid])
    n_tokens = int(rng.integers(cfg.min_utterance_tokens, cfg.max_utterance_tokens + 1))
    tokens = [int(t) for t in rng.integers(0, cfg.vocab_size, size=n_tokens)]
    video, audio = renderer.render_views(tokens, rng)
    return LabelledSample(uid=uid, video=video, audio=audio, labels=tokens)


def generate_corpus(
    cfg: CorpusConfig,
    n_utterances: int,
    labelled_fraction: float,
    n_eval: Optional[int] = None,
    workers: int = 1,
) -> CorpusSplits:
    """Render a corpus. Pure function of its arguments (``workers`` only changes speed)."""
    if n_utterances < 1:
        raise ConfigError(f"n_utterances must be >= 1, got {n_utterances}")
    if not 0.0 < labelled_fraction <= 1.0:
        raise ConfigError(f"labelled_fraction must be in (0, 1], got {labelled_fraction}")
    if n_eval is None:
        n_eval = max(1, n_utterances // 5)
    if n_eval < 0:
        raise ConfigError(f"n_eval must be >= 0, got {n_eval}")

    renderer = ViewRenderer(cfg)
    uids = list(range(n_utterances + n_eval))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(lambda u: _render_utterance(renderer, u), uids))
    else:
        samples = [_render_utterance(renderer, u) for u in uids]

    n_labelled = max(1, int(round(labelled_fraction * n_utterances)))
    train, evaluation = samples[:n_utterances], samples[n_utterances:]
    labelled = train[:n_labelled]
    unlabelled = [
        UnlabelledSample(uid=s.uid, video=s.video, audio=s.audio) for s in train[n_labelled:]
    ]
    logger.info(
        "Generated corpus: %d labelled, %d unlabelled, %d eval utterances",
        len(labelled), len(unlabelled), len(evaluation),
    )
    return CorpusSplits(labelled=labelled, unlabelled=unlabelled, eval=evaluation, config=cfg)


def sample_window_span(window: int, max_frac: float, rng: np.random.Generator) -> Tuple[int, int]:
    """Span inside one window: length ~ U[0, max_frac * window], uniform start."""
    length = int(round(float(rng.uniform(0.0, max_frac * window))))
    length = min(max(length, 0), window)
    start = int(rng.integers(0, window - length + 1))
    return start, length


def _mask_windows(x: np.ndarray, window: int, max_frac: float, rng: np.random.Generator) -> None:
    if max_frac <= 0:
        return
    for begin in range(0, x.shape[0], window):
        size = min(window, x.shape[0] - begin)
        start, length = sample_window_span(size, max_frac, rng)
        if length:
            x[begin + start: begin + start + length] = 0.0


def zero_mask_augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """One zeroed span per one-second window, drawn independently for video and audio."""
    video = sample.video.copy()
    audio = sample.audio.copy()
    r = sample.rate_ratio
    _mask_windows(video, cfg.frames_per_second, cfg.video_mask_max_frac, rng)
    _mask_windows(audio, cfg.frames_per_second * r, cfg.audio_mask_max_frac, rng)
    return replace(sample, video=video, audio=audio)


def corrupt_audio(sample: Sample, snr_db: float, rng: np.random.Generator) -> Sample:
    """Add white noise at the requested signal-to-noise ratio. ``inf`` means clean."""
    if math.isinf(snr_db) and snr_db > 0:
        return sample
    if not math.isfinite(snr_db):
        raise NumericError(f"snr_db must be finite or +inf, got {snr_db}")
    audio = sample.audio.astype(np.float64)
    signal_power = float(np.mean(audio * audio))
    if signal_power <= 0.0:
        raise NumericError(f"Cannot corrupt utterance {sample.uid}: audio has zero power")
    noise_power = signal_power / (10.0 ** (snr_db / 10.0))
    noisy = audio + rng.normal(0.0, math.sqrt(noise_power), size=audio.shape)
    return replace(sample, audio=noisy.astype(sample.audio.dtype))


def collate(
    samples: Sequence[Sample],
    device: str = "cpu",
    dtype: torch.dtype = torch.float32,
) -> ViewBatch:
    if not samples:
        raise ConfigError("collate: empty sample list")
    r = samples[0].rate_ratio
    max_t = max(s.num_frames for s in samples)
    video = np.zeros((len(samples), max_t, samples[0].video.shape[1]), dtype=np.float64)
    audio = np.zeros((len(samples), max_t * r, samples[0].audio.shape[1]), dtype=np.float64)
    for i, s in enumerate(samples):
        video[i, : s.num_frames] = s.video
        audio[i, : s.audio.shape[0]] = s.audio
    labels = None
    if all(isinstance(s, LabelledSample) for s in samples):
        labels = [list(s.labels) for s in samples]
    return ViewBatch(
        video=torch.as_tensor(video, dtype=dtype, device=device),
        audio=torch.as_tensor(audio, dtype=dtype, device=device),
        lengths=torch.tensor([s.num_frames for s in samples], dtype=torch.long, device=device),
        uids=[s.uid for s in samples],
        labels=labels,
    )


def make_batches(
    samples: Sequence[Sample],
    batch_size: int,
    max_frames: int,
    rng: np.random.Generator,
) -> List[List[Sample]]:
    """Shuffle, then pack up to ``batch_size`` utterances under a video-frame cap."""
    order = rng.permutation(len(samples))
    batches: List[List[Sample]] = []
    current: List[Sample] = []
    frames = 0
    for idx in order:
        s = samples[int(idx)]
        if current and (len(current) >= batch_size or frames + s.num_frames > max_frames):
            batches.append(current)
            current, frames = [], 0
        current.append(s)
        frames += s.num_frames
    if current:
        batches.append(current)
    return batches
