# src/backend/decode_eval.py
"""Decoding (greedy CTC, greedy attention, joint CTC/attention beam search) and WER.

Beam search runs on numpy in float64. The CTC side keeps, for every
hypothesis, the forward variables of its prefix ending in a non-blank and in
a blank, so extending a prefix by any set of candidate tokens costs one
vectorised pass over time.
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import editdistance
import numpy as np
import torch
from scipy.special import logsumexp

from .errors import ConfigError
from .model import Modality, USRModel
from .synth_data import LabelledSample, collate, corrupt_audio
from .tokenizer import Tokenizer

logger = logging.getLogger(__name__)

DECODE_METHODS = ("hybrid", "greedy_ctc", "greedy_attention")
NEG_INF = -np.inf


@dataclass(frozen=True)
class DecodeConfig:
    alpha: float = 0.1
    beam_size: int = 8
    beta: float = 0.0
    max_len_factor: float = 1.0
    method: str = "hybrid"

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"decode.alpha must be in [0, 1], got {self.alpha}")
        if self.beam_size < 1:
            raise ConfigError(f"decode.beam_size must be >= 1, got {self.beam_size}")
        if self.beta != 0.0:
            raise ConfigError("decode.beta must be 0: no language model is available for shallow fusion")
        if self.max_len_factor <= 0:
            raise ConfigError(f"decode.max_len_factor must be > 0, got {self.max_len_factor}")
        if self.method not in DECODE_METHODS:
            raise ConfigError(f"decode.method must be one of {DECODE_METHODS}, got {self.method!r}")

    @classmethod
    def full_scale(cls) -> "DecodeConfig":
        """Full-scale setting: beam 40."""
        return cls(beam_size=40)


def combine_scores(s_ctc: float, s_att: float, alpha: float) -> float:
    # a zero weight must drop its term even when that term is -inf
    if alpha == 0.0:
        return s_att
    if alpha == 1.0:
        return s_ctc
    return alpha * s_ctc + (1.0 - alpha) * s_att


@dataclass
class Hypothesis:
    tokens: Tuple[int, ...]
    s_att: float
    s_ctc: float
    alpha: float
    finished: bool = False
    ctc_state: Optional[Tuple[np.ndarray, np.ndarray]] = field(default=None, repr=False)

    @property
    def combined(self) -> float:
        return combine_scores(self.s_ctc, self.s_att, self.alpha)


@dataclass
class BeamResult:
    hypothesis: Hypothesis
    unfinished: bool = False  # no hypothesis reached eos within max_len

    @property
    def tokens(self) -> List[int]:
        return list(self.hypothesis.tokens)


def greedy_ctc_decode(log_probs, blank_id: int) -> List[int]:
    """Frame argmax, collapse repeats, drop blanks."""
    frames = np.asarray(torch.as_tensor(log_probs).argmax(dim=-1).cpu())
    out: List[int] = []
    prev = None
    for f in frames.tolist():
        if f != prev and f != blank_id:
            out.append(int(f))
        prev = f
    return out


class CTCPrefixScorer:
    """Incremental CTC prefix probabilities over one utterance.

    A state is ``(r_n, r_b)``: log-probabilities, per frame, of having
    emitted exactly the prefix with the last frame a non-blank (``r_n``) or
    a blank (``r_b``).
    """

    def __init__(self, log_probs: np.ndarray, blank_id: int):
        self.log_probs = np.asarray(log_probs, dtype=np.float64)
        self.blank_id = blank_id
        self.num_frames = self.log_probs.shape[0]

    def initial_state(self) -> Tuple[np.ndarray, np.ndarray]:
        r_n = np.full(self.num_frames, NEG_INF)
        r_b = np.cumsum(self.log_probs[:, self.blank_id])
        return r_n, r_b

    def extend(
        self,
        state: Tuple[np.ndarray, np.ndarray],
        last_token: Optional[int],
        candidates: Sequence[int],
    ) -> Tuple[np.ndarray, List[Tuple[np.ndarray, np.ndarray]]]:
        """Prefix scores of ``prefix + c`` for every candidate, and their states."""
        r_n_g, r_b_g = state
        cands = np.asarray(candidates, dtype=np.int64)
        t_len, n = self.num_frames, len(cands)
        x = self.log_probs[:, cands]  # [T, C]
        blank = self.log_probs[:, self.blank_id]

        phi = np.repeat(np.logaddexp(r_n_g, r_b_g)[:, None], n, axis=1)
        if last_token is not None:
            same = cands == last_token
            phi[:, same] = r_b_g[:, None]

        r_n = np.full((t_len, n), NEG_INF)
        r_b = np.full((t_len, n), NEG_INF)
        if last_token is None:
            r_n[0] = x[0]
        for t in range(1, t_len):
            r_n[t] = np.logaddexp(r_n[t - 1], phi[t - 1]) + x[t]
            r_b[t] = np.logaddexp(r_b[t - 1], r_n[t - 1]) + blank[t]

        # prefix mass: the new token is first emitted at frame t
        start = r_n[0] if last_token is None else np.full(n, NEG_INF)
        terms = np.vstack([start[None, :], phi[:-1] + x[1:]])
        with np.errstate(divide="ignore", invalid="ignore"):
            psi = logsumexp(terms, axis=0)
        states = [(r_n[:, j].copy(), r_b[:, j].copy()) for j in range(n)]
        return psi, states

    def final_score(self, state: Tuple[np.ndarray, np.ndarray]) -> float:
        """Log-probability that the whole output equals the prefix."""
        r_n, r_b = state
        if self.num_frames == 0:
            return NEG_INF
        return float(np.logaddexp(r_n[-1], r_b[-1]))


def ctc_prefix_score(log_probs, prefix: Sequence[int], blank_id: int) -> float:
    """log P(output starts with ``prefix``); 0 for the empty prefix."""
    scorer = CTCPrefixScorer(np.asarray(torch.as_tensor(log_probs).detach().cpu(), dtype=np.float64), blank_id)
    state = scorer.initial_state()
    score, last = 0.0, None
    for tok in prefix:
        psi, states = scorer.extend(state, last, [tok])
        score, state, last = float(psi[0]), states[0], tok
    return score


def ctc_sequence_score(log_probs, labels: Sequence[int], blank_id: int) -> float:
    """log P(output equals ``labels``), i.e. minus the CTC loss."""
    scorer = CTCPrefixScorer(np.asarray(torch.as_tensor(log_probs).detach().cpu(), dtype=np.float64), blank_id)
    state, last = scorer.initial_state(), None
    for tok in labels:
        _, states = scorer.extend(state, last, [tok])
        state, last = states[0], tok
    return scorer.final_score(state)


NextTokenScorer = Callable[[List[Tuple[int, ...]]], np.ndarray]


def hybrid_beam_search(
    ctc_log_probs: np.ndarray,
    next_token_scorer: NextTokenScorer,
    cfg: DecodeConfig,
    *,
    blank_id: int,
    eos_id: int,
    candidates: Sequence[int],
    max_len: int,
) -> BeamResult:
    """Length-synchronous beam search over ``alpha * S_ctc + (1 - alpha) * S_att``.

    ``next_token_scorer`` maps a list of prefixes (all the same length) to an
    ``[n, vocab]`` array of decoder log-probabilities. Prefixes longer than
    ``max_len`` are never built; at that length only eos may follow.
    """
    scorer = CTCPrefixScorer(ctc_log_probs, blank_id)
    alpha = cfg.alpha
    running = [Hypothesis(tokens=(), s_att=0.0, s_ctc=0.0, alpha=alpha, ctc_state=scorer.initial_state())]
    finished: List[Hypothesis] = []

    for step in range(max_len + 1):
        att = np.asarray(next_token_scorer([h.tokens for h in running]), dtype=np.float64)
        expansions: List[Hypothesis] = []
        for h, row in zip(running, att):
            if step < max_len:
                last = h.tokens[-1] if h.tokens else None
                psi, states = scorer.extend(h.ctc_state, last, candidates)
                for j, c in enumerate(candidates):
                    expansions.append(Hypothesis(
                        tokens=h.tokens + (int(c),), s_att=h.s_att + float(row[c]), s_ctc=float(psi[j]),
                        alpha=alpha, ctc_state=states[j],
                    ))
            expansions.append(Hypothesis(
                tokens=h.tokens, s_att=h.s_att + float(row[eos_id]),
                s_ctc=scorer.final_score(h.ctc_state), alpha=alpha, finished=True,
            ))

        expansions = [h for h in expansions if h.combined > NEG_INF]
        expansions.sort(key=lambda h: h.combined, reverse=True)
        kept = expansions[: cfg.beam_size]
        finished.extend(h for h in kept if h.finished)
        running = [h for h in kept if not h.finished]
        if not running:
            break
        # scores only fall as a hypothesis grows, so nothing running can overtake
        if finished and max(h.combined for h in finished) >= running[0].combined:
            break

    if finished:
        return BeamResult(hypothesis=max(finished, key=lambda h: h.combined))
    logger.warning("Beam search found no finished hypothesis within %d tokens", max_len)
    if running:
        return BeamResult(hypothesis=running[0], unfinished=True)
    return BeamResult(hypothesis=Hypothesis(tokens=(), s_att=NEG_INF, s_ctc=NEG_INF, alpha=alpha), unfinished=True)


def greedy_attention_search(
    next_token_scorer: NextTokenScorer,
    *,
    eos_id: int,
    candidates: Sequence[int],
    max_len: int,
) -> List[int]:
    """Pick the best content-or-eos token each step; eos is forced after ``max_len`` tokens."""
    tokens: Tuple[int, ...] = ()
    allowed = list(candidates) + [eos_id]
    for step in range(max_len + 1):
        row = np.asarray(next_token_scorer([tokens]), dtype=np.float64)[0]
        choice = allowed[int(np.argmax(row[allowed]))] if step < max_len else eos_id
        if choice == eos_id:
            break
        tokens = tokens + (choice,)
    return list(tokens)


# -- model-facing decoding ---------------------------------------------------

def _decoder_scorer(model: USRModel, enc_final: torch.Tensor, enc_pad: Optional[torch.Tensor], sos_id: int) -> NextTokenScorer:
    @torch.no_grad()
    def score(prefixes: List[Tuple[int, ...]]) -> np.ndarray:
        y = torch.tensor([(sos_id,) + p for p in prefixes], dtype=torch.long, device=enc_final.device)
        n = y.shape[0]
        memory = enc_final.expand(n, -1, -1)
        pad = None if enc_pad is None else enc_pad.expand(n, -1)
        return model.next_token_log_probs(memory, pad, y).double().cpu().numpy()

    return score


def max_decode_len(num_frames: int, cfg: DecodeConfig) -> int:
    return max(1, int(math.ceil(cfg.max_len_factor * num_frames)))


@torch.no_grad()
def decode_utterance(
    model: USRModel,
    sample: LabelledSample,
    modality: Modality,
    cfg: DecodeConfig,
    tok: Tokenizer,
    device: str = "cpu",
    dtype: torch.dtype = torch.float32,
) -> Tuple[List[int], bool]:
    """Decode one utterance through the ``modality`` path. Returns (tokens, unfinished)."""
    views = collate([sample], device, dtype)
    enc = model.forward_encoder(views.video, views.audio, views.lengths, modalities=(modality,))
    final = enc.final_for(modality)
    pad = enc.pad_mask_for(modality)
    ctc_lp = model.ctc_head(final)[0]
    if cfg.method == "greedy_ctc":
        return greedy_ctc_decode(ctc_lp, tok.blank_id), False

    scorer = _decoder_scorer(model, final, pad, tok.sos_id)
    content = list(range(tok.vocab_size))
    max_len = max_decode_len(sample.num_frames, cfg)
    if cfg.method == "greedy_attention":
        return greedy_attention_search(scorer, eos_id=tok.eos_id, candidates=content, max_len=max_len), False

    result = hybrid_beam_search(
        ctc_lp.double().cpu().numpy(), scorer, cfg,
        blank_id=tok.blank_id, eos_id=tok.eos_id, candidates=content, max_len=max_len,
    )
    return result.tokens, result.unfinished


# -- WER ---------------------------------------------------------------------

def edit_distance(reference: Sequence[int], hypothesis: Sequence[int]) -> int:
    return int(editdistance.eval(list(reference), list(hypothesis)))


def wer(reference: Sequence[int], hypothesis: Sequence[int]) -> Optional[float]:
    """Edits / reference length. An empty reference scores 0.0 against an empty hypothesis, else None."""
    if len(reference) == 0:
        return 0.0 if len(hypothesis) == 0 else None
    return edit_distance(reference, hypothesis) / len(reference)


def corpus_wer(pairs: Sequence[Tuple[Sequence[int], Sequence[int]]]) -> float:
    edits = sum(edit_distance(r, h) for r, h in pairs)
    total = sum(len(r) for r, _ in pairs)
    return edits / total if total else 0.0


@dataclass
class UtteranceResult:
    id: str
    modality: str
    reference: str
    hypothesis: str
    edits: int
    ref_len: int
    wer: Optional[float]
    unfinished: bool = False


@dataclass
class EvalReport:
    modality: str
    wer: float
    edits: int
    ref_tokens: int
    snr_db: Optional[float]
    utterances: List[UtteranceResult]

    def summary(self) -> dict:
        return {"summary": True, "modality": self.modality, "wer": self.wer, "edits": self.edits,
                "ref_tokens": self.ref_tokens, "snr_db": self.snr_db, "utterances": len(self.utterances)}

    def write_jsonl(self, path: str) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for u in self.utterances:
                f.write(json.dumps(asdict(u)) + "\n")
            f.write(json.dumps(self.summary()) + "\n")
        return path


def evaluate(
    model: USRModel,
    samples: Sequence[LabelledSample],
    modality: Modality,
    cfg: DecodeConfig,
    tok: Tokenizer,
    snr_db: Optional[float] = None,
    seed: int = 42,
    workers: int = 1,
    device: str = "cpu",
    dtype: torch.dtype = torch.float32,
) -> EvalReport:
    """Decode every utterance with one modality path of the shared model.

    ``snr_db`` adds white noise to the audio view first, drawn per utterance
    from ``(seed, uid)`` so results do not depend on ``workers``.
    """
    model.eval()
    modality = Modality(modality)

    def run(sample: LabelledSample) -> UtteranceResult:
        if snr_db is not None:
            sample = corrupt_audio(sample, snr_db, np.random.default_rng([seed, 7, sample.uid]))
        hyp, unfinished = decode_utterance(model, sample, modality, cfg, tok, device, dtype)
        edits = edit_distance(sample.labels, hyp)
        return UtteranceResult(
            id=f"eval-{sample.uid:06d}", modality=modality.value,
            reference=tok.detokenize(sample.labels), hypothesis=tok.detokenize(hyp),
            edits=edits, ref_len=len(sample.labels), wer=wer(sample.labels, hyp), unfinished=unfinished,
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, samples))
    else:
        results = [run(s) for s in samples]

    edits = sum(r.edits for r in results)
    total = sum(r.ref_len for r in results)
    report = EvalReport(
        modality=modality.value, wer=edits / total if total else 0.0, edits=edits,
        ref_tokens=total, snr_db=snr_db, utterances=results,
    )
    logger.info("Evaluated %d utterances (%s): WER %.4f", len(results), modality.value, report.wer)
    return report
