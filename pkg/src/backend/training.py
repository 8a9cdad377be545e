# src/backend/training.py
"""Training loops: supervised, semi-supervised (EMA teacher) and pre-training.

Each loop owns its model, optimizer and teacher. Batches for an epoch are
planned up front from seeded generators, augmented on a worker thread, and
consumed in plan order, so a run is a pure function of (manifest, corpus).
"""
from __future__ import annotations

import logging
import os
import queue
import threading
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .checkpoint import load_encoder_init, save_checkpoint
from .config import RunManifest, save_manifest
from .corpus_io import read_corpus
from .decode_eval import evaluate
from .device_utils import DeviceConfig, resolve_config, seed_everything
from .errors import ConfigError, TrainingError
from .losses import (
    LossWeights,
    PerModalityLosses,
    attention_ce_loss,
    batch_ctc_loss,
    loss_values,
    modality_loss,
    semi_loss,
    supervised_loss,
    teacher_forcing_pair,
    unlabelled_attention_loss,
    unlabelled_ctc_loss,
)
from .metrics import MetricsWriter
from .model import ALL_MODALITIES, Modality, ModelConfig, USRModel
from .optim import adamw_step, build_optimizer, freeze_encoder_blocks, lr_schedule
from .pretrain import apply_input_mask, batch_span_masks, build_targets, masked_cosine_loss, pretrain_loss
from .pseudo_label import KeptFractionMeter, PseudoLabelSet, TeacherState, generate_pseudo_labels, momentum_at
from .synth_data import CorpusSplits, Sample, ViewBatch, collate, make_batches, zero_mask_augment
from .tokenizer import Tokenizer

logger = logging.getLogger(__name__)

# RNG stream ids, combined with the run seed
LABELLED_STREAM = 11
UNLABELLED_STREAM = 12
MASK_STREAM = 13
SAMPLING_STREAM = 14

PREFETCH_DEPTH = 2


@dataclass
class TrainResult:
    stage: str
    out_dir: str
    checkpoints: Dict[str, str]
    metrics_path: str
    loss_trace: List[float]
    total_steps: int
    skipped_steps: int
    final_wer: Dict[str, float] = field(default_factory=dict)
    models: Dict[str, USRModel] = field(default_factory=dict, repr=False)

    @property
    def checkpoint(self) -> str:
        return self.checkpoints.get("final", next(iter(self.checkpoints.values()), ""))


@dataclass
class _Run:
    manifest: RunManifest
    corpus: CorpusSplits
    device: DeviceConfig
    tok: Tokenizer
    metrics: MetricsWriter
    seed: int

    @property
    def dtype(self) -> torch.dtype:
        return self.device.dtype


@dataclass
class _Step:
    labelled: Optional[ViewBatch] = None
    unlabelled_clean: Optional[ViewBatch] = None
    unlabelled_aug: Optional[ViewBatch] = None
    mask_keys: Optional[List[Tuple[int, int, int]]] = None  # (epoch, cycle, uid) per row


class _Failure:
    def __init__(self, exc: BaseException):
        self.exc = exc


def prefetch(items: Iterable, depth: int = PREFETCH_DEPTH) -> Iterator:
    """Produce ``items`` on a worker thread through a bounded queue, in order."""
    if depth <= 0:
        yield from items
        return
    q: "queue.Queue" = queue.Queue(maxsize=depth)
    done = object()

    def worker() -> None:
        try:
            for item in items:
                q.put(item)
        except BaseException as exc:  # handed to the consumer
            q.put(_Failure(exc))
        finally:
            q.put(done)

    threading.Thread(target=worker, name="usr-prefetch", daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, _Failure):
            raise item.exc
        yield item


def augment_rng(seed: int, stream: int, epoch: int, cycle: int, uid: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, epoch, cycle, uid])


def _stream_plan(
    samples: Sequence[Sample],
    batch_size: int,
    max_frames: int,
    seed: int,
    stream: int,
    epoch: int,
    n_steps: Optional[int] = None,
) -> List[Tuple[int, List[Sample]]]:
    """Batches for one epoch as (cycle, batch); cycles the stream to reach ``n_steps``."""
    if not samples and n_steps:
        raise ConfigError(f"cannot plan {n_steps} steps over an empty split")
    plan: List[Tuple[int, List[Sample]]] = []
    cycle = 0
    while True:
        for batch in make_batches(samples, batch_size, max_frames, np.random.default_rng([seed, stream, epoch, cycle])):
            plan.append((cycle, batch))
        if n_steps is None or len(plan) >= n_steps:
            break
        cycle += 1
    return plan if n_steps is None else plan[:n_steps]


def _augmented(run: _Run, samples: Sequence[Sample], stream: int, epoch: int, cycle: int) -> ViewBatch:
    aug = run.manifest.augment
    out = [zero_mask_augment(s, aug, augment_rng(run.seed, stream, epoch, cycle, s.uid)) for s in samples]
    return collate(out, run.device.device, run.dtype)


# -- graph construction ------------------------------------------------------

def labelled_losses(
    model: USRModel,
    views: ViewBatch,
    tok: Tokenizer,
    w: LossWeights,
    modalities: Sequence[Modality] = ALL_MODALITIES,
) -> Tuple[PerModalityLosses, int]:
    """Per-modality CTC + attention losses on labelled rows; returns (losses, skipped CTC samples)."""
    enc = model.forward_encoder(views.video, views.audio, views.lengths, modalities)
    targets = [list(l) + [tok.eos_id] for l in views.labels]
    y_in, y_out, y_pad = teacher_forcing_pair(targets, tok.sos_id, tok.pad_id, views.video.device)
    per_mod: PerModalityLosses = {}
    skipped = 0
    for m in modalities:
        final, pad = enc.final_for(m), enc.pad_mask_for(m)
        ctc = batch_ctc_loss(model.ctc_head(final), views.lengths, views.labels, tok.blank_id)
        skipped += ctc.skipped
        logits = model.decode_teacher_forced(final, pad, y_in, y_pad)
        per_mod[m] = modality_loss(ctc.loss, attention_ce_loss(logits, y_out, y_pad), w)
    return per_mod, skipped


def unlabelled_losses(
    model: USRModel,
    views: ViewBatch,
    pseudo: PseudoLabelSet,
    tok: Tokenizer,
    w: LossWeights,
    normalisation: str = "kept",
) -> PerModalityLosses:
    """Student losses against shared pseudo-labels, for all three modalities."""
    enc = model.forward_encoder(views.video, views.audio, views.lengths, ALL_MODALITIES)
    tokens = pseudo.attn_tokens
    sos = torch.full((tokens.shape[0], 1), tok.sos_id, dtype=torch.long, device=tokens.device)
    y_in = torch.cat([sos, tokens[:, :-1]], dim=1)
    y_pad = ~pseudo.attn_valid
    per_mod: PerModalityLosses = {}
    for m in ALL_MODALITIES:
        final, pad = enc.final_for(m), enc.pad_mask_for(m)
        ctc = unlabelled_ctc_loss(model.ctc_head(final), pseudo.ctc_frames, pseudo.ctc_kept, normalisation)
        logits = model.decode_teacher_forced(final, pad, y_in, y_pad)
        att = unlabelled_attention_loss(logits, tokens, pseudo.attn_kept, normalisation)
        per_mod[m] = modality_loss(ctc, att, w)
    return per_mod


def _zero_losses(like: torch.Tensor, w: LossWeights) -> PerModalityLosses:
    zero = like.new_zeros(())
    return {m: modality_loss(zero, zero, w) for m in ALL_MODALITIES}


@torch.no_grad()
def validate(
    model: USRModel,
    samples: Sequence[Sample],
    tok: Tokenizer,
    batch_size: int,
    device: str = "cpu",
    dtype: torch.dtype = torch.float32,
) -> Dict[Modality, Dict[str, float]]:
    """Teacher-forced attention accuracy and mean CTC loss per modality."""
    model.eval()
    correct = {m: 0 for m in ALL_MODALITIES}
    counted = {m: 0 for m in ALL_MODALITIES}
    ctc_sum = {m: 0.0 for m in ALL_MODALITIES}
    ctc_n = {m: 0 for m in ALL_MODALITIES}
    for start in range(0, len(samples), batch_size):
        views = collate(samples[start: start + batch_size], device, dtype)
        enc = model.forward_encoder(views.video, views.audio, views.lengths, ALL_MODALITIES)
        targets = [list(l) + [tok.eos_id] for l in views.labels]
        y_in, y_out, y_pad = teacher_forcing_pair(targets, tok.sos_id, tok.pad_id, device)
        for m in ALL_MODALITIES:
            final, pad = enc.final_for(m), enc.pad_mask_for(m)
            pred = model.decode_teacher_forced(final, pad, y_in, y_pad).argmax(dim=-1)
            correct[m] += int(((pred == y_out) & ~y_pad).sum())
            counted[m] += int((~y_pad).sum())
            ctc = batch_ctc_loss(model.ctc_head(final), views.lengths, views.labels, tok.blank_id)
            n = views.size - ctc.skipped
            ctc_sum[m] += float(ctc.loss) * n
            ctc_n[m] += n
    model.train()
    return {
        m: {
            "attention_accuracy": correct[m] / counted[m] if counted[m] else float("nan"),
            "ctc_loss": ctc_sum[m] / ctc_n[m] if ctc_n[m] else float("nan"),
        }
        for m in ALL_MODALITIES
    }


# -- setup -------------------------------------------------------------------

def _load_corpus(manifest: RunManifest) -> CorpusSplits:
    paths = manifest.corpus
    if not paths.labelled:
        raise ConfigError("corpus.labelled must name a corpus file")
    return read_corpus(paths.labelled, paths.unlabelled, paths.eval)


def _open_run(manifest: RunManifest, corpus: Optional[CorpusSplits], stage: str) -> _Run:
    if not manifest.out_dir:
        raise ConfigError("out_dir must be set for training runs")
    if corpus is None:
        corpus = _load_corpus(manifest)
    device = resolve_config(manifest.optim.device, manifest.optim.precision)
    os.makedirs(manifest.out_dir, exist_ok=True)
    save_manifest(manifest, manifest.out_dir)
    logger.info("Starting %s run in %s on %s/%s", stage, manifest.out_dir, device.device, device.precision)
    return _Run(
        manifest=manifest, corpus=corpus, device=device, tok=corpus.config.tokenizer,
        metrics=MetricsWriter(os.path.join(manifest.out_dir, "metrics.jsonl")), seed=manifest.optim.seed,
    )


def build_model(run: _Run) -> USRModel:
    cfg = run.corpus.config
    model_cfg: ModelConfig = run.manifest.model.with_corpus(
        cfg.video_dim, cfg.audio_dim, cfg.audio_rate_ratio, run.tok.vocab_total
    )
    model = USRModel(model_cfg).to(device=run.device.device, dtype=run.dtype)
    model.train()
    return model


def _check_skips(skipped: int, total: int, limit: float) -> None:
    if total and skipped / total > limit:
        raise TrainingError(
            f"{skipped} of {total} optimizer steps were skipped for non-finite values "
            f"(limit {limit:.1%}); check the learning rate and input data"
        )


def _save_epoch(
    run: _Run,
    key: str,
    epoch: int,
    step: int,
    model: USRModel,
    optimizer: torch.optim.Optimizer,
    teacher: Optional[USRModel] = None,
) -> Optional[str]:
    """Resumable snapshot: student, optimizer and teacher state, overwritten each time."""
    every = run.manifest.optim.save_every
    if not every or (epoch + 1) % every:
        return None
    return save_checkpoint(os.path.join(run.manifest.out_dir, f"{key}.ckpt"), model, run.corpus.config,
                           run.manifest.to_dict(), teacher=teacher, optimizer=optimizer,
                           extra={"epoch": epoch, "step": step})


def _step_optimizer(run: _Run, model: USRModel, optimizer, loss: torch.Tensor, lr: float) -> bool:
    if not bool(torch.isfinite(loss)):
        logger.warning("Skipping step: loss is %s", loss.item())
        optimizer.zero_grad(set_to_none=True)
        return False
    loss.backward()
    return adamw_step(optimizer, lr, run.manifest.optim.grad_clip).stepped


def _final_evaluation(run: _Run, models: Dict[Modality, USRModel]) -> Dict[str, float]:
    wers: Dict[str, float] = {}
    if not run.corpus.eval:
        return wers
    for m, model in models.items():
        report = evaluate(model, run.corpus.eval, m, run.manifest.decode, run.tok,
                          seed=run.seed, device=run.device.device, dtype=run.dtype)
        report.write_jsonl(os.path.join(run.manifest.out_dir, f"eval_{m.value}.jsonl"))
        run.metrics.log(run.manifest.stage, "wer", report.wer, split="eval", modality=m.value)
        wers[m.value] = report.wer
    return wers


def _log_validation(run: _Run, stage: str, epoch: int, model: USRModel) -> None:
    if not run.corpus.eval:
        return
    opt = run.manifest.optim
    scores = validate(model, run.corpus.eval, run.tok, opt.batch_size_labelled, run.device.device, run.dtype)
    for m, values in scores.items():
        run.metrics.log_many(stage, values, epoch=epoch, split="eval", modality=m.value)


# -- supervised --------------------------------------------------------------

def _train_labelled_model(
    run: _Run,
    modalities: Sequence[Modality],
    name: str,
) -> Tuple[USRModel, List[float], int, int]:
    manifest = run.manifest
    opt, w = manifest.optim, manifest.loss
    seed_everything(run.seed)
    model = build_model(run)
    freeze_encoder_blocks(model, opt.freeze_encoder_blocks)
    optimizer = build_optimizer(model, opt)

    plans = [
        _stream_plan(run.corpus.labelled, opt.batch_size_labelled, opt.max_frames_labelled,
                     run.seed, LABELLED_STREAM, epoch)
        for epoch in range(opt.total_epochs)
    ]
    warmup_steps = sum(len(p) for p in plans[: opt.warmup_epochs])
    total_steps = sum(len(p) for p in plans)

    trace: List[float] = []
    skipped = 0
    step = 0
    stage = "supervised" if name == "shared" else f"supervised_{name}"
    for epoch, plan in enumerate(plans):
        jobs = ((cycle, batch) for cycle, batch in plan)
        batches = prefetch(_Step(labelled=_augmented(run, b, LABELLED_STREAM, epoch, c)) for c, b in jobs)
        epoch_loss, ctc_skipped = 0.0, 0
        for prepared in batches:
            lr = lr_schedule(step, warmup_steps, total_steps, opt.peak_lr)
            per_mod, n_skip = labelled_losses(model, prepared.labelled, run.tok, w, modalities)
            ctc_skipped += n_skip
            if len(modalities) == len(ALL_MODALITIES):
                loss = supervised_loss(per_mod, w)
            else:
                loss = per_mod[modalities[0]].combined
            if not _step_optimizer(run, model, optimizer, loss, lr):
                skipped += 1
            value = loss.item()
            trace.append(value)
            run.metrics.log(stage, "loss", value, epoch=epoch, step=step)
            run.metrics.log(stage, "lr", lr, epoch=epoch, step=step)
            for key, v in loss_values(per_mod).items():
                mod, metric = key.split("/")
                run.metrics.log(stage, f"loss_{metric}", v, epoch=epoch, step=step, modality=mod)
            epoch_loss += value
            step += 1
        run.metrics.log(stage, "epoch_loss", epoch_loss / max(1, len(plan)), epoch=epoch)
        run.metrics.log(stage, "ctc_skipped", ctc_skipped, epoch=epoch)
        _log_validation(run, stage, epoch, model)
        _save_epoch(run, "last" if name == "shared" else f"last_{name}", epoch, step, model, optimizer)
        logger.info("[%s] epoch %d/%d loss %.4f", stage, epoch + 1, opt.total_epochs, epoch_loss / max(1, len(plan)))
    return model, trace, total_steps, skipped


def train_supervised(
    manifest: RunManifest,
    corpus: Optional[CorpusSplits] = None,
    evaluate_final: bool = True,
) -> TrainResult:
    """One shared model on all three modalities, or three unshared single-modality models."""
    run = _open_run(manifest, corpus, "supervised")
    try:
        if manifest.shared:
            model, trace, total, skipped = _train_labelled_model(run, ALL_MODALITIES, "shared")
            models = {m: model for m in ALL_MODALITIES}
            named = {"final": model}
        else:
            models, named, trace, total, skipped = {}, {}, [], 0, 0
            for m in ALL_MODALITIES:
                model, t, n, s = _train_labelled_model(run, (m,), m.value)
                models[m], named[f"final_{m.value}"] = model, model
                trace += t
                total += n
                skipped += s
        _check_skips(skipped, total, manifest.optim.max_skip_fraction)

        checkpoints = {
            key: save_checkpoint(os.path.join(manifest.out_dir, f"{key}.ckpt"), model,
                                 run.corpus.config, manifest.to_dict())
            for key, model in named.items()
        }
        wers = _final_evaluation(run, models) if evaluate_final else {}
    finally:
        run.metrics.close()
    return TrainResult(
        stage="supervised", out_dir=manifest.out_dir, checkpoints=checkpoints,
        metrics_path=run.metrics.path, loss_trace=trace, total_steps=total, skipped_steps=skipped,
        final_wer=wers, models={key: m for key, m in named.items()},
    )


# -- semi-supervised ---------------------------------------------------------

def train_semi(
    manifest: RunManifest,
    init: Optional[str] = None,
    corpus: Optional[CorpusSplits] = None,
    evaluate_final: bool = True,
) -> TrainResult:
    """Student on labelled + pseudo-labelled rows; EMA teacher labels the unlabelled stream."""
    init = init or manifest.init_checkpoint or None
    if corpus is None and not manifest.corpus.unlabelled:
        logger.warning("No unlabelled corpus given; falling back to supervised training")
        return train_supervised(manifest, corpus, evaluate_final)
    if corpus is None:
        corpus = _load_corpus(manifest)
    if not corpus.unlabelled:
        logger.warning("Unlabelled split is empty; falling back to supervised training")
        return train_supervised(manifest, corpus, evaluate_final)

    run = _open_run(manifest, corpus, "semi")
    opt, w, pcfg = manifest.optim, manifest.loss, manifest.pseudo
    stage = "semi"
    try:
        seed_everything(run.seed)
        model = build_model(run)
        if init:
            load_encoder_init(model, init)
        freeze_encoder_blocks(model, opt.freeze_encoder_blocks)
        optimizer = build_optimizer(model, opt)
        teacher = TeacherState(model, momentum=pcfg.mu0)
        generator = torch.Generator(device=run.device.device)
        generator.manual_seed(run.seed * 100 + SAMPLING_STREAM)

        # epochs follow the labelled stream; the unlabelled stream runs on across epochs
        lab_plans = [
            _stream_plan(run.corpus.labelled, opt.batch_size_labelled, opt.max_frames_labelled,
                         run.seed, LABELLED_STREAM, epoch)
            for epoch in range(opt.total_epochs)
        ]
        unl_stream = _stream_plan(run.corpus.unlabelled, opt.batch_size_unlabelled, opt.max_frames_unlabelled,
                                  run.seed, UNLABELLED_STREAM, 0, sum(len(p) for p in lab_plans))
        plans, offset = [], 0
        for lab in lab_plans:
            plans.append(list(zip(lab, unl_stream[offset: offset + len(lab)])))
            offset += len(lab)
        warmup_steps = sum(len(p) for p in plans[: opt.warmup_epochs])
        total_steps = sum(len(p) for p in plans)

        def prepare(epoch: int, pairs) -> Iterator[_Step]:
            for (lc, lb), (uc, ub) in pairs:
                yield _Step(
                    labelled=_augmented(run, lb, LABELLED_STREAM, epoch, lc),
                    unlabelled_clean=collate(ub, run.device.device, run.dtype),
                    unlabelled_aug=_augmented(run, ub, UNLABELLED_STREAM, 0, uc),
                )

        trace: List[float] = []
        skipped = 0
        step = 0
        meter = KeptFractionMeter()
        for epoch, plan in enumerate(plans):
            meter.reset()
            epoch_loss, ctc_skipped = 0.0, 0
            for prepared in prefetch(prepare(epoch, plan)):
                lr = lr_schedule(step, warmup_steps, total_steps, opt.peak_lr)
                before = teacher.forward_count
                pseudo = generate_pseudo_labels(
                    teacher, prepared.unlabelled_clean, run.tok, pcfg,
                    w.ctc_threshold, w.attn_threshold, generator,
                )
                if teacher.forward_count - before != prepared.unlabelled_clean.size:
                    raise TrainingError("teacher must run exactly once per unlabelled sample")
                meter.add(pseudo)

                lab_losses, n_skip = labelled_losses(model, prepared.labelled, run.tok, w)
                ctc_skipped += n_skip
                if step < pcfg.warmup_steps:
                    unl_losses = _zero_losses(lab_losses[Modality.AV].combined, w)
                else:
                    unl_losses = unlabelled_losses(model, prepared.unlabelled_aug, pseudo, run.tok, w, pcfg.normalisation)
                loss = semi_loss(lab_losses, unl_losses, w)

                if not _step_optimizer(run, model, optimizer, loss, lr):
                    skipped += 1
                mu = momentum_at(pcfg, step + 1, total_steps)
                teacher.update(model, mu)

                value = loss.item()
                trace.append(value)
                run.metrics.log(stage, "loss", value, epoch=epoch, step=step)
                run.metrics.log(stage, "lr", lr, epoch=epoch, step=step)
                run.metrics.log(stage, "momentum", mu, epoch=epoch, step=step)
                for key, v in loss_values(lab_losses).items():
                    mod, metric = key.split("/")
                    run.metrics.log(stage, f"loss_{metric}", v, epoch=epoch, step=step, modality=mod)
                for key, v in loss_values(unl_losses).items():
                    mod, metric = key.split("/")
                    run.metrics.log(stage, f"loss_{metric}", v, epoch=epoch, step=step, split="unlabelled", modality=mod)
                epoch_loss += value
                step += 1

            run.metrics.log(stage, "epoch_loss", epoch_loss / max(1, len(plan)), epoch=epoch)
            run.metrics.log(stage, "ctc_skipped", ctc_skipped, epoch=epoch)
            for stream in ("ctc", "attn"):
                run.metrics.log(stage, f"kept_fraction_{stream}", meter.kept_fraction(stream), epoch=epoch, split="unlabelled")
                run.metrics.log(stage, f"mean_conf_{stream}", meter.mean_conf(stream), epoch=epoch, split="unlabelled")
            _log_validation(run, stage, epoch, model)
            _save_epoch(run, "last", epoch, step, model, optimizer, teacher.model)
            logger.info(
                "[semi] epoch %d/%d loss %.4f kept ctc=%s attn=%s", epoch + 1, opt.total_epochs,
                epoch_loss / max(1, len(plan)), meter.kept_fraction("ctc"), meter.kept_fraction("attn"),
            )

        _check_skips(skipped, total_steps, opt.max_skip_fraction)
        path = save_checkpoint(os.path.join(manifest.out_dir, "final.ckpt"), model, run.corpus.config,
                               manifest.to_dict(), teacher=teacher.model)
        wers = _final_evaluation(run, {m: model for m in ALL_MODALITIES}) if evaluate_final else {}
    finally:
        run.metrics.close()
    return TrainResult(
        stage=stage, out_dir=manifest.out_dir, checkpoints={"final": path}, metrics_path=run.metrics.path,
        loss_trace=trace, total_steps=total_steps, skipped_steps=skipped, final_wer=wers,
        models={"final": model, "teacher": teacher.model},
    )


# -- pre-training ------------------------------------------------------------

def run_pretrain(manifest: RunManifest, corpus: Optional[CorpusSplits] = None) -> TrainResult:
    """Masked prediction of teacher encoder features on every training utterance."""
    run = _open_run(manifest, corpus, "pretrain")
    opt, w, pcfg = manifest.optim, manifest.loss, manifest.pseudo
    stage = "pretrain"
    pool: List[Sample] = list(run.corpus.labelled) + list(run.corpus.unlabelled)
    try:
        seed_everything(run.seed)
        model = build_model(run)
        optimizer = build_optimizer(model, opt)
        teacher = TeacherState(model, momentum=pcfg.mu0)

        plans = [
            _stream_plan(pool, opt.batch_size_unlabelled, opt.max_frames_unlabelled, run.seed, UNLABELLED_STREAM, epoch)
            for epoch in range(opt.total_epochs)
        ]
        warmup_steps = sum(len(p) for p in plans[: opt.warmup_epochs])
        total_steps = sum(len(p) for p in plans)

        def prepare(epoch: int, plan) -> Iterator[_Step]:
            for cycle, batch in plan:
                yield _Step(
                    unlabelled_clean=collate(batch, run.device.device, run.dtype),
                    mask_keys=[(epoch, cycle, s.uid) for s in batch],
                )

        trace: List[float] = []
        skipped = 0
        step = 0
        for epoch, plan in enumerate(plans):
            sums = {m: 0.0 for m in ALL_MODALITIES}
            masked_frac, epoch_loss, mu = 0.0, 0.0, teacher.momentum
            for prepared in prefetch(prepare(epoch, plan)):
                lr = lr_schedule(step, warmup_steps, total_steps, opt.peak_lr)
                views = prepared.unlabelled_clean
                targets = build_targets(teacher.model, views, manifest.pretrain)
                teacher.forward_count += views.size
                rngs = [augment_rng(run.seed, MASK_STREAM, e, c, uid) for e, c, uid in prepared.mask_keys]
                vmask, amask = batch_span_masks(views, manifest.mask, rngs)
                masked = apply_input_mask(views, vmask, amask)
                enc = model.forward_encoder(masked.video, masked.audio, masked.lengths, ALL_MODALITIES, feature_mask=vmask)
                per_mod = {
                    m: masked_cosine_loss(model.predictor_forward(enc.final_for(m), enc.pad_mask_for(m)), targets, vmask)
                    for m in ALL_MODALITIES
                }
                loss = pretrain_loss(per_mod, w.lambda_v)
                if not _step_optimizer(run, model, optimizer, loss, lr):
                    skipped += 1
                mu = momentum_at(pcfg, step + 1, total_steps)
                teacher.update(model, mu)

                value = loss.item()
                trace.append(value)
                run.metrics.log(stage, "loss", value, epoch=epoch, step=step)
                run.metrics.log(stage, "lr", lr, epoch=epoch, step=step)
                for m in ALL_MODALITIES:
                    sums[m] += per_mod[m].item()
                valid = (~views.pad_mask).sum()
                masked_frac += float(vmask.sum()) / max(1, int(valid))
                epoch_loss += value
                step += 1

            n = max(1, len(plan))
            run.metrics.log(stage, "epoch_loss", epoch_loss / n, epoch=epoch)
            run.metrics.log(stage, "masked_fraction", masked_frac / n, epoch=epoch)
            run.metrics.log(stage, "momentum", mu, epoch=epoch)
            run.metrics.log(stage, "lr", lr_schedule(step, warmup_steps, total_steps, opt.peak_lr), epoch=epoch)
            for m in ALL_MODALITIES:
                run.metrics.log(stage, "cosine_loss", sums[m] / n, epoch=epoch, modality=m.value)
            _save_epoch(run, "last", epoch, step, model, optimizer, teacher.model)
            logger.info("[pretrain] epoch %d/%d loss %.4f", epoch + 1, opt.total_epochs, epoch_loss / n)

        _check_skips(skipped, total_steps, opt.max_skip_fraction)
        path = save_checkpoint(os.path.join(manifest.out_dir, "pretrain.ckpt"), model, run.corpus.config,
                               manifest.to_dict(), teacher=teacher.model)
    finally:
        run.metrics.close()
    return TrainResult(
        stage=stage, out_dir=manifest.out_dir, checkpoints={"pretrain": path}, metrics_path=run.metrics.path,
        loss_trace=trace, total_steps=total_steps, skipped_steps=skipped,
        models={"pretrain": model, "teacher": teacher.model},
    )


def run_stage(manifest: RunManifest, corpus: Optional[CorpusSplits] = None) -> TrainResult:
    if manifest.stage == "pretrain":
        return run_pretrain(manifest, corpus)
    if manifest.stage == "semi":
        return train_semi(manifest, corpus=corpus)
    return train_supervised(manifest, corpus)
