# src/backend/corpus_io.py
"""On-disk corpus splits.

Each split is one binary file plus a JSONL manifest next to it:

    magic "USRC" | u32 version | u32 len + config JSON | u32 record count
    record: u32 uid | u32 T_v | i32 n_labels (-1 = unlabelled)
            | f32[T_v * video_dim] | f32[r * T_v * audio_dim] | i32[n_labels]

All integers are little endian.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict
from typing import BinaryIO, Dict, List, Sequence, Tuple

import numpy as np

from .synth_data import CorpusConfig, CorpusSplits, LabelledSample, Sample, UnlabelledSample

MAGIC = b"USRC"
VERSION = 1


def _read_exact(f: BinaryIO, n: int, path: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ValueError(f"Corpus file {path} is truncated")
    return data


def write_split(path: str, samples: Sequence[Sample], cfg: CorpusConfig, split: str) -> Dict[str, str]:
    """Write one split and its manifest. Returns the two paths."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    cfg_blob = json.dumps(asdict(cfg), sort_keys=True).encode("utf-8")
    tok = cfg.tokenizer

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(cfg_blob)))
        f.write(cfg_blob)
        f.write(struct.pack("<I", len(samples)))
        for s in samples:
            labels = getattr(s, "labels", None)
            n_labels = -1 if labels is None else len(labels)
            f.write(struct.pack("<IIi", s.uid, s.num_frames, n_labels))
            f.write(np.ascontiguousarray(s.video, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(s.audio, dtype="<f4").tobytes())
            if labels is not None:
                f.write(np.asarray(labels, dtype="<i4").tobytes())

    manifest_path = os.path.splitext(path)[0] + ".jsonl"
    with open(manifest_path, "w", encoding="utf-8") as f:
        for s in samples:
            labels = getattr(s, "labels", None)
            row = {
                "id": f"{split}-{s.uid:06d}",
                "uid": s.uid,
                "split": split,
                "t_v": s.num_frames,
                "t_a": int(s.audio.shape[0]),
                "t_l": None if labels is None else len(labels),
                "transcript": None if labels is None else tok.detokenize(labels),
            }
            f.write(json.dumps(row, ensure_ascii=False) + "\n")

    return {"data": path, "manifest": manifest_path}


def read_split(path: str) -> Tuple[List[Sample], CorpusConfig]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Corpus file not found: {path}")

    samples: List[Sample] = []
    with open(path, "rb") as f:
        if _read_exact(f, 4, path) != MAGIC:
            raise ValueError(f"{path} is not a corpus file (bad magic)")
        version, cfg_len = struct.unpack("<II", _read_exact(f, 8, path))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported corpus version {version} (expected {VERSION})")
        cfg = CorpusConfig(**json.loads(_read_exact(f, cfg_len, path).decode("utf-8")))
        (count,) = struct.unpack("<I", _read_exact(f, 4, path))
        r = cfg.audio_rate_ratio
        for _ in range(count):
            uid, t_v, n_labels = struct.unpack("<IIi", _read_exact(f, 12, path))
            video = np.frombuffer(_read_exact(f, 4 * t_v * cfg.video_dim, path), dtype="<f4")
            audio = np.frombuffer(_read_exact(f, 4 * r * t_v * cfg.audio_dim, path), dtype="<f4")
            video = video.reshape(t_v, cfg.video_dim).astype(np.float32)
            audio = audio.reshape(r * t_v, cfg.audio_dim).astype(np.float32)
            if n_labels < 0:
                samples.append(UnlabelledSample(uid=uid, video=video, audio=audio))
            else:
                labels = np.frombuffer(_read_exact(f, 4 * n_labels, path), dtype="<i4")
                samples.append(LabelledSample(uid=uid, video=video, audio=audio,
                                              labels=[int(x) for x in labels]))
    return samples, cfg


def write_corpus(out_dir: str, corpus: CorpusSplits) -> Dict[str, str]:
    """Write labelled / unlabelled / eval splits under ``out_dir``."""
    paths = {}
    for split, samples in (("labelled", corpus.labelled),
                           ("unlabelled", corpus.unlabelled),
                           ("eval", corpus.eval)):
        paths[split] = write_split(os.path.join(out_dir, f"{split}.bin"), samples, corpus.config, split)["data"]
    return paths


def read_corpus(labelled: str, unlabelled: str = "", evaluation: str = "") -> CorpusSplits:
    lab, cfg = read_split(labelled)
    unl: List[Sample] = read_split(unlabelled)[0] if unlabelled else []
    ev: List[Sample] = read_split(evaluation)[0] if evaluation else []
    return CorpusSplits(
        labelled=[s for s in lab if isinstance(s, LabelledSample)],
        unlabelled=[UnlabelledSample(uid=s.uid, video=s.video, audio=s.audio) for s in unl],
        eval=[s for s in ev if isinstance(s, LabelledSample)],
        config=cfg,
    )
