# src/backend/metrics.py
"""Structured training metrics (JSONL) and the per-epoch curve report (CSV)."""
from __future__ import annotations

import csv
import json
import logging
import os
from typing import Dict, Iterator, List, Optional, Sequence

logger = logging.getLogger(__name__)

CURVE_METRICS = (
    "kept_fraction_ctc",
    "kept_fraction_attn",
    "mean_conf_ctc",
    "mean_conf_attn",
    "attention_accuracy",
    "ctc_loss",
)
REPORT_FIELDS = ("run", "stage", "epoch", "split", "modality", "metric", "value")


class MetricsWriter:
    """Appends one JSON object per event: {stage, epoch, step, split, modality, metric, value}."""

    def __init__(self, path: str):
        self.path = path
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self._fh = open(path, "w", encoding="utf-8")

    def log(
        self,
        stage: str,
        metric: str,
        value: Optional[float],
        epoch: Optional[int] = None,
        step: Optional[int] = None,
        split: str = "train",
        modality: Optional[str] = None,
    ) -> None:
        if value is None:
            return
        row = {
            "stage": stage, "epoch": epoch, "step": step, "split": split,
            "modality": modality, "metric": metric, "value": float(value),
        }
        self._fh.write(json.dumps(row) + "\n")

    def log_many(self, stage: str, values: Dict[str, Optional[float]], **keys) -> None:
        for metric, value in values.items():
            self.log(stage, metric, value, **keys)

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metrics(path: str) -> List[Dict]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Metrics file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def _curve_rows(run: str, rows: Sequence[Dict]) -> Iterator[Dict]:
    for row in rows:
        if row["metric"] in CURVE_METRICS and row.get("step") is None:
            yield {"run": run, **{k: row.get(k) for k in REPORT_FIELDS if k != "run"}}


def write_curve_report(run_dirs: Sequence[str], out_path: str) -> str:
    """Per-epoch kept-fraction / accuracy / CTC-loss curves of several runs as one CSV."""
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    with open(out_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(REPORT_FIELDS))
        writer.writeheader()
        for run in run_dirs:
            rows = read_metrics(os.path.join(run, "metrics.jsonl"))
            for row in _curve_rows(os.path.basename(os.path.normpath(run)), rows):
                writer.writerow(row)
    logger.info("Wrote curve report for %d run(s) to %s", len(run_dirs), out_path)
    return out_path
