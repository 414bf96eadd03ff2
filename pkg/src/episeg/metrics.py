"""Per-class IoU accumulation, benchmark runs and the inference timing table."""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import Episode

Predictor = Callable[[Episode], np.ndarray]


@dataclass
class ClassCounts:
    """Per-class tp/fp/fn totals, summed over every mask of that class."""

    tp: dict[int, int] = field(default_factory=dict)
    fp: dict[int, int] = field(default_factory=dict)
    fn: dict[int, int] = field(default_factory=dict)
    episodes: dict[int, int] = field(default_factory=dict)

    def merge(self, other: "ClassCounts") -> "ClassCounts":
        out = ClassCounts(dict(self.tp), dict(self.fp), dict(self.fn), dict(self.episodes))
        for name in ("tp", "fp", "fn", "episodes"):
            dst = getattr(out, name)
            for c, v in getattr(other, name).items():
                dst[c] = dst.get(c, 0) + v
        return out

    def classes(self) -> list[int]:
        return sorted(self.episodes)


def accumulate(counts: ClassCounts, pred: np.ndarray, gt: np.ndarray, class_id: int) -> ClassCounts:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"accumulate: prediction {pred.shape} vs ground truth {gt.shape}")
    c = int(class_id)
    counts.tp[c] = counts.tp.get(c, 0) + int(np.count_nonzero(pred & gt))
    counts.fp[c] = counts.fp.get(c, 0) + int(np.count_nonzero(pred & ~gt))
    counts.fn[c] = counts.fn.get(c, 0) + int(np.count_nonzero(~pred & gt))
    counts.episodes[c] = counts.episodes.get(c, 0) + 1
    return counts


@dataclass
class EvalReport:
    per_class_iou: dict[int, float]
    mean_iou: float
    episodes_per_class: dict[int, int]
    counts: ClassCounts
    undefined_classes: tuple[int, ...] = ()
    mean_seconds: float = float("nan")
    config: dict = field(default_factory=dict)
    partial: bool = False
    error: str | None = None

    def to_csv(self) -> str:
        """Deterministic CSV: per-class rows, then the mean and the config echo.

        Wall-clock timing is kept out of this table so that replays compare equal.
        """
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class_id", "episodes", "tp", "fp", "fn", "iou"])
        for c in self.counts.classes():
            iou = self.per_class_iou.get(c)
            w.writerow([c, self.counts.episodes[c], self.counts.tp[c], self.counts.fp[c],
                        self.counts.fn[c], "" if iou is None else f"{iou:.10f}"])
        w.writerow(["mean", sum(self.episodes_per_class.values()), "", "", "",
                    "" if math.isnan(self.mean_iou) else f"{self.mean_iou:.10f}"])
        for key in sorted(self.config):
            w.writerow([f"# {key}", self.config[key]])
        if self.partial:
            w.writerow(["# partial", self.error])
        return buf.getvalue()

    def format_table(self, names: Mapping[int, str] | None = None) -> str:
        lines = [f"{'class':<24}{'episodes':>9}{'IoU':>9}"]
        for c in self.counts.classes():
            label = f"{c} {names[c]}" if names and c in names else str(c)
            iou = self.per_class_iou.get(c)
            lines.append(f"{label:<24}{self.counts.episodes[c]:>9}{'n/a' if iou is None else f'{iou:.4f}':>9}")
        lines.append(f"{'meanIoU':<24}{sum(self.episodes_per_class.values()):>9}{self.mean_iou:>9.4f}")
        if not math.isnan(self.mean_seconds):
            lines.append(f"mean seconds / episode: {self.mean_seconds:.5f}")
        if self.undefined_classes:
            lines.append(f"classes without defined IoU: {list(self.undefined_classes)}")
        if self.partial:
            lines.append(f"PARTIAL REPORT: {self.error}")
        return "\n".join(lines)


def finalize(counts: ClassCounts) -> EvalReport:
    ious, undefined = {}, []
    for c in counts.classes():
        denom = counts.tp[c] + counts.fp[c] + counts.fn[c]
        if denom == 0:
            undefined.append(c)
        else:
            ious[c] = counts.tp[c] / denom
    if not ious:
        raise ValueError("finalize: no class has a defined IoU")
    return EvalReport(ious, sum(ious.values()) / len(ious), dict(counts.episodes), counts, tuple(undefined))


def _timed(predictor: Predictor, ep: Episode):
    t0 = time.perf_counter()
    pred = predictor(ep)
    return pred, time.perf_counter() - t0


def run_benchmark(predictor: Predictor, episodes: Sequence[Episode], config: dict | None = None,
                  workers: int = 1) -> EvalReport:
    """Score ``predictor`` over the episodes; per-episode time covers inference only.

    With ``workers > 1`` predictions run in a thread pool; counts are still
    accumulated in episode order, so the report does not depend on scheduling.
    """
    ks = {ep.k for ep in episodes}
    if len(ks) > 1:
        raise ValueError(f"run_benchmark: episodes mix support sizes {sorted(ks)}")
    counts = ClassCounts()
    elapsed = []
    error = None
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_timed, predictor, ep) for ep in episodes]
            outcomes = []
            for fut in futures:
                try:
                    outcomes.append(fut.result())
                except Exception as exc:  # noqa: BLE001 - reported in the partial report
                    outcomes.append(exc)
    else:
        outcomes = None
    for i, ep in enumerate(episodes):
        if outcomes is None:
            try:
                pred, dt = _timed(predictor, ep)
            except Exception as exc:  # noqa: BLE001 - reported in the partial report
                error = f"{type(exc).__name__}: {exc}"
                break
        elif isinstance(outcomes[i], Exception):
            error = f"{type(outcomes[i]).__name__}: {outcomes[i]}"
            break
        else:
            pred, dt = outcomes[i]
        elapsed.append(dt)
        accumulate(counts, pred, ep.query_mask, ep.class_id)
    try:
        report = finalize(counts)
    except ValueError:
        if error is None and episodes:
            raise
        report = EvalReport({}, float("nan"), dict(counts.episodes), counts)
    report.mean_seconds = float(np.mean(elapsed)) if elapsed else float("nan")
    report.config = dict(config or {})
    if error is not None:
        report.partial, report.error = True, error
    return report


@dataclass
class TimingTable:
    seconds: dict[str, dict[int, float]]
    ks: tuple[int, ...]

    def ratio(self, name: str) -> float:
        row = self.seconds[name]
        return row[max(self.ks)] / row[min(self.ks)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["predictor"] + [f"k={k}" for k in self.ks])
        for name, row in self.seconds.items():
            w.writerow([name] + [f"{row[k]:.6f}" for k in self.ks])
        return buf.getvalue()

    def format_table(self) -> str:
        lines = [f"{'method':<12}" + "".join(f"{f'{k}-shot':>12}" for k in self.ks)]
        for name, row in self.seconds.items():
            lines.append(f"{name:<12}" + "".join(f"{row[k]:>12.5f}" for k in self.ks))
        return "\n".join(lines)


def time_report(predictors: Mapping[str, Predictor], episodes: Sequence[Episode], repeats: int,
                ks: Sequence[int] = (1, 5)) -> TimingTable:
    """Mean inference seconds per episode for each predictor and support size.

    ``episodes`` must have at least ``max(ks)`` supports; smaller k use the first
    supports of the same episodes. One warm-up call per cell is not timed.
    """
    ks = tuple(sorted(ks))
    if repeats <= 0 or not episodes:
        return TimingTable({}, ks)
    table: dict[str, dict[int, float]] = {}
    for name, predict in predictors.items():
        row = {}
        for k in ks:
            eps = [ep.truncate(k) for ep in episodes]
            predict(eps[0])
            total = 0.0
            for _ in range(repeats):
                for ep in eps:
                    t0 = time.perf_counter()
                    predict(ep)
                    total += time.perf_counter() - t0
            row[k] = total / (repeats * len(eps))
        table[name] = row
    return TimingTable(table, ks)
