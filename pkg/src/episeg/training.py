"""Episodic training of the two-branch model."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Episode, FoldSpec, SegDataset, sample_episode
from .metrics import run_benchmark
from .model import TwoBranchModel, classify_pixels, condition, extract_features, predict_kshot
from .optim import SgdState, sgd_step

logger = logging.getLogger(__name__)

PROB_EPS = 1e-12


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    momentum: float = 0.9
    conditioning_lr_multiplier: float = 0.1
    grad_clip: float = 100.0
    iterations: int = 20000
    seed: int = 7
    eval_every: int = 2000
    val_episodes: int = 50
    keep_best: bool = True
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0 (0 disables clipping)")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class TrainLog:
    iterations: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    val: dict[int, float] = field(default_factory=dict)
    selected: int | None = None

    def record(self, it: int, loss: float, seconds: float) -> None:
        if self.iterations and it <= self.iterations[-1]:
            raise ValueError("iteration indices must increase")
        self.iterations.append(it)
        self.losses.append(loss)
        self.seconds.append(seconds)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "loss", "val_meanIoU", "seconds"])
        for it, loss, sec in zip(self.iterations, self.losses, self.seconds):
            val = self.val.get(it)
            w.writerow([it, f"{loss:.8f}", "" if val is None else f"{val:.6f}", f"{sec:.3f}"])
        return buf.getvalue()


def downsample_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    """Majority vote over each stride x stride cell; a tie counts as foreground."""
    H, W = mask.shape
    if H % stride or W % stride:
        raise ValueError(f"mask {mask.shape} not divisible by stride {stride}")
    cells = mask.reshape(H // stride, stride, W // stride, stride).sum(axis=(1, 3), dtype=np.int64)
    return (2 * cells >= stride * stride).astype(np.uint8)


def episode_loss(model: TwoBranchModel, episode: Episode) -> T.Tensor:
    """Negative log-likelihood of the query mask at feature resolution."""
    if episode.k != 1:
        raise ValueError(f"episode_loss: training episodes are one-shot, got k={episode.k}")
    params = condition(model, episode.support[0])
    prob = classify_pixels(extract_features(model, episode.query_image), params)
    target = downsample_mask(episode.query_mask, model.config.stride)
    return T.bce_sum(prob, target, PROB_EPS)


def clip_gradients(params, max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``; returns the raw norm."""
    norm = float(np.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params)))
    T._check_finite(np.array(norm), "gradient")
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


def make_optimizer(model: TwoBranchModel, config: TrainConfig) -> SgdState:
    state = SgdState(config.learning_rate, config.momentum)
    state.set_multiplier(model.cond_params(), config.conditioning_lr_multiplier)
    return state


def validation_iou(model: TwoBranchModel, episodes: list[Episode]) -> float:
    report = run_benchmark(lambda ep: predict_kshot(model, ep.query_image, ep.support), episodes)
    return report.mean_iou


def train(model: TwoBranchModel, dataset: SegDataset, config: TrainConfig,
          val_episodes: list[Episode] | None = None, log: TrainLog | None = None) -> tuple[TwoBranchModel, TrainLog]:
    """Run ``config.iterations`` one-shot episodes of SGD on ``dataset``.

    With ``keep_best`` and validation episodes, the returned parameters are
    those of the evaluation point with the highest validation meanIoU (earliest
    on ties); ``log.selected`` names that iteration.

    If the loss stops being finite the parameters are rolled back to the last
    evaluation point (which is also the last checkpoint on disk) and
    :class:`TrainingDiverged` is raised.
    """
    log = log or TrainLog()
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    state = make_optimizer(model, config)
    good = model.state()
    best: tuple[float, int, dict] | None = None
    t_start = time.perf_counter()

    def checkpoint(it: int) -> None:
        nonlocal good, best
        if val_episodes:
            log.val[it] = validation_iou(model, val_episodes)
            logger.info("iter %d  val meanIoU %.4f", it, log.val[it])
        if config.checkpoint_path:
            model.save(config.checkpoint_path)
        good = model.state()
        if val_episodes and (best is None or log.val[it] > best[0]):
            best = (log.val[it], it, good)

    for it in range(1, config.iterations + 1):
        episode = sample_episode(dataset, 1, rng)
        try:
            with T.Tape() as tape:
                loss = episode_loss(model, episode)
            T.backward(tape, loss)
            clip_gradients(params, config.grad_clip)
            sgd_step(params, state)
            T._check_finite(np.concatenate([p.data.ravel() for p in params]), "parameters")
        except T.NonFiniteError as exc:
            for k, p in model.params.items():
                p.data[...] = good[k]
                p.zero_grad()
            raise TrainingDiverged(f"diverged at iteration {it}: {exc}") from exc
        log.record(it, loss.item(), time.perf_counter() - t_start)
        if config.eval_every and it % config.eval_every == 0:
            checkpoint(it)
        elif it % 500 == 0:
            logger.debug("iter %d  loss %.4f", it, float(np.mean(log.losses[-500:])))
    if config.iterations and (not config.eval_every or config.iterations % config.eval_every):
        checkpoint(config.iterations)
    if config.keep_best and best is not None and best[1] != config.iterations:
        for k, p in model.params.items():
            p.data[...] = best[2][k]
        if config.checkpoint_path:
            model.save(config.checkpoint_path)
    log.selected = best[1] if config.keep_best and best is not None else (config.iterations or None)
    return model, log


def write_log(log: TrainLog, path) -> None:
    Path(path).write_text(log.to_csv(), encoding="utf-8")


def fold_description(fold: FoldSpec) -> str:
    return f"fold {fold.fold_index}: test {sorted(fold.test_labels)} train {sorted(fold.train_labels)}"
