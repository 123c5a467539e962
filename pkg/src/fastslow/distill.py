"""Distilling Slow-model scores into the Fast dual encoder.

For a caption y_i the candidate set B_i pairs y_i with every image of the
current batch. Teacher and student scores over B_i are softened with a
temperature tau and compared by cross-entropy; the final objective adds the
NCE loss with weight alpha = (alpha / tau^2) * tau^2.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Caption, Dataset
from .encoders import DualEncoderConfig
from .fast import FastModel, in_batch_scores, nce_loss
from .slow import SlowModel, sample_batch
from .training import StepResult, TrainConfig, TrainLog, run

log = logging.getLogger(__name__)

Q_FLOOR = 1e-300
LOG_Q_FLOOR = math.log(Q_FLOOR)


class TeacherMismatch(ValueError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    tau: float = 10.0
    alpha_over_tau2: float = 0.001

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if not self.alpha_over_tau2 >= 0:
            raise ValueError(f"alpha/tau^2 must be non-negative, got {self.alpha_over_tau2}")

    @property
    def alpha(self) -> float:
        return self.alpha_over_tau2 * self.tau ** 2


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def teacher_dist(scores, tau: float) -> np.ndarray:
    """p = softmax(h / tau) over the last axis, max-subtracted."""
    _check_tau(tau)
    z = np.asarray(scores, dtype=np.float64) / tau
    if not np.all(np.isfinite(z)):
        raise ValueError("teacher scores must be finite")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def student_dist(scores: Tensor, tau: float) -> Tensor:
    _check_tau(tau)
    return ad.softmax(ad.scale(scores, 1.0 / tau), axis=-1)


def cross_entropy(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """H(p, q) = -sum p log q along the last axis (numpy, for analysis)."""
    return -(p * np.log(np.maximum(q, Q_FLOOR))).sum(axis=-1)


def distill_loss(teacher_scores, student_scores: Tensor, tau: float) -> Tensor:
    """L_distill = sum_i H(p(B_i), q(B_i)); row i of both matrices is B_i."""
    p = teacher_dist(teacher_scores, tau)
    if p.shape != student_scores.shape:
        raise ad.ShapeError(f"distill: teacher {p.shape} vs student {student_scores.shape}")
    log_q = ad.log_softmax(ad.scale(student_scores, 1.0 / tau), axis=-1)
    tiny = (log_q.data < LOG_Q_FLOOR) & (p > 0)
    if tiny.any():
        log.warning("distill: %d student probabilities underflow; clamped at %g", int(tiny.sum()), Q_FLOOR)
        log_q = ad.masked_fill(log_q, tiny, LOG_Q_FLOOR)
    return ad.neg(ad.sum(ad.mul(log_q, p)))


def candidate_scores(f: Tensor, g: Tensor) -> Tensor:
    """Row i holds f(x_j)^T g(y_i) for every batch image j: the student side of B_i."""
    return ad.transpose(in_batch_scores(f, g), (1, 0))


@dataclass
class Objective:
    total: Tensor
    distill: Tensor
    nce: Tensor


def combined_objective(f: Tensor, g: Tensor, teacher_scores, config: DistillConfig) -> Objective:
    """L = L_distill + alpha * L_DE over one batch."""
    l_distill = distill_loss(teacher_scores, candidate_scores(f, g), config.tau)
    l_de = nce_loss(f, g)
    if config.alpha == 0:
        return Objective(l_distill, l_distill, l_de)
    return Objective(ad.add(l_distill, ad.scale(l_de, config.alpha)), l_distill, l_de)


# ---------------------------------------------------------------- teacher

class TeacherCache:
    """h(x, y) for (scene id, caption id) pairs, computed on demand and memoised."""

    def __init__(self, teacher: SlowModel, dataset: Dataset):
        if teacher.config.decoder.vocab_size != len(dataset.vocab):
            raise TeacherMismatch(f"teacher vocabulary size {teacher.config.decoder.vocab_size} "
                                  f"!= dataset vocabulary size {len(dataset.vocab)}")
        if teacher.config.encoder.raster != dataset.config.raster:
            raise TeacherMismatch(f"teacher raster {teacher.config.encoder.raster} "
                                  f"!= dataset raster {dataset.config.raster}")
        self.teacher, self.dataset = teacher, dataset
        self.cache: dict[tuple[int, int], float] = {}
        self.computed = 0

    def matrix(self, scene_ids: Sequence[int], captions: Sequence[Caption]) -> np.ndarray:
        """H[i, j] = h(x_{scene_ids[j]}, captions[i])."""
        missing = [(i, j) for i, c in enumerate(captions) for j, s in enumerate(scene_ids)
                   if (int(s), c.id) not in self.cache]
        if missing:
            cols = sorted({j for _, j in missing})
            visual = self.teacher.visual(self.dataset.renders([int(scene_ids[j]) for j in cols]))
            mem_f, mem_b = self.teacher.memories(visual)
            where = {j: k for k, j in enumerate(cols)}
            rows = np.array([where[j] for _, j in missing])
            h = self.teacher.score((mem_f.take(rows), mem_b.take(rows)),
                                   [captions[i].tokens for i, _ in missing]).data
            for (i, j), v in zip(missing, h):
                self.cache[(int(scene_ids[j]), captions[i].id)] = float(v)
            self.computed += len(missing)
        return np.array([[self.cache[(int(s), c.id)] for s in scene_ids] for c in captions])


def train_distilled(dataset: Dataset, teacher: SlowModel, model_config: DualEncoderConfig,
                    config: TrainConfig, distill: DistillConfig,
                    init_seed: int | None = None) -> tuple[FastModel, TrainLog]:
    """Train a fresh student on L_distill + alpha * L_DE; the teacher stays frozen."""
    if model_config.vocab_size != len(dataset.vocab):
        raise TeacherMismatch("student vocabulary does not match dataset")
    cache = TeacherCache(teacher, dataset)
    student = FastModel.init(model_config, config.seed if init_seed is None else init_seed)
    train_ids = dataset.split_ids("train")

    def sample(rng):
        ids, caps = sample_batch(rng, dataset, train_ids, config.batch_size)
        # teacher scores are plain arrays computed outside the tape
        return ids.tolist(), (ids, caps, cache.matrix(ids.tolist(), caps))

    def loss(batch):
        ids, caps, teacher_scores = batch
        f = student.embed_images(dataset.renders(ids))
        g = student.embed_texts([c.tokens for c in caps])
        obj = combined_objective(f, g, teacher_scores, distill)
        scale = 1.0 / len(ids)
        return StepResult(ad.scale(obj.total, scale),
                          {"l_distill": obj.distill.item() * scale, "l_de": obj.nce.item() * scale})

    history = run(student.parameters(), sample, loss, config, extra_columns=("l_distill", "l_de"))
    return student, history
