"""Shared optimisation loop: Adam, warm-up + cosine schedule, CSV loss log."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .optim import Adam, cosine_with_warmup

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, batch_ids: Sequence[int], cause: str):
        self.step, self.batch_ids = step, list(batch_ids)
        super().__init__(f"non-finite loss at step {step} (batch scene ids {self.batch_ids}): {cause}")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    warmup: int = 100
    seed: int = 0
    clip_norm: float | None = 10.0
    weight_decay: float = 0.0
    timings: bool = True


@dataclass
class StepResult:
    loss: Tensor
    extras: dict[str, float] | None = None


class TrainLog:
    def __init__(self, columns: Sequence[str]):
        self.columns = list(columns)
        self.rows: list[dict] = []

    def append(self, row: dict) -> None:
        self.rows.append(row)

    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in self.columns])
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def run(params: Sequence[Tensor], sample: Callable[[np.random.Generator], tuple[Sequence[int], object]],
        loss_fn: Callable[[object], StepResult], config: TrainConfig,
        extra_columns: Sequence[str] = ()) -> TrainLog:
    """Minimise ``loss_fn(batch).loss`` for ``config.steps`` Adam steps.

    ``sample(rng)`` returns ``(scene_ids, batch)``; the ids are reported if the loss diverges.
    """
    params = list(params)
    opt = Adam(params, clip_norm=config.clip_norm, weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed, 1])
    out = TrainLog(["step", "loss", *extra_columns, "lr", "seconds"])
    start = time.perf_counter()
    for step in range(config.steps):
        lr = cosine_with_warmup(step, config.steps, config.lr, config.warmup)
        batch_ids, batch = sample(rng)
        try:
            with Tape() as tape:
                res = loss_fn(batch)
            ad.backward(res.loss, tape, params=params)
        except NonFiniteError as exc:
            raise TrainingDiverged(step, batch_ids, str(exc)) from exc
        opt.step(lr)
        row = {"step": step, "loss": res.loss.item(), "lr": lr,
               "seconds": round(time.perf_counter() - start, 3) if config.timings else 0.0}
        row.update(res.extras or {})
        out.append(row)
    _window_check(out.losses())
    return out


def _window_check(losses: np.ndarray, window: int = 500) -> bool:
    """Soft check: mean loss falls from each 500-step window to the next."""
    means = [losses[i:i + window].mean() for i in range(0, len(losses) - window + 1, window)]
    ok = all(b < a for a, b in zip(means, means[1:]))
    if len(means) > 1 and not ok:
        log.warning("training loss did not decrease across every %d-step window: %s", window,
                    ", ".join(f"{m:.4f}" for m in means))
    return ok
