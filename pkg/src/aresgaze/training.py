"""Loss, SGD with momentum, the warmup + cosine schedule, training and
leave-one-subject-out evaluation."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .data.prepare import GazeArrays
from .gazenet import GazeNet, GazeNetConfig, build_gaze_net
from .geometry import angular_error_deg
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

smooth_l1 = ops.smooth_l1


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/inf; ``history`` holds the epochs completed so far."""

    def __init__(self, message: str, history: list[float] | None = None):
        super().__init__(message)
        self.history = history or []


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 120
    batch_size: int = 48
    lr_max: float = 0.128
    warmup_fraction: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0003
    seed: int = 0
    dtype: str = "float32"

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.lr_max <= 0:
            raise ValueError("epochs, batch_size and lr_max must be positive")
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be non-negative")


def warmup_steps(total_steps: int, cfg: TrainConfig) -> int:
    return max(1, int(round(cfg.warmup_fraction * total_steps)))


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_max`` over the first W steps, then a half cosine to 0."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    W = warmup_steps(total_steps, cfg)
    if step < W:
        return cfg.lr_max * (step + 1) / W
    return 0.5 * cfg.lr_max * (1.0 + math.cos(math.pi * (step - W) / (total_steps - W)))


class OptimizerState:
    """One zero-initialized velocity buffer per parameter."""

    def __init__(self, params: list[Tensor]):
        self.velocity = [np.zeros_like(p.data) for p in params]

    def as_dict(self, names: list[str]) -> dict[str, np.ndarray]:
        return dict(zip(names, self.velocity))


def sgd_step(params: list[Tensor], grads: list[np.ndarray], state: OptimizerState, lr: float,
             cfg: TrainConfig) -> None:
    """``v <- mu v + (g + wd p)``; ``p <- p - lr v``, in place."""
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            name = params[i].name or f"#{i}"
            raise NonFiniteError(f"non-finite gradient in parameter {name}; step aborted")
    for p, g, v in zip(params, grads, state.velocity):
        d = g + cfg.weight_decay * p.data
        v *= cfg.momentum
        v += d
        p.data -= (lr * v).astype(p.data.dtype)


@dataclass
class TrainResult:
    history: list[float]
    steps: int


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train(model: GazeNet, data: GazeArrays, cfg: TrainConfig) -> TrainResult:
    """Mini-batch SGD over ``data``; deterministic given ``cfg.seed`` and the model's init."""
    cfg.validate()
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    state = OptimizerState(params)
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    eye_model = model.config.eye_model
    history: list[float] = []
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        losses = []
        for idx in batches(len(data), cfg.batch_size, rng):
            with Tape() as tape:
                pred = model(data.face[idx], data.eye_input(idx, eye_model))
                loss = smooth_l1(pred, data.gaze[idx].astype(pred.dtype))
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, step {step}", history)
            for p in params:
                p.grad = None
            grads = tape.backward(loss, params)
            try:
                sgd_step(params, grads, state, lr_at(step, total, cfg), cfg)
            except NonFiniteError as exc:
                raise NonFiniteError(str(exc), history) from None
            losses.append(value * len(idx))
            step += 1
        history.append(sum(losses) / len(data))
        log.debug("epoch %d loss %.6f", epoch, history[-1])
    return TrainResult(history, step)


@dataclass(frozen=True)
class EvalRecord:
    sample_id: str
    subject_id: str
    pred: tuple[float, float]
    gt: tuple[float, float]
    head: tuple[float, float]
    light: float
    error_deg: float


def predict(model: GazeNet, data: GazeArrays, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        out.append(model(data.face[idx], data.eye_input(idx, model.config.eye_model)).data)
    return np.concatenate(out).astype(np.float64)


def evaluate(model: GazeNet, data: GazeArrays, batch_size: int = 64) -> tuple[list[EvalRecord], float]:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = predict(model, data, batch_size)
    return records_from_predictions(pred, data)


def records_from_predictions(pred: np.ndarray, data: GazeArrays) -> tuple[list[EvalRecord], float]:
    errors = np.atleast_1d(angular_error_deg(pred, data.gaze))
    records = [
        EvalRecord(
            data.sample_ids[i], data.subject_ids[i],
            (float(pred[i, 0]), float(pred[i, 1])),
            (float(data.gaze[i, 0]), float(data.gaze[i, 1])),
            (float(data.head[i, 0]), float(data.head[i, 1])),
            float(data.light[i]), float(errors[i]),
        )
        for i in range(len(data))
    ]
    return records, float(np.mean(errors))


# leave-one-subject-out ---------------------------------------------------------------

@dataclass
class FoldResult:
    subject: str
    train_subjects: list[str]
    train_sample_ids: list[str]
    mean_error: float
    records: list[EvalRecord]
    history: list[float]


@dataclass
class LoocvResult:
    folds: list[FoldResult] = field(default_factory=list)

    @property
    def per_subject(self) -> dict[str, float]:
        return {f.subject: f.mean_error for f in self.folds}

    @property
    def overall(self) -> float:
        return float(np.mean([f.mean_error for f in self.folds]))

    @property
    def records(self) -> list[EvalRecord]:
        return [r for f in self.folds for r in f.records]


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def run_fold(data: GazeArrays, net_config: GazeNetConfig, cfg: TrainConfig, subject: str, fold: int) -> FoldResult:
    subjects = np.asarray(data.subject_ids)
    train_idx = np.flatnonzero(subjects != subject)
    test_idx = np.flatnonzero(subjects == subject)
    if len(test_idx) == 0:
        raise ValueError(f"subject {subject!r} has no samples")
    seed = fold_seed(cfg.seed, fold)
    model = build_gaze_net(net_config, rng=np.random.default_rng(seed), dtype=np.dtype(cfg.dtype))
    train_set = data.subset(train_idx)
    fold_cfg = TrainConfig(**{**cfg.__dict__, "seed": seed})
    result = train(model, train_set, fold_cfg)
    records, mean = evaluate(model, data.subset(test_idx))
    return FoldResult(subject, sorted(set(train_set.subject_ids)), list(train_set.sample_ids), mean, records,
                      result.history)


def _run_fold_args(args):
    return run_fold(*args)


def loocv(data: GazeArrays, net_config: GazeNetConfig, cfg: TrainConfig, subjects: list[str] | None = None,
          parallel_folds: int = 1) -> LoocvResult:
    """One model per subject, trained on everyone else and tested on that subject.

    The overall score is the unweighted mean of per-subject means.
    """
    all_subjects = sorted(set(data.subject_ids))
    if len(all_subjects) < 2:
        raise ValueError("leave-one-subject-out needs at least two subjects")
    chosen = all_subjects if subjects is None else list(subjects)
    for s in chosen:
        if s not in all_subjects:
            raise ValueError(f"subject {s!r} has no samples")
    jobs = [(data, net_config, cfg, s, all_subjects.index(s)) for s in chosen]
    if parallel_folds > 1:
        with ProcessPoolExecutor(max_workers=parallel_folds) as pool:
            folds = list(pool.map(_run_fold_args, jobs))
    else:
        folds = [run_fold(*job) for job in jobs]
    return LoocvResult(folds)
