"""Supervised pretraining, EMA-only training and Mean Teacher training.

All randomness flows from ``TrainerConfig.seed`` through one generator per
phase, so two runs with the same config are bit-identical.  The
regularization branch never draws from the generator, which keeps runs at
different ``beta`` on the same batch/augmentation stream.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from . import nnet
from .nnet import ModelConfig, NumericError, ParamVec
from .pseudolabel import build_targets
from .synthgen import NoiseBank, Scene, flip_box, strong_aug_batch, weak_aug_batch

log = logging.getLogger(__name__)

TRAIN_MODES = ("ema-only", "ss-dgod", "ws-dgod", "uda")


class UsageError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, cause: Exception | None = None):
        super().__init__(f"training diverged at iteration {iteration}: {cause}")
        self.iteration = iteration


@dataclass
class TrainerConfig:
    alpha: float = 0.9996
    beta: float = 0.5
    lr: float = 0.1
    lr_pretrain: float = 0.2
    batch: int = 8
    iters_pretrain: int = 1500
    iters_mt: int = 3000
    tau: float = 0.8
    temperature: float = 0.5
    pseudo: str = "soft"
    seed: int = 0
    eval_every: int = 200
    ema_every: int = 1
    reg_lambda: float = 1.0
    weak_sigma: float = 0.02
    noise_bank: int = 1024  # pooled augmentation noise; 0 draws fresh Gaussians

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.lr < 0 or self.lr_pretrain < 0:
            raise ValueError("learning rates must be >= 0")
        if self.pseudo not in ("soft", "hard"):
            raise ValueError("pseudo must be 'soft' or 'hard'")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class TrainData:
    labeled: list[Scene]
    auxiliary: dict[str, list[Scene]] = field(default_factory=dict)


@dataclass
class TrainState:
    student: ParamVec
    teacher: ParamVec
    iteration: int
    rng: np.random.Generator
    history: list[tuple[int, dict[str, float]]] = field(default_factory=list)
    val_history: list[tuple[int, float]] = field(default_factory=list)
    best_iteration: int = -1
    best_score: float = -np.inf
    best_teacher: ParamVec | None = None
    best_student: ParamVec | None = None
    student_snapshots: list[tuple[int, ParamVec]] = field(default_factory=list)
    trajectory: list[ParamVec] | None = None
    view_log: list[tuple[int, str, str, str]] | None = None

    def term_series(self, term: str) -> np.ndarray:
        return np.array([terms.get(term, np.nan) for _, terms in self.history])


def ema_update(teacher: ParamVec, student: ParamVec, alpha: float) -> ParamVec:
    if teacher.config_hash != student.config_hash or len(teacher) != len(student):
        raise nnet.ConfigError("teacher and student parameter vectors do not match")
    return teacher.with_values(alpha * teacher.values + (1.0 - alpha) * student.values)


class _Domain:
    """Stacked view of a scene list for fast batching."""

    def __init__(self, scenes: list[Scene], bank: NoiseBank | None = None):
        if not scenes:
            raise UsageError("empty scene list")
        self.scenes = scenes
        self.images = np.stack([s.image for s in scenes]).astype(np.float64)
        self.bank = bank

    def sample(self, rng: np.random.Generator, batch: int) -> np.ndarray:
        return rng.integers(0, len(self.scenes), size=batch)

    def weak_views(self, idx, rng, sigma):
        """Weak views (see ``synthgen.weak_aug_batch``) and their flipped boxes."""
        images, flips = weak_aug_batch(self.images[idx], rng, sigma, bank=self.bank)
        boxes = [[flip_box(b) for b in self.scenes[i].boxes] if f else list(self.scenes[i].boxes)
                 for i, f in zip(idx, flips)]
        return images, boxes


def _noise_bank(config: TrainerConfig, scenes: list[Scene]) -> NoiseBank | None:
    if not config.noise_bank:
        return None
    return NoiseBank(scenes[0].image.shape, config.noise_bank, config.seed)


def _digest(a: np.ndarray) -> str:
    return hashlib.blake2b(np.ascontiguousarray(a).tobytes(), digest_size=12).hexdigest()


def _sgd(params: ParamVec, grad: np.ndarray, lr: float) -> ParamVec:
    if lr == 0:
        return params
    return params.with_values(params.values - lr * grad)


def pretrain(config: TrainerConfig, labeled_data: list[Scene],
             model_config: ModelConfig = ModelConfig(), init: ParamVec | None = None,
             monitor: Callable[[int, ParamVec], None] | None = None,
             iters: int | None = None) -> ParamVec:
    """Plain supervised SGD on the labeled domain with weak augmentation."""
    if not labeled_data:
        raise UsageError("pretrain needs labeled scenes")
    domain = _Domain(labeled_data, _noise_bank(config, labeled_data))
    rng = np.random.default_rng([config.seed, 0])
    params = init if init is not None else nnet.init_params(
        np.random.default_rng([config.seed, 2]), model_config)
    iters = config.iters_pretrain if iters is None else iters
    for it in range(1, iters + 1):
        idx = domain.sample(rng, config.batch)
        weak, boxes = domain.weak_views(idx, rng, config.weak_sigma)
        gt = nnet.gt_targets(boxes, [domain.scenes[i].classes for i in idx], model_config)
        try:
            _, grad = nnet.sup_loss(params, weak, gt, model_config, config.reg_lambda)
        except NumericError as exc:
            raise TrainingDiverged(it, exc) from exc
        params = _sgd(params, grad.values, config.lr_pretrain)
        if monitor is not None and config.eval_every and it % config.eval_every == 0:
            monitor(it, params)
    return params


def _pseudo_mode(mode: str, config: TrainerConfig) -> str:
    return ("ws-" if mode == "ws-dgod" else "ss-") + config.pseudo


def train(mode: str, config: TrainerConfig, data: TrainData, init: ParamVec,
          model_config: ModelConfig = ModelConfig(),
          validator: Callable[[ParamVec], float] | None = None,
          keep_trajectory: bool = False, record_views: bool = False,
          iters: int | None = None, teacher_init: ParamVec | None = None) -> TrainState:
    """Run ``iters_mt`` iterations of the requested training mode.

    ``data.auxiliary`` holds the unlabeled (ss/uda) or weakly labeled (ws)
    domains; in ``uda`` mode it is the target's training split.  Logged
    ``regul/*`` terms already include the ``beta`` factor.  Both networks
    start from ``init`` unless ``teacher_init`` is given.
    """
    if mode not in TRAIN_MODES:
        raise UsageError(f"unknown training mode {mode!r}")
    if mode != "ema-only" and not data.auxiliary:
        raise UsageError(f"mode {mode} needs auxiliary-domain data")
    bank = _noise_bank(config, data.labeled)
    labeled = _Domain(data.labeled, bank)
    aux = {} if mode == "ema-only" else {k: _Domain(v, bank) for k, v in data.auxiliary.items()}
    pseudo_mode = _pseudo_mode(mode, config)
    iters = config.iters_mt if iters is None else iters

    teacher0 = init if teacher_init is None else teacher_init
    state = TrainState(student=init.copy(), teacher=teacher0.copy(), iteration=0,
                       rng=np.random.default_rng([config.seed, 1]),
                       trajectory=[] if keep_trajectory else None,
                       view_log=[] if record_views else None)
    rng = state.rng
    for it in range(1, iters + 1):
        student = state.student
        terms: dict[str, float] = {}
        try:
            idx = labeled.sample(rng, config.batch)
            weak, boxes = labeled.weak_views(idx, rng, config.weak_sigma)
            strong = strong_aug_batch(weak, rng, bank=labeled.bank)
            gt = nnet.gt_targets(boxes, [labeled.scenes[i].classes for i in idx], model_config)
            loss, g = nnet.sup_loss(student, strong, gt, model_config, config.reg_lambda)
            terms["sup"] = loss
            grad = g.values.copy()

            for name, dom in aux.items():
                idx = dom.sample(rng, config.batch)
                weak, _ = dom.weak_views(idx, rng, config.weak_sigma)
                strong = strong_aug_batch(weak, rng, bank=labeled.bank)
                raw = nnet.forward(state.teacher, weak, model_config)
                weak_labels = [dom.scenes[i].weak_label for i in idx]
                pls = build_targets(raw, pseudo_mode, weak_labels, config.tau, config.temperature)
                loss, g = nnet.unsup_loss(student, strong, pls.targets, model_config,
                                          config.reg_lambda)
                terms[f"unsup/{name}"] = loss
                grad += g.values
                if config.beta > 0:
                    loss, g = nnet.regul_loss(student, weak, raw, model_config, config.reg_lambda)
                    terms[f"regul/{name}"] = config.beta * loss
                    grad += config.beta * g.values
                    if state.view_log is not None:
                        # both networks consume this exact array
                        state.view_log.append((it, name, _digest(weak), _digest(weak)))
        except NumericError as exc:
            raise TrainingDiverged(it, exc) from exc
        total = 0.0
        for v in terms.values():
            total += v
        terms["total"] = total
        if not np.isfinite(total):
            raise TrainingDiverged(it)

        state.student = _sgd(student, grad, config.lr)
        if config.ema_every and it % config.ema_every == 0:
            state.teacher = ema_update(state.teacher, state.student, config.alpha)
        state.iteration = it
        state.history.append((it, terms))
        if state.trajectory is not None:
            state.trajectory.append(state.student)

        if config.eval_every and (it % config.eval_every == 0 or it == iters):
            if state.student_snapshots and state.student_snapshots[-1][0] == it:
                continue
            state.student_snapshots.append((it, state.student))
            if validator is not None:
                score = float(validator(state.teacher))
                state.val_history.append((it, score))
                log.debug("%s it=%d val=%.4f", mode, it, score)
                if score > state.best_score:
                    state.best_score = score
                    state.best_iteration = it
                    state.best_teacher = state.teacher
                    state.best_student = state.student

    if state.best_teacher is None:
        state.best_teacher, state.best_student = state.teacher, state.student
        state.best_iteration = state.iteration
    return state


def train_data_for(mode: str, dataset: dict[str, list[Scene]]) -> TrainData:
    """Wire dataset splits to the training layout of each mode."""
    if mode == "uda":
        return TrainData(dataset["s1"], {"t": dataset["t/train"]})
    if mode == "ema-only":
        return TrainData(dataset["s1"], {})
    return TrainData(dataset["s1"], {"s2": dataset["s2"], "s3": dataset["s3"]})
