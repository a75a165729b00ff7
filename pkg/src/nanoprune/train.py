"""Training loops: language-model pretraining and logit distillation.

Both share the WSD schedule and AdamW step defined here.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, TextIO

import numpy as np

from .autodiff import Tape, Tensor, grad, ops
from .model import Checkpoint, model_forward

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Stage:
    tokens: int
    seq_len: int


@dataclass
class TrainConfig:
    lr_stable: float = 4.5e-4
    lr_min: float = 4.5e-6
    warmup_steps: int = 0
    decay_fraction: float = 0.18  # share of total steps spent decaying
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.1
    batch_tokens: int = 2048
    stages: list[Stage] = field(default_factory=lambda: [Stage(200_000, 64)])
    mix_fraction: float = 0.7
    seed: int = 0
    log_every: int = 10

    def __post_init__(self):
        self.stages = [s if isinstance(s, Stage) else Stage(**s) for s in self.stages]
        if not 0 <= self.lr_min <= self.lr_stable:
            raise ValueError("need 0 <= lr_min <= lr_stable")
        if self.lr_stable > 0 and self.lr_min <= 0:
            raise ValueError("lr_min must be positive")
        for name in ("decay_fraction", "mix_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not self.stages:
            raise ValueError("at least one stage is required")

    def steps_per_stage(self) -> list[int]:
        return [max(1, s.tokens // self.batch_tokens) for s in self.stages]

    @property
    def total_steps(self) -> int:
        return sum(self.steps_per_stage())

    def to_dict(self) -> dict:
        return asdict(self)


def decay_fraction_from_tokens(decay_tokens: float, total_tokens: float) -> float:
    return decay_tokens / total_tokens


def wsd_lr(step: int, cfg: TrainConfig, total_steps: int | None = None) -> float:
    """Warmup-stable-decay: linear warmup, flat plateau, cosine decay to ``lr_min``."""
    total = cfg.total_steps if total_steps is None else total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr_stable * step / cfg.warmup_steps
    decay_start = total * (1 - cfg.decay_fraction)
    if step <= decay_start or total == decay_start:
        return cfg.lr_stable
    progress = (step - decay_start) / (total - decay_start)
    return cfg.lr_min + 0.5 * (cfg.lr_stable - cfg.lr_min) * (1 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, cfg: TrainConfig, decay: Callable[[str], bool] | None = None) -> None:
    """In-place AdamW update with bias correction and decoupled weight decay.

    ``decay(name)`` selects which tensors receive weight decay (all by default).
    """
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        if cfg.weight_decay and (decay is None or decay(name)):
            update = update + cfg.weight_decay * p
        p -= lr * update


def matrices_only(ckpt: Checkpoint) -> Callable[[str], bool]:
    return lambda name: ckpt.tensors[name].ndim >= 2


def kd_loss(student_logits: Tensor, teacher_logits) -> Tensor:
    """Forward KL(teacher || student) averaged over token positions."""
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits
    return ops.kl_div(student_logits, t)


def kd_loss_value(student_logits: np.ndarray, teacher_logits: np.ndarray) -> float:
    return float(ops.kl_div(Tensor(student_logits), teacher_logits).data)


def lm_loss_value(ckpt: Checkpoint, batch: np.ndarray) -> float:
    out = model_forward(batch[:, :-1], ckpt)
    return float(ops.cross_entropy(out, batch[:, 1:]).data)


@dataclass
class LogRecord:
    step: int
    tokens: int
    lr: float
    loss: float
    stage: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _fit(student: Checkpoint, data, cfg: TrainConfig, loss_fn, log_file: TextIO | None,
         callback=None) -> tuple[Checkpoint, list[LogRecord]]:
    student = student.copy()
    params = student.tensors
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    decay = matrices_only(student)
    total = cfg.total_steps
    history: list[LogRecord] = []
    step = tokens = 0
    for stage_idx, (stage, n_steps) in enumerate(zip(cfg.stages, cfg.steps_per_stage())):
        per_batch = max(1, cfg.batch_tokens // stage.seq_len)
        for _ in range(n_steps):
            batch = data.sample(rng, per_batch, stage.seq_len)
            lr = wsd_lr(step, cfg, total)
            tracked = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
            with Tape() as tape:
                loss = loss_fn(batch, student, tracked)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at step {step} (stage {stage_idx}, lr {lr:.3g})")
            if lr > 0:
                g = grad(loss, tracked.values(), tape)
                adam_step(params, {k: g[t].data for k, t in tracked.items()}, state, lr, cfg, decay)
            step += 1
            tokens += batch.shape[0] * stage.seq_len
            rec = LogRecord(step, tokens, lr, value, stage_idx)
            history.append(rec)
            if log_file is not None:
                log_file.write(rec.to_json() + "\n")
            if cfg.log_every and step % cfg.log_every == 0:
                log.debug("step %d loss %.4f lr %.3g", step, value, lr)
            if callback is not None:
                callback(rec)
    return student, history


def train_lm(ckpt: Checkpoint, data, cfg: TrainConfig, log_file: TextIO | None = None):
    """Next-token cross-entropy training; returns (checkpoint, history)."""

    def loss_fn(batch, student, tracked):
        out = model_forward(batch[:, :-1], student, params=tracked)
        return ops.cross_entropy(out, batch[:, 1:])

    return _fit(ckpt, data, cfg, loss_fn, log_file)


def distill_run(teacher: Checkpoint, student: Checkpoint, data, cfg: TrainConfig,
                log_file: TextIO | None = None):
    """Logit distillation from a frozen teacher; returns (student, history)."""
    if teacher.config.vocab_size != student.config.vocab_size:
        raise ValueError("teacher and student must share a vocabulary")

    def loss_fn(batch, stud, tracked):
        inputs = batch[:, :-1]
        t_logits = model_forward(inputs, teacher).data
        s_logits = model_forward(inputs, stud, params=tracked)
        return kd_loss(s_logits, t_logits)

    return _fit(student, data, cfg, loss_fn, log_file)


def merge_checkpoints(a: Checkpoint, b: Checkpoint, alpha: float) -> Checkpoint:
    """``(1 - alpha) * a + alpha * b`` tensorwise."""
    if a.config != b.config:
        raise ValueError("cannot merge checkpoints with different configs")
    if alpha == 0:
        return a.copy()
    if alpha == 1:
        return b.copy()
    return Checkpoint(a.config, {k: (1 - alpha) * a.tensors[k] + alpha * b.tensors[k]
                                 for k in a.tensors})
