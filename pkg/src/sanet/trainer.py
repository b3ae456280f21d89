"""Adam with cosine annealing, per-group learning rates and an optional warmup freeze."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import GROUPS, Parameter, Tape, Tensor, backward
from .data import AugmentConfig, Dataset, augment, pk_sample
from .losses import total_loss
from .model import SANet, save_checkpoint

logger = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    """Raised when the loss or a gradient stops being finite."""


@dataclass
class TrainConfig:
    epochs: int = 10
    steps_per_epoch: int = 40
    base_lr: float = 5e-4
    stn_lr_multiplier: float = 0.05
    margin: float = 0.3
    P: int = 8
    K: int = 4
    warmup_freeze_epochs: int = 0
    augment: bool = True
    checkpoint_every: int = 0  # epochs; 0 = only at the end
    seed: int = 0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 < self.stn_lr_multiplier <= 1:
            raise ValueError(f"stn_lr_multiplier must lie in (0, 1], got {self.stn_lr_multiplier}")
        if self.K < 2 or self.P < 2:
            raise ValueError("P and K must both be at least 2")
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ValueError("epochs and steps_per_epoch must be positive")
        if not 0 <= self.warmup_freeze_epochs <= self.epochs:
            raise ValueError("warmup_freeze_epochs must lie in [0, epochs]")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @classmethod
    def with_warmup_freeze(cls, **overrides) -> "TrainConfig":
        return cls(**{"warmup_freeze_epochs": 10, **overrides})

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls(**json.loads(Path(path).read_text()))


def cosine_lr(step: int, total_steps: int, base: float) -> float:
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base * (1 + math.cos(math.pi * step / total_steps)) / 2


def param_groups(params, base_lr: float, stn_lr_multiplier: float) -> dict[str, tuple[list[Parameter], float]]:
    """Map group name to (parameters, learning rate)."""
    groups = {g: [] for g in GROUPS}
    for p in params:
        if p.group not in groups:
            raise ValueError(f"parameter {p.name!r} has no valid group tag ({p.group!r})")
        groups[p.group].append(p)
    mult = {"trunk": 1.0, "head": 1.0, "stn": stn_lr_multiplier}
    return {g: (ps, base_lr * mult[g]) for g, ps in groups.items()}


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params, grads: dict[str, np.ndarray], state: AdamState, lr: dict[str, float] | float) -> None:
    """One in-place Adam update; ``lr`` may be a float or a per-parameter-name dict."""
    for p in params:
        g = grads[p.name]
        if not np.all(np.isfinite(g)):
            raise NumericalAbort(f"non-finite gradient for parameter {p.name}")
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.name} {p.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p in params:
        g = grads[p.name]
        dtype = p.value.data.dtype
        m = state.m.get(p.name)
        if m is None:
            m = np.zeros_like(p.value.data)
            state.v[p.name] = np.zeros_like(p.value.data)
        m = (b1 * m + (1 - b1) * g).astype(dtype)
        v = (b2 * state.v[p.name] + (1 - b2) * g * g).astype(dtype)
        state.m[p.name] = m
        state.v[p.name] = v
        rate = lr[p.name] if isinstance(lr, dict) else lr
        update = rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.value.data = (p.value.data - update).astype(dtype)


def training_step(model: SANet, images: np.ndarray, labels: np.ndarray, margin: float):
    with Tape() as tape:
        out = model(Tensor(images))
        loss, breakdown = total_loss(out, labels, margin)
        if not np.isfinite(loss.data):
            raise NumericalAbort(f"non-finite loss {float(loss.data)}")
        grads = backward(tape, loss, model.parameters())
    return breakdown, grads


@dataclass
class FitResult:
    checkpoint: Path
    log: Path
    losses: list[float]


def fit(model: SANet, dataset: Dataset, config: TrainConfig, out_dir, *,
        augment_cfg: AugmentConfig = AugmentConfig(), progress: bool = False) -> FitResult:
    """Train ``model`` in place; writes ``model.json``/``model.bin`` and ``train_log.jsonl``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.json"
    log_path = out / "train_log.jsonl"
    train = dataset.train
    ids = np.unique(train.identities)
    if len(ids) != model.config.num_classes:
        raise ValueError(f"model has {model.config.num_classes} classes, train split has {len(ids)} identities")
    label_of = {int(i): k for k, i in enumerate(ids)}

    rng = np.random.default_rng([config.seed, 2])
    state = AdamState()
    params = model.parameters()
    groups = param_groups(params, 1.0, config.stn_lr_multiplier)
    mult = {p.name: scale for ps, scale in groups.values() for p in ps}
    trunk = {p.name for p in groups["trunk"][0]}
    total = config.total_steps
    losses = []
    save_checkpoint(model, ckpt, extra={"step": 0})
    model.train()
    start = time.perf_counter()
    step = 0
    with open(log_path, "w") as log:
        for epoch in range(config.epochs):
            frozen = epoch < config.warmup_freeze_epochs
            for _ in range(config.steps_per_epoch):
                lr = cosine_lr(step, total, config.base_lr)
                idx = pk_sample(train, config.P, config.K, rng)
                imgs = train.images[idx]
                if config.augment:
                    imgs = np.stack([augment(im, rng, augment_cfg) for im in imgs])
                labels = np.array([label_of[int(i)] for i in train.identities[idx]])
                try:
                    breakdown, grads = training_step(model, imgs, labels, config.margin)
                    active = [p for p in params if not (frozen and p.name in trunk)]
                    adam_step(active, grads, state, {n: lr * s for n, s in mult.items()})
                except NumericalAbort:
                    logger.error("numerical abort at step %d; last good checkpoint kept at %s", step, ckpt)
                    raise
                losses.append(breakdown.total)
                record = {
                    "step": step,
                    "epoch": epoch,
                    "lr": {g: lr * s for g, (_, s) in groups.items()},
                    "loss": breakdown.to_dict(),
                    "wall_time": round(time.perf_counter() - start, 3),
                }
                log.write(json.dumps(record) + "\n")
                step += 1
                if progress and step % 20 == 0:
                    logger.info("step %d/%d loss %.4f lr %.2e", step, total, breakdown.total, lr)
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(model, ckpt, extra={"step": step})
    model.eval()
    save_checkpoint(model, ckpt, extra={"step": step})
    return FitResult(checkpoint=ckpt, log=log_path, losses=losses)
