"""Optimizers, learning-rate schedule and the mini-batch training loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .anticipation import AnticipationConfig, anticipation_loss, evaluate, forward_batch, stack_batch
from .autodiff import backward
from .data import Segment


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class OptimConfig:
    name: str = "adam"  # adam | sgd
    lr: float = 1e-4
    min_lr: float = 1e-7
    anneal_fraction: float = 0.25
    weight_decay: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 0.0  # 0 disables clipping
    epochs: int = 10
    batch_size: int = 32


def lr_at(cfg: OptimConfig, step: int, total_steps: int) -> float:
    """Constant rate, then cosine decay to ``min_lr`` over the last ``anneal_fraction`` of training."""
    if cfg.lr == 0.0:
        return 0.0
    start = int(round((1.0 - cfg.anneal_fraction) * total_steps))
    if step < start or total_steps <= start:
        return cfg.lr
    frac = (step - start) / max(1, total_steps - 1 - start)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * min(frac, 1.0)))


class Optimizer:
    """Adam with decoupled weight decay, or SGD with momentum and L2 decay."""

    def __init__(self, params: dict, cfg: OptimConfig):
        if cfg.name not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {cfg.name!r}")
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.state: dict[str, dict[str, np.ndarray]] = {
            name: {"m": np.zeros_like(p.data)} | ({"v": np.zeros_like(p.data)} if cfg.name == "adam" else {})
            for name, p in params.items()
        }

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in self.params.items()}
        if cfg.clip_norm > 0:
            total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if total > cfg.clip_norm:
                scale = cfg.clip_norm / total
                grads = {n: g * scale for n, g in grads.items()}
        if lr == 0.0:
            return
        for name, p in self.params.items():
            g = grads[name]
            st = self.state[name]
            if cfg.name == "adam":
                st["m"] = cfg.beta1 * st["m"] + (1 - cfg.beta1) * g
                st["v"] = cfg.beta2 * st["v"] + (1 - cfg.beta2) * g * g
                mhat = st["m"] / (1 - cfg.beta1**self.t)
                vhat = st["v"] / (1 - cfg.beta2**self.t)
                upd = mhat / (np.sqrt(vhat) + cfg.eps) + cfg.weight_decay * p.data
            else:
                g = g + cfg.weight_decay * p.data
                st["m"] = cfg.momentum * st["m"] + g
                upd = st["m"]
            p.data = (p.data - lr * upd).astype(p.data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([self.t], dtype=np.int64)}
        for name, st in self.state.items():
            for key, arr in st.items():
                out[f"{key}.{name}"] = arr
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["t"][0])
        for name, st in self.state.items():
            for key in st:
                st[key] = arrays[f"{key}.{name}"].copy()


@dataclass
class TrainResult:
    log: list[str] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    steps: int = 0
    reports: list = field(default_factory=list)


def train(
    model,
    train_set: Sequence[Segment],
    optim_cfg: OptimConfig,
    cfg: AnticipationConfig,
    fps: float,
    val_set: Sequence[Segment] | None = None,
    seed: int = 0,
    max_steps: int | None = None,
    target_loss: float | None = None,
    optimizer: Optimizer | None = None,
    on_line: Callable[[str], None] | None = None,
    on_epoch: Callable[[int, "TrainResult"], None] | None = None,
) -> TrainResult:
    """Mini-batch training with a per-epoch reshuffle; logs ``epoch,step,loss,lr`` lines.

    ``max_steps`` caps the total number of updates and ``target_loss`` stops
    as soon as a batch loss falls below it.  Raises :class:`TrainingDiverged`
    on a non-finite loss.
    """
    if not train_set:
        raise ValueError("training set is empty")
    opt = optimizer or Optimizer(model.named_parameters(), optim_cfg)
    bs = min(optim_cfg.batch_size, len(train_set))
    per_epoch = math.ceil(len(train_set) / bs)
    total = per_epoch * optim_cfg.epochs if max_steps is None else max_steps
    result = TrainResult()

    def emit(line):
        result.log.append(line)
        if on_line:
            on_line(line)

    step = opt.t
    epoch = 0
    done = step >= total
    while not done:
        order = np.random.default_rng([seed, epoch]).permutation(len(train_set))
        for i in range(0, len(order), bs):
            batch = [train_set[j] for j in order[i : i + bs]]
            frames, labels = stack_batch(batch, cfg, fps)
            model.zero_grad()
            loss = anticipation_loss(forward_batch(model, frames, cfg), labels)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(step, value)
            backward(loss)
            lr = lr_at(optim_cfg, step, total)
            opt.step(lr)
            step += 1
            result.losses.append(value)
            emit(f"{epoch},{step},{value!r},{lr!r}")
            if step >= total or (target_loss is not None and value < target_loss):
                done = True
                break
        if val_set:
            report = evaluate(model, val_set, cfg, fps)
            result.reports.append(report)
            for line in report.lines():
                emit(line)
        if on_epoch:
            on_epoch(epoch, result)
        epoch += 1
    result.steps = step
    return result
