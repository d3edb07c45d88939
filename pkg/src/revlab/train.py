"""Deterministic mini-batch training (SGD or Adam) for the toy model."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .model import ModelConfig, Params, batch_loss, batch_loss_and_grad, copy_params

OPTIMIZERS = ("sgd", "adam")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at step {step}")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_size: int = 8
    learning_rate: float = 0.05
    optimizer: str = "sgd"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("adam parameters out of range")

    def to_dict(self) -> dict:
        return asdict(self)


def batch_schedule(n_docs: int, batch_size: int, steps: int, seed: int) -> list[np.ndarray]:
    """Document indices per step: consecutive slices of seeded epoch shuffles."""
    if n_docs <= 0:
        raise ValueError("no documents to schedule")
    rng = np.random.default_rng(seed)
    stream: list[int] = []
    need = steps * batch_size
    while len(stream) < need:
        stream.extend(rng.permutation(n_docs).tolist())
    return [np.array(stream[i * batch_size : (i + 1) * batch_size]) for i in range(steps)]


class Optimizer:
    """SGD or Adam over a dict of float64 tensors; all updates are elementwise."""

    def __init__(self, cfg: TrainConfig, params: Params):
        self.cfg = cfg
        self.t = 0
        if cfg.optimizer == "adam":
            self.m = {k: np.zeros_like(v) for k, v in params.items()}
            self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: Params, grads: Params) -> Params:
        cfg = self.cfg
        self.t += 1
        lr = cfg.learning_rate
        if cfg.optimizer == "sgd":
            return {k: params[k] - lr * grads[k] for k in params}
        b1, b2 = cfg.beta1, cfg.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        out = {}
        for k in params:
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * (g * g)
            out[k] = params[k] - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + cfg.eps)
        return out


def train(params: Params, cfg: ModelConfig, seqs, train_cfg: TrainConfig, direction: str = "standard",
          schedule=None) -> tuple[Params, list[float]]:
    """Train a copy of ``params``; returns the final parameters and per-step batch losses."""
    if schedule is None:
        schedule = batch_schedule(len(seqs), train_cfg.batch_size, train_cfg.steps, train_cfg.seed)
    params = copy_params(params)
    opt = Optimizer(train_cfg, params)
    losses = []
    for step, idx in enumerate(schedule):
        loss, grads = batch_loss_and_grad(params, cfg, [seqs[i] for i in idx], direction)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss)
        losses.append(loss)
        params = opt.step(params, grads)
    return params, losses


def evaluate(params: Params, cfg: ModelConfig, seqs, direction: str = "standard") -> float:
    return batch_loss(params, cfg, seqs, direction)
