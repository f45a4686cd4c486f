"""Optimizer, learning-rate schedule, and regularization primitives."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BASE_LR = 0.001
DECAY_FACTOR = 0.8
DECAY_PERIOD = 10


class RngStream:
    """Seeded PCG64 stream.  ``child(key)`` derives an independent substream."""

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(key)
        self.counter = 0
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF, *self.key]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, *key: int) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(int(k) for k in key))

    @property
    def generator(self) -> np.random.Generator:
        self.counter += 1
        return self._gen

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.generator.choice(a, size=size, replace=replace)


def lr_at(epoch: int, base: float = BASE_LR, factor: float = DECAY_FACTOR,
          period: int = DECAY_PERIOD) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return base * factor ** (epoch // period)


@dataclass
class OptimizerState:
    lr: float = BASE_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: OptimizerState, lr: float | None = None) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update.  Returns new arrays; ``state`` is advanced in place."""
    lr = state.lr if lr is None else lr
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        state.m[name] = m
        state.v[name] = v
    state.step = t
    return out


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float = 5.0):
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if total <= max_norm or total == 0.0:
        return grads, total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total


def dropout(x: Tensor, rate: float, rng: RngStream | None, training: bool) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return x * (keep / (1.0 - rate))


@dataclass
class BatchNormStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def fresh(cls, width: int) -> "BatchNormStats":
        return cls(np.zeros(width), np.ones(width))


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, stats: BatchNormStats,
               training: bool) -> Tensor:
    """Normalize over axis 0.  Training uses batch statistics and updates ``stats``.

    Running statistics track the biased batch variance.
    """
    if training:
        if x.shape[0] < 1:
            raise ValueError("batch_norm needs at least one row in training")
        mu = ad.mean(x, axis=0, keepdims=True)
        centered = x - mu
        var = ad.mean(centered * centered, axis=0, keepdims=True)
        normed = centered * ad.power(var + stats.eps, -0.5)
        m = stats.momentum
        stats.mean = m * stats.mean + (1 - m) * mu.value[0]
        stats.var = m * stats.var + (1 - m) * var.value[0]
    else:
        normed = (x - stats.mean) * (1.0 / np.sqrt(stats.var + stats.eps))
    return normed * scale + shift
