"""RMSprop, the per-epoch exponential learning-rate schedule, and BCE loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import ShapeError


@dataclass(frozen=True)
class LrSchedule:
    """Geometric decay: ``lr(epoch) = initial_lr * decay_factor ** epoch``."""

    initial_lr: float = 1e-3
    decay_factor: float = 0.7

    def __post_init__(self) -> None:
        if self.initial_lr <= 0:
            raise ValueError(f"initial_lr must be positive, got {self.initial_lr}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError(f"decay_factor must be in (0, 1], got {self.decay_factor}")

    def lr_at_epoch(self, epoch: int) -> float:
        if epoch < 0:
            raise ValueError(f"epoch must be >= 0, got {epoch}")
        return self.initial_lr * self.decay_factor ** epoch


def lr_at_epoch(schedule: LrSchedule, epoch: int) -> float:
    return schedule.lr_at_epoch(epoch)


@dataclass
class RMSprop:
    """Plain RMSprop (no momentum, no centering).

    For every parameter ``p`` with gradient ``g``::

        cache <- rho * cache + (1 - rho) * g**2
        p     <- p - lr * g / (sqrt(cache) + epsilon)

    Parameters are updated in place. ``cache`` maps parameter names to
    accumulators and is created lazily with zeros.
    """

    learning_rate: float = 1e-3
    rho: float = 0.9
    epsilon: float = 1e-7
    cache: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must be in (0, 1), got {self.rho}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
            acc = self.cache.get(name)
            if acc is None:
                acc = self.cache[name] = np.zeros_like(p)
            elif acc.shape != p.shape:
                raise ShapeError(f"optimizer cache for {name!r} has shape {acc.shape}, parameter has {p.shape}")
            dtype = p.dtype.type
            acc *= dtype(self.rho)
            acc += dtype(1.0 - self.rho) * np.square(g)
            denom = np.sqrt(acc)
            denom += dtype(self.epsilon)
            update = g / denom
            update *= dtype(self.learning_rate)
            p -= update

    def hyperparameters(self) -> dict:
        return {"learning_rate": self.learning_rate, "rho": self.rho, "epsilon": self.epsilon}


def rmsprop_step(
    params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: RMSprop
) -> None:
    state.step(params, grads)


def bce_loss(
    predictions: np.ndarray, labels: np.ndarray, eps_clip: float = 1e-7
) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. the predictions.

    Predictions are clipped to ``[eps_clip, 1 - eps_clip]`` before the log;
    the gradient ``(p - y) / (p * (1 - p) * N)`` is evaluated on the clipped
    value.
    """
    if predictions.shape != labels.shape:
        raise ShapeError(f"predictions {predictions.shape} and labels {labels.shape} differ in shape")
    if labels.size == 0:
        raise ValueError("empty batch")
    y = np.asarray(labels, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    p = np.clip(np.asarray(predictions, dtype=np.float64), eps_clip, 1.0 - eps_clip)
    n = y.size
    loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    grad = (p - y) / (p * (1.0 - p) * n)
    return float(loss), grad.astype(predictions.dtype)

