"""Adam optimizer and training-loop helpers shared by both trainable models."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TrainingDiverged(FloatingPointError):
    """Raised when a loss or parameter becomes non-finite."""

    def __init__(self, model: str, epoch: int, batch: int, norms: dict[str, float]):
        self.model, self.epoch, self.batch, self.norms = model, epoch, batch, norms
        detail = ", ".join(f"{k}={v:.4g}" for k, v in norms.items())
        super().__init__(f"{model} training diverged at epoch {epoch}, batch {batch}; "
                         f"parameter norms: {detail}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 25
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


class Adam:
    """Adaptive-moment optimizer updating a dict of arrays in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainHistory:
    epoch_loss: list[float] = field(default_factory=list)
    batch_loss: list[float] = field(default_factory=list)
    batch_variance: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"epoch_loss": self.epoch_loss, "batch_loss": self.batch_loss,
                "batch_variance": self.batch_variance, "warnings": self.warnings}


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def check_finite(model: str, params: dict[str, np.ndarray], loss: float, epoch: int, batch: int) -> None:
    if np.isfinite(loss) and all(np.isfinite(p).all() for p in params.values()):
        return
    norms = {k: float(np.linalg.norm(v)) for k, v in params.items()}
    raise TrainingDiverged(model, epoch, batch, norms)


def uniform_init(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    """Weights drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(shape[1])
    return rng.uniform(-bound, bound, size=shape)
