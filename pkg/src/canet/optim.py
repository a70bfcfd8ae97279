"""SGD with momentum and the cosine learning-rate schedule."""

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class CosineSchedule:
    """lr(t) = lr_min + 0.5*(lr_max - lr_min)*(1 + cos(pi*t/total_steps))."""

    total_steps: int
    lr_max: float = 0.02
    lr_min: float = 0.0

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ValueError(f"total_steps must be positive, got {self.total_steps}")
        if not 0.0 <= self.lr_min <= self.lr_max:
            raise ValueError(
                f"need 0 <= lr_min <= lr_max, got {self.lr_min} and {self.lr_max}"
            )

    def lr_at(self, t):
        if not 0 <= t <= self.total_steps:
            raise ValueError(
                f"step {t} outside schedule range [0, {self.total_steps}]"
            )
        span = self.lr_max - self.lr_min
        return self.lr_min + 0.5 * span * (1.0 + math.cos(math.pi * t / self.total_steps))


class SGD:
    """Momentum SGD over a name -> Tensor parameter mapping.

    Update rule per parameter: v <- momentum*v + g; w <- w - lr*v.
    A grad of None counts as zero.  Velocities are exposed (and restorable)
    so checkpoints can resume optimizer state exactly.
    """

    def __init__(self, params, momentum=0.9):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.params = dict(params)
        self.momentum = momentum
        self.steps = 0
        self.velocity = {
            name: np.zeros_like(p.data) for name, p in self.params.items()
        }

    def step(self, lr):
        mu = self.momentum
        for name, p in self.params.items():
            g = p.grad
            v = self.velocity[name]
            if g is not None:
                if g.shape != p.data.shape:
                    raise ValueError(
                        f"gradient shape {g.shape} does not match parameter "
                        f"{name!r} shape {p.data.shape}"
                    )
                v *= mu
                v += g
            else:
                v *= mu
            p.data -= lr * v
        self.steps += 1

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
