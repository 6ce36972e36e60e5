"""AdamW with a cosine learning-rate schedule and growth-aware state.

Parameters added by a growth event join with zero first and second moments
while the global step count carries on, so the trajectories of existing
parameters are not perturbed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from hetscale.tensor import Tensor


@dataclass
class OptimizerConfig:
    kind: str = "adamw"
    lr: float | None = None
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.kind != "adamw":
            raise ValueError(f"unsupported optimizer {self.kind!r}")
        if self.lr is not None and not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must be two values in [0, 1)")

    def base_lr(self, batch_size: int) -> float:
        """Explicit ``lr``, or the linear-scaling default 5e-4 * batch / 512."""
        return self.lr if self.lr is not None else 5e-4 * batch_size / 512

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        extra = set(d) - {f.name for f in fields(cls)}
        if extra:
            raise ValueError(f"unknown optimizer keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class LRScheduleConfig:
    kind: str = "cosine"
    warmup_epochs: int = 5
    min_lr: float = 1e-6

    def __post_init__(self):
        if self.kind != "cosine":
            raise ValueError(f"unsupported lr schedule {self.kind!r}")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.min_lr < 0:
            raise ValueError("min_lr must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LRScheduleConfig":
        extra = set(d) - {f.name for f in fields(cls)}
        if extra:
            raise ValueError(f"unknown lr_schedule keys: {sorted(extra)}")
        return cls(**d)


def cosine_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float,
              min_lr: float = 0.0) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to ``min_lr``."""
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    sq = sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None)
    norm = math.sqrt(sq)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return norm


class AdamW:
    """Decoupled weight decay Adam over named parameters.

    Weight decay applies only to matrices (2-D weights); biases, norms,
    tokens and position embeddings are exempt.
    """

    def __init__(self, named_params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.05):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.add_params(named_params)

    def add_params(self, named_params) -> list[str]:
        """Register parameters not yet tracked, with zero moments."""
        added = []
        for name, p in named_params:
            if name in self.params:
                if self.params[name] is not p:
                    raise ValueError(f"parameter name {name!r} rebound to a different tensor")
                continue
            self.params[name] = p
            self.m[name] = np.zeros_like(p.data)
            self.v[name] = np.zeros_like(p.data)
            added.append(name)
        return added

    def decays(self, name: str) -> bool:
        return self.params[name].ndim == 2 and not name.endswith(("cls_token", "pos_embed"))

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay and self.decays(name):
                p.data *= p.data.dtype.type(1.0 - self.lr * self.weight_decay)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (self.lr * update).astype(p.data.dtype)

    def state_dict(self) -> dict:
        return {"step": self.step_count, "lr": self.lr,
                "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        for key in ("m", "v"):
            missing = set(self.params) - set(state[key])
            if missing:
                raise ValueError(f"optimizer state lacks {key} for {sorted(missing)[:3]}")
        self.step_count = int(state["step"])
        self.lr = float(state["lr"])
        for name in self.params:
            self.m[name] = np.asarray(state["m"][name], dtype=self.params[name].dtype).copy()
            self.v[name] = np.asarray(state["v"][name], dtype=self.params[name].dtype).copy()
