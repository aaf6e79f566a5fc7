"""Plain SGD and Adam over name -> tensor maps.

Updates are out-of-place so the same code serves the differentiable inner
loop of meta-learning and ordinary training steps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import torch

from ..errors import InvalidInputError

Tensors = Mapping[str, torch.Tensor]


@dataclass
class OptimState:
    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise InvalidInputError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise InvalidInputError(f"learning rate must be positive, got {self.lr}")

    @classmethod
    def adam(cls, lr: float, params: Tensors | None = None, **kw) -> "OptimState":
        state = cls("adam", lr, **kw)
        if params is not None:
            state.m = {k: torch.zeros_like(v) for k, v in params.items()}
            state.v = {k: torch.zeros_like(v) for k, v in params.items()}
        return state

    @classmethod
    def sgd(cls, lr: float) -> "OptimState":
        return cls("sgd", lr)

    def hyper(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "step": self.step}


def sgd_step(params: Tensors, grads: Tensors, state: OptimState) -> tuple[dict, OptimState]:
    new = {k: p - state.lr * grads[k] for k, p in params.items()}
    return new, OptimState("sgd", state.lr, step=state.step + 1)


def adam_step(params: Tensors, grads: Tensors, state: OptimState) -> tuple[dict, OptimState]:
    """One bias-corrected Adam update."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k, torch.zeros_like(p)) * b1 + (1.0 - b1) * g
        v = state.v.get(k, torch.zeros_like(p)) * b2 + (1.0 - b2) * g * g
        new_p[k] = p - state.lr * (m / bc1) / (torch.sqrt(v / bc2) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_p, OptimState("adam", state.lr, b1, b2, state.eps, t, new_m, new_v)


def step(params: Tensors, grads: Tensors, state: OptimState) -> tuple[dict, OptimState]:
    return (adam_step if state.kind == "adam" else sgd_step)(params, grads, state)


def clip_by_global_norm(grads: Tensors, max_norm: float | None) -> dict[str, torch.Tensor]:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    if max_norm is None:
        return dict(grads)
    total = math.sqrt(sum(float((g.detach() ** 2).sum()) for g in grads.values()))
    if total <= max_norm:
        return dict(grads)
    scale = max_norm / (total + 1e-12)
    return {k: g * scale for k, g in grads.items()}
