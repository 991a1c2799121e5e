"""Adam with inverse-time learning-rate decay.

The schedule is ``lr(t) = lr0 / (1 + decay * t)``, where ``t`` counts
optimizer steps by default (``decay_unit="epoch"`` counts epochs instead).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str, what: str = "gradient"):
        super().__init__(f"{what} for parameter {name!r} contains NaN or Inf")
        self.name = name


@dataclass(frozen=True)
class AdamHyper:
    lr0: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    decay: float = 0.0005
    decay_unit: str = "step"

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0.0 < self.beta1 < self.beta2 < 1.0:
            raise ValueError("need 0 < beta1 < beta2 < 1")
        if self.epsilon <= 0 or self.decay < 0:
            raise ValueError("epsilon must be positive and decay nonnegative")
        if self.decay_unit not in ("step", "epoch"):
            raise ValueError(f"decay_unit must be 'step' or 'epoch', got {self.decay_unit!r}")


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(
            0,
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
        )

    def to_entries(self) -> dict[str, np.ndarray]:
        out = {"adam/step": np.array([self.step], dtype=np.int64)}
        for k in self.m:
            out[f"adam/m/{k}"] = self.m[k]
            out[f"adam/v/{k}"] = self.v[k]
        return out

    @classmethod
    def from_entries(cls, entries: Mapping[str, np.ndarray]) -> "AdamState":
        step = int(entries["adam/step"][0])
        m = {k[len("adam/m/"):]: v.copy() for k, v in entries.items() if k.startswith("adam/m/")}
        v = {k[len("adam/v/"):]: val.copy() for k, val in entries.items() if k.startswith("adam/v/")}
        return cls(step, m, v)


def lr_at(t: int, hyper: AdamHyper) -> float:
    return hyper.lr0 / (1.0 + hyper.decay * t)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    hyper: AdamHyper,
    epoch: int = 0,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; inputs are left untouched.

    Parameters absent from ``grads`` (e.g. frozen layers) are carried over
    unchanged and their moments are not advanced.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient(name)

    t = state.step + 1
    lr = lr_at(state.step if hyper.decay_unit == "step" else epoch, hyper)
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params = dict(params)
    new_m = dict(state.m)
    new_v = dict(state.v)
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        with np.errstate(over="ignore", invalid="ignore"):
            new_p = (p - lr * (m / c1) / (np.sqrt(v / c2) + hyper.epsilon)).astype(p.dtype, copy=False)
        if not np.isfinite(new_p).all():
            raise NonFiniteGradient(name, "update")
        new_params[name] = new_p
        new_m[name] = m.astype(p.dtype, copy=False)
        new_v[name] = v.astype(p.dtype, copy=False)
    return new_params, AdamState(t, new_m, new_v)
