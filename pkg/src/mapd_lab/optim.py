"""First-order optimizers over dicts of numpy arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Adam:
    lr: float = 1e-3
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> dict:
        """Return updated copies of ``params``; keys absent from ``grads`` are kept."""
        self.t += 1
        out = dict(params)
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            p = params[k]
            m = self.m.get(k, np.zeros_like(p))
            v = self.v.get(k, np.zeros_like(p))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            if self.lr == 0:
                continue
            out[k] = (p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        return out

    def state(self) -> dict:
        d = {"t": np.asarray(self.t)}
        d.update({f"m/{k}": v for k, v in self.m.items()})
        d.update({f"v/{k}": v for k, v in self.v.items()})
        return d

    def load(self, state: dict):
        self.t = int(state["t"])
        self.m = {k[2:]: v for k, v in state.items() if k.startswith("m/")}
        self.v = {k[2:]: v for k, v in state.items() if k.startswith("v/")}


@dataclass
class SGD:
    lr: float = 1e-3

    def step(self, params: dict, grads: dict) -> dict:
        out = dict(params)
        if self.lr == 0:
            return out
        for k, g in grads.items():
            out[k] = (params[k] - self.lr * g).astype(params[k].dtype)
        return out

    def state(self) -> dict:
        return {}

    def load(self, state: dict):
        pass


def make_optimizer(kind: str, lr: float):
    if kind == "adam":
        return Adam(lr=lr)
    if kind == "sgd":
        return SGD(lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}; expected 'adam' or 'sgd'")
