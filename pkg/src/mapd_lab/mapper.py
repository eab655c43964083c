"""Attention-mapper: soft prompts plus one multi-head attention block.

``C = concat(P, Z_v)``; queries come from the prompt rows, keys and values
from all rows, and the ``m`` prompt outputs (after the output projection)
are the distilled prompts handed to the backbone. Connector variants for the
ablation (``mlp``, ``sp_mlp``, ``att``) share the same interface.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tn
from .tensor import Tensor

MAPPER_KINDS = ("sp_att", "att", "mlp", "sp_mlp")


class MapperConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MapperConfig:
    m: int = 16
    d_in: int = 32
    d_model: int = 64
    num_heads: int = 4
    kind: str = "sp_att"
    seed: int = 0

    def validate(self):
        if self.kind not in MAPPER_KINDS:
            raise MapperConfigError(f"unknown mapper kind {self.kind!r}; expected one of {MAPPER_KINDS}")
        if self.d_model % self.num_heads:
            raise MapperConfigError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        if self.kind.startswith("sp_") and self.m < 1:
            raise MapperConfigError("soft-prompt mappers need m >= 1")

    def prompt_rows(self, n_patches: int) -> int:
        """Number of distilled rows produced for an image with ``n_patches`` patches."""
        return {"sp_att": self.m, "att": n_patches, "mlp": n_patches, "sp_mlp": self.m + n_patches}[self.kind]


def xavier_uniform(rng, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, shape)


@dataclass
class MapperParams:
    """Trainable mapper state; ``arrays`` may carry a leading episode axis."""

    config: MapperConfig
    arrays: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.config.m

    @property
    def num_heads(self) -> int:
        return self.config.num_heads

    @property
    def stacked(self) -> bool:
        return self.arrays[next(iter(self.arrays))].ndim == 3

    def copy(self) -> "MapperParams":
        return replace(self, arrays={k: v.copy() for k, v in self.arrays.items()})

    def stack(self, n: int) -> "MapperParams":
        return replace(self, arrays={k: np.repeat(v[None], n, axis=0) for k, v in self.arrays.items()})

    def select(self, i: int) -> "MapperParams":
        return replace(self, arrays={k: v[i].copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> "MapperParams":
        return replace(self, arrays={k: v.astype(dtype) for k, v in self.arrays.items()})

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.arrays):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.arrays[k]).tobytes())
        return h.hexdigest()


def init_mapper(m: int = 16, d_in: int = 32, d_model: int = 64, num_heads: int = 4, seed: int = 0,
                kind: str = "sp_att", dtype=np.float32) -> MapperParams:
    cfg = MapperConfig(m, d_in, d_model, num_heads, kind, seed)
    cfg.validate()
    rng = np.random.default_rng([seed, 21])
    a = {}
    if kind == "sp_att":
        a["P"] = xavier_uniform(rng, (m, d_in))
    if kind in ("sp_att", "att"):
        for n in ("W_q", "W_k", "W_v"):
            a[n] = xavier_uniform(rng, (d_in, d_model))
        a["W_o"] = xavier_uniform(rng, (d_model, d_model))
    else:
        if kind == "sp_mlp":
            a["P"] = xavier_uniform(rng, (m, d_model))
        a["W_1"] = xavier_uniform(rng, (d_in, d_model))
        a["b_1"] = np.zeros((1, d_model))
        a["W_2"] = xavier_uniform(rng, (d_model, d_model))
        a["b_2"] = np.zeros((1, d_model))
    return MapperParams(cfg, {k: v.astype(dtype) for k, v in a.items()})


def count_trainable(params: MapperParams) -> int:
    n = sum(v.size for v in params.arrays.values())
    return n // params.arrays[next(iter(params.arrays))].shape[0] if params.stacked else n


def count_formula(m: int, d_in: int, d_model: int) -> int:
    """Closed-form parameter count of the soft-prompt attention mapper."""
    return m * d_in + 3 * d_in * d_model + d_model * d_model


def canonical_rows(z: np.ndarray) -> np.ndarray:
    """Sort the patch rows of every image lexicographically.

    Attention over a set is permutation invariant in exact arithmetic, but
    floating-point summation order is not; a canonical row order makes the
    output bit-identical under any patch permutation.
    """
    if z.shape[-2] <= 1:
        return z
    lead, (n, d) = z.shape[:-2], z.shape[-2:]
    rows = z.reshape(-1, d)
    item = np.repeat(np.arange(rows.shape[0] // n), n)
    order = np.lexsort([rows[:, c] for c in reversed(range(d))] + [item])
    return rows[order].reshape(z.shape)


def _lift(w: Tensor, lead: int) -> Tensor:
    # stacked weights [E, a, b] broadcast against inputs [E, N, ..., rows, a]
    if w.ndim == 2:
        return w
    return tn.reshape(w, (w.shape[0],) + (1,) * (lead - 1) + w.shape[1:])


def _heads(t: Tensor, H: int) -> Tensor:
    return tn.swapaxes(tn.reshape(t, t.shape[:-1] + (H, t.shape[-1] // H)), -2, -3)


def _merge(t: Tensor) -> Tensor:
    t = tn.swapaxes(t, -2, -3)
    return tn.reshape(t, t.shape[:-2] + (t.shape[-2] * t.shape[-1],))


def map_features(params, z_v, tensors: dict | None = None, return_attention: bool = False):
    """Distilled prompts ``H_p`` for features ``z_v[..., n_patches, d_in]``.

    ``params`` is a :class:`MapperParams`; ``tensors`` optionally supplies
    the leaves to differentiate through (same keys as ``params.arrays``). With
    stacked params of leading size E, ``z_v`` must have shape
    ``[E, ..., n_patches, d_in]``.
    """
    cfg = params.config
    W = tensors if tensors is not None else {k: Tensor(v) for k, v in params.arrays.items()}
    dtype = W[next(iter(W))].dtype
    z = z_v.data if isinstance(z_v, Tensor) else np.asarray(z_v)
    if z.shape[-1] != cfg.d_in:
        raise tn.ShapeError(f"features have width {z.shape[-1]}, mapper expects d_in={cfg.d_in}")
    stacked = W[next(iter(W))].ndim == 3
    E = W[next(iter(W))].shape[0] if stacked else None
    single = z.ndim == 2
    squeeze_group = stacked and z.ndim == 3
    if single:
        z = z[None] if not stacked else np.broadcast_to(z, (E, 1) + z.shape)
    elif squeeze_group:
        z = z[:, None]
    lead = z.ndim - 2
    H = cfg.num_heads
    att = None
    if cfg.kind in ("sp_att", "att"):
        z = canonical_rows(z).astype(dtype, copy=False)
        Z = Tensor(z)
        Wq, Wk, Wv, Wo = (_lift(W[n], lead) for n in ("W_q", "W_k", "W_v", "W_o"))
        if cfg.kind == "sp_att":
            P = _lift(W["P"], lead)
            P = tn.broadcast_to(P, z.shape[:-2] + P.shape[-2:])
            C = tn.concat([P, Z], axis=-2) if z.shape[-2] else P
            queries = P
        else:
            C = queries = Z
        q, k, v = _heads(queries @ Wq, H), _heads(C @ Wk, H), _heads(C @ Wv, H)
        dh = cfg.d_model // H
        att_t = tn.softmax(tn.scale(q @ tn.swapaxes(k, -1, -2), 1.0 / math.sqrt(dh)), axis=-1)
        att = att_t.data
        out = _merge(att_t @ v) @ Wo
    else:
        Z = Tensor(z.astype(dtype, copy=False))
        h = tn.gelu(Z @ _lift(W["W_1"], lead) + _lift(W["b_1"], lead))
        out = h @ _lift(W["W_2"], lead) + _lift(W["b_2"], lead)
        if cfg.kind == "sp_mlp":
            P = _lift(W["P"], lead)
            out = tn.concat([tn.broadcast_to(P, z.shape[:-2] + P.shape[-2:]), out], axis=-2)
    if single and not stacked:
        out = tn.reshape(out, out.shape[-2:])
        if att is not None:
            att = att.reshape(att.shape[-3:])
    elif single or squeeze_group:
        out = tn.reshape(out, (out.shape[0],) + out.shape[2:])
    return (out, att) if return_attention else out


def leaves(params: MapperParams, trainable: bool = True, dtype=None) -> dict:
    arrays = params.arrays if dtype is None else params.astype(dtype).arrays
    return {k: Tensor(v, requires_grad=trainable, name=k) for k, v in arrays.items()}


def reference_scale_count() -> int:
    return count_formula(256, 1024, 3584)
