"""Closed-form FLOPs for the backbone and mapper, and FLOPs-matched curves.

Counts are ``2 x multiply-accumulates`` of every matrix product; softmax,
normalization and elementwise work are ignored. A backward pass is counted
as twice the forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .backbone import BackboneConfig
from .mapper import MapperConfig


def backbone_forward_flops(cfg: BackboneConfig, T: int) -> int:
    d, f, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    per_layer = (2 * 3 * T * d * d      # q, k, v projections
                 + 2 * T * T * d        # scores, summed over heads
                 + 2 * T * T * d        # attention-weighted values
                 + 2 * T * d * d        # output projection
                 + 2 * 2 * T * d * f)   # feed-forward
    return cfg.num_layers * per_layer + 2 * T * d * V


def mapper_forward_flops(cfg: MapperConfig, n_patches: int) -> int:
    m, di, dm, n = cfg.m, cfg.d_in, cfg.d_model, n_patches
    if cfg.kind == "sp_att":
        return 2 * (m * di * dm + 2 * (m + n) * di * dm + 2 * m * (m + n) * dm + m * dm * dm)
    if cfg.kind == "att":
        return 2 * (3 * n * di * dm + 2 * n * n * dm + n * dm * dm)
    return 2 * (n * di * dm + n * dm * dm)


def qa_length(rows: int, question_len: int, answer_len: int) -> int:
    """``[image] Question: q Answer: a <end>``."""
    return rows + 1 + question_len + 1 + answer_len + 1


@dataclass
class FlopsEntry:
    mode: str
    shots: int
    steps: int
    forward: int
    backward: int

    @property
    def total(self) -> int:
        return self.forward + self.backward

    @property
    def tflops(self) -> float:
        return self.total / 1e12


def flops_count(bcfg: BackboneConfig, mcfg: MapperConfig, mode: str, shots: int, steps: int,
                answer_len: int, question_len: int = 1, n_patches: int = 8, n_support: int | None = None) -> FlopsEntry:
    """Cost of answering one query.

    ``icl``: one forward pass over the full context. ``finetune``: ``steps``
    forward+backward passes over the support set, then one forward pass over
    the query. ``n_support`` overrides the number of support examples (two
    per shot for 2-way binding).
    """
    k = shots if n_support is None else n_support
    rows = mcfg.prompt_rows(n_patches)
    T1 = qa_length(rows, question_len, answer_len)
    img = mapper_forward_flops(mcfg, n_patches)
    if mode == "icl":
        fwd = backbone_forward_flops(bcfg, (k + 1) * T1) + (k + 1) * img
        return FlopsEntry(mode, shots, 0, fwd, 0)
    if mode != "finetune":
        raise ValueError(f"unknown mode {mode!r}")
    support_fwd = k * (backbone_forward_flops(bcfg, T1) + img)
    query_fwd = backbone_forward_flops(bcfg, T1) + img
    return FlopsEntry(mode, shots, steps, steps * support_fwd + query_fwd, steps * 2 * support_fwd)


@dataclass
class CurvePoint:
    budget: float
    accuracy: float
    shots: int
    steps: int
    flops: float


@dataclass
class Curves:
    points: dict = field(default_factory=dict)   # mode -> list[CurvePoint]
    notes: list = field(default_factory=list)


def flops_matched_sweep(results: Sequence[dict], budget_grid: Sequence[float]) -> Curves:
    """Best accuracy per mode within each budget.

    ``results`` rows carry ``mode, shots, steps, flops, accuracy``. Budgets no
    configuration of a mode fits into are skipped with a note.
    """
    curves = Curves()
    for mode in sorted({r["mode"] for r in results}):
        rows = [r for r in results if r["mode"] == mode]
        pts = []
        for b in sorted(budget_grid):
            feasible = [r for r in rows if r["flops"] <= b]
            if not feasible:
                curves.notes.append(f"{mode}: no configuration fits budget {b:.3g} FLOPs")
                continue
            best = max(feasible, key=lambda r: (r["accuracy"], -r["flops"]))
            pts.append(CurvePoint(b, best["accuracy"], best["shots"], best["steps"], best["flops"]))
        curves.points[mode] = pts
    return curves
