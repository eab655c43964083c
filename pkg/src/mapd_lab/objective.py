"""Episode batches and the answer likelihood shared by training and evaluation.

Groups of episodes are processed together: features have shape
``[G, N, n_patches, d_in]`` and sequences ``[G, S, T]``. Mapper parameters
are either shared or stacked with one slice per group, in which case the
summed loss yields each group's gradient in its own slice.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tn
from .backbone import FrozenBackbone, LoraModel, forward_logits
from .layout import SeqBatch, fit_context, pack, qa_chunks
from .mapper import MapperParams, map_features
from .tensor import Tensor


@dataclass
class EpisodeBatch:
    z: np.ndarray          # [G, N, n_patches, d_in]
    seqs: SeqBatch         # [G, S, T]
    rows: int              # distilled rows per image
    n_images: int

    @property
    def groups(self) -> int:
        return self.z.shape[0]


def _backbone(model) -> FrozenBackbone:
    return model.backbone if isinstance(model, LoraModel) else model


def _image_rows(vocab_size: int, g: int, n: int, N: int, rows: int) -> np.ndarray:
    base = vocab_size + (g * N + n) * rows
    return np.arange(base, base + rows)


def qa_batch(groups: Sequence[Sequence], rows: int, vocab_size: int, pad_to: int | None = None) -> EpisodeBatch:
    """One ``[image] Question: q Answer: a <end>`` sequence per example."""
    G, N = len(groups), max(len(g) for g in groups)
    if any(len(g) != N for g in groups):
        raise ValueError("all groups must hold the same number of examples")
    z = np.stack([np.stack([e.z_v for e in g]) for g in groups])
    seqs = [qa_chunks(_image_rows(vocab_size, gi, n, N, rows), e.question, e.answer)
            for gi, g in enumerate(groups) for n, e in enumerate(g)]
    return EpisodeBatch(z, pack(seqs, shape=(G, N), pad_to=pad_to), rows, N)


def icl_chunks(support_rows, support, query_rows, query) -> list:
    chunks = []
    for r, e in zip(support_rows, support):
        chunks += qa_chunks(r, e.question, e.answer, target=False, support=True)
    return chunks + qa_chunks(query_rows, query.question, query.answer)


def icl_batch(tasks: Sequence, rows: int, vocab_size: int, max_len: int, queries: Sequence[Sequence] | None = None) -> EpisodeBatch:
    """Context of every support example followed by one query per sequence.

    Images per group are the support examples then the queries, so
    ``N = shots + n_query``. Support text is truncated if needed; prompt rows
    never are.
    """
    queries = queries if queries is not None else [t.query for t in tasks]
    G = len(tasks)
    k, Q = len(tasks[0].support), len(queries[0])
    N = k + Q
    z = np.stack([np.stack([e.z_v for e in list(t.support) + list(q)]) for t, q in zip(tasks, queries)])
    seqs = []
    for g, (t, qs) in enumerate(zip(tasks, queries)):
        srows = [_image_rows(vocab_size, g, n, N, rows) for n in range(k)]
        for j, qe in enumerate(qs):
            chunks = icl_chunks(srows, t.support, _image_rows(vocab_size, g, k + j, N, rows), qe)
            seqs.append(fit_context(chunks, max_len))
    return EpisodeBatch(z, pack(seqs, shape=(G, Q)), rows, N)


def embeddings(model, mapper: MapperParams, tensors: dict | None, batch: EpisodeBatch, dtype=np.float32) -> Tensor:
    bb = _backbone(model)
    H = map_features(mapper, batch.z, tensors)
    if H.shape[-2] != batch.rows:
        raise tn.ShapeError(f"mapper produced {H.shape[-2]} rows, layout expects {batch.rows}")
    flat = tn.reshape(H, (-1, H.shape[-1]))
    table = tn.concat([bb.leaves(dtype)["tok_emb"], flat], axis=0)
    return tn.gather_rows(table, batch.seqs.index)


def group_weights(mask: np.ndarray) -> np.ndarray:
    """Per-token weights making the cross-entropy ``mean_g(L_g)``."""
    per = mask.reshape(mask.shape[0], -1).sum(axis=1)
    if np.any(per == 0):
        raise ValueError("every group needs at least one answer token")
    return mask / per.reshape((-1,) + (1,) * (mask.ndim - 1))


@dataclass
class Outcome:
    loss: Tensor
    correct: np.ndarray | None = None   # [G, S] exact match under teacher forcing
    group_loss: np.ndarray | None = None
    attentions: list | None = None
    logits: Tensor | None = None


def episode_loss(model, mapper: MapperParams, tensors: dict | None, batch: EpisodeBatch,
                 lora: dict | None = None, want_correct: bool = False, want_attention: bool = False) -> Outcome:
    """Sum over groups of the mean answer-token NLL of each group."""
    dtype = next(iter(tensors.values())).dtype if tensors else next(iter(mapper.arrays.values())).dtype
    emb = embeddings(model, mapper, tensors, batch, dtype)
    logits, att = forward_logits(model, emb, lora=lora, want_attention=want_attention)
    mask = batch.seqs.loss_mask
    w = group_weights(mask)
    G = batch.groups
    loss = tn.scale(tn.cross_entropy_logits(logits, batch.seqs.targets, w), G)
    out = Outcome(loss, attentions=att, logits=logits)
    if want_correct:
        out.correct = exact_match(logits.data, batch.seqs)
        out.group_loss = token_nll(logits.data, batch.seqs, per_group=True)
    return out


def token_nll(logits: np.ndarray, seqs: SeqBatch, per_group: bool = True) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - np.take_along_axis(z, seqs.targets[..., None], axis=-1)[..., 0]
    m = seqs.loss_mask
    axes = tuple(range(1, m.ndim)) if per_group else None
    return (nll * m).sum(axis=axes) / m.sum(axis=axes)


def exact_match(logits: np.ndarray, seqs: SeqBatch) -> np.ndarray:
    """Teacher-forced exact match, including the terminator.

    Greedy decoding reproduces the answer if and only if every answer
    position's argmax equals the target, so this equals exact match of the
    greedy output.
    """
    pred = np.argmax(logits, axis=-1)
    ok = (pred == seqs.targets) | (seqs.loss_mask == 0)
    return ok.all(axis=-1)
