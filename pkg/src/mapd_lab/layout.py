"""Packing of prompt rows and token ids into padded index matrices.

A sequence is a list of chunks. Each chunk is a run of either token ids or
rows of a prompt table, and may be marked as a prediction target. Packed
indices address one combined embedding table: ids below ``vocab_size`` are
token embeddings, ids from ``vocab_size`` on are distilled prompt rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tasks import VOCAB


class CapacityError(ValueError):
    pass


@dataclass
class Chunk:
    ids: np.ndarray
    prompt: bool = False
    target: bool = False
    support_text: bool = False  # may be dropped when a context overflows


@dataclass
class SeqBatch:
    index: np.ndarray        # [..., T] rows of the combined table
    targets: np.ndarray      # [..., T] next token at each position (pad where none)
    loss_mask: np.ndarray    # [..., T] 1 where position t predicts a target token
    prompt_pos: np.ndarray   # [..., T] True at prompt-derived positions
    lengths: np.ndarray      # [...]

    @property
    def T(self) -> int:
        return self.index.shape[-1]


def qa_chunks(prompt_rows: np.ndarray | None, question: Sequence[int], answer: Sequence[int],
              target: bool = True, support: bool = False) -> list[Chunk]:
    """``[image] Question: q Answer: a <end>`` with the answer as target."""
    q = [VOCAB.id(VOCAB.QUESTION), *question, VOCAB.id(VOCAB.ANSWER)]
    a = [*answer, VOCAB.end_id]
    out = []
    if prompt_rows is not None:
        out.append(Chunk(np.asarray(prompt_rows, dtype=np.int64), prompt=True))
    out.append(Chunk(np.asarray(q, dtype=np.int64), support_text=support))
    out.append(Chunk(np.asarray(a, dtype=np.int64), target=target, support_text=support))
    return out


def token_region(words_ids: Sequence[int], length: int) -> Chunk:
    """Text stand-in for an image: ids padded to ``length`` (warm-up only)."""
    ids = list(words_ids)[:length]
    ids += [VOCAB.pad_id] * (length - len(ids))
    return Chunk(np.asarray(ids, dtype=np.int64))


def sequence_length(chunks: Sequence[Chunk]) -> int:
    return sum(len(c.ids) for c in chunks)


def fit_context(chunks: list[Chunk], max_len: int) -> list[Chunk]:
    """Drop support text chunks, earliest first, until the context fits.

    Prompt rows are never dropped; if they alone overflow, a
    :class:`CapacityError` is raised.
    """
    chunks = list(chunks)
    while sequence_length(chunks) > max_len:
        for i, c in enumerate(chunks):
            if c.support_text:
                del chunks[i]
                break
        else:
            raise CapacityError(f"context of {sequence_length(chunks)} positions exceeds max_seq_len={max_len}")
    return chunks


def pack(sequences: Sequence[Sequence[Chunk]], shape: tuple | None = None, pad_to: int | None = None) -> SeqBatch:
    """Right-pad sequences into a batch; ``shape`` reshapes the leading axis."""
    T = max(sequence_length(s) for s in sequences)
    if pad_to is not None:
        T = max(T, pad_to)
    B = len(sequences)
    index = np.full((B, T), VOCAB.pad_id, dtype=np.int64)
    targets = np.full((B, T), VOCAB.pad_id, dtype=np.int64)
    tmask = np.zeros((B, T), dtype=bool)
    prompt = np.zeros((B, T), dtype=bool)
    lengths = np.zeros(B, dtype=np.int64)
    for b, seq in enumerate(sequences):
        t = 0
        for c in seq:
            n = len(c.ids)
            index[b, t:t + n] = c.ids
            prompt[b, t:t + n] = c.prompt
            tmask[b, t:t + n] = c.target
            t += n
        lengths[b] = t
        targets[b, :t - 1] = np.where(prompt[b, 1:t], VOCAB.pad_id, index[b, 1:t])
    loss_mask = np.zeros((B, T))
    loss_mask[:, :-1] = tmask[:, 1:]
    batch = SeqBatch(index, targets, loss_mask, prompt, lengths)
    if shape is not None:
        batch = SeqBatch(*(a.reshape(tuple(shape) + a.shape[1:]) for a in
                           (batch.index, batch.targets, batch.loss_mask, batch.prompt_pos)),
                         batch.lengths.reshape(shape))
    return batch
