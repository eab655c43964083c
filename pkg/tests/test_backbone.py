"""Frozen decoder: causality, attention maps, LoRA attachment, decoding, checkpoints."""

import numpy as np
import pytest

from mapd_lab import tensor as tn
from mapd_lab.backbone import (ConfigError, LoraAdapter, attach_lora, embed_tokens, forward_logits, greedy_decode,
                               load_backbone, save_backbone)
from mapd_lab.tensor import Tensor

from conftest import tiny_backbone


def embeds(model, T, seed=0):
    ids = np.random.default_rng(seed).integers(0, model.config.vocab_size, size=T)
    return embed_tokens(model, ids)


def test_logits_shape_and_attention_rows(tiny_model):
    logits, att = forward_logits(tiny_model, embeds(tiny_model, 7), want_attention=True)
    assert logits.shape == (7, tiny_model.config.vocab_size)
    assert len(att) == 1 and att[0].shape == (2, 7, 7)
    assert np.allclose(att[0].sum(-1), 1, atol=1e-6)
    assert np.all(np.triu(att[0][0], k=1) < 1e-6)


def test_causal_prefix_is_unaffected_by_later_tokens(tiny_model):
    x = embeds(tiny_model, 6)
    y = Tensor(x.data.copy())
    y.data[4:] += 1.0
    a, _ = forward_logits(tiny_model, x)
    b, _ = forward_logits(tiny_model, y)
    assert np.allclose(a.data[:4], b.data[:4], atol=1e-6)


def test_too_long_sequence_rejected(tiny_model):
    with pytest.raises(tn.ShapeError):
        forward_logits(tiny_model, embeds(tiny_model, tiny_model.config.max_seq_len + 1))


def test_weights_are_read_only(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.weights["tok_emb"][0, 0] = 1.0


def test_lora_zero_init_is_a_forward_no_op(tiny_model):
    x = embeds(tiny_model, 5)
    base, _ = forward_logits(tiny_model, x)
    lm = attach_lora(tiny_model, [LoraAdapter((0,), rank=2, alpha=8.0)])
    with_lora, _ = forward_logits(lm, x)
    assert np.array_equal(base.data, with_lora.data)
    assert lm.count_trainable() == 3 * 2 * (8 * 2)


def test_lora_gradients_reach_only_adapters(tiny_model):
    lm = attach_lora(tiny_model, [LoraAdapter((0,), matrices=("q",), rank=1)])
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in lm.params.items()}
    with tn.Tape() as tape:
        logits, _ = forward_logits(lm, embeds(tiny_model, 4), lora=leaves)
        loss = tn.sum_(logits)
    grads = tape.backward(loss)
    assert {g.name for g in grads} == set(lm.params)


def test_overlapping_adapters_rejected(tiny_model):
    with pytest.raises(ConfigError):
        attach_lora(tiny_model, [LoraAdapter((0,)), LoraAdapter((0,), matrices=("v",))])


def test_greedy_decode_ties_pick_lowest_id(tiny_model):
    calls = []

    def flat(x):
        calls.append(x.shape[0])
        v = np.zeros(tiny_model.config.vocab_size)
        v[[5, 9]] = 1.0
        return v
    out = greedy_decode(tiny_model, embeds(tiny_model, 3), 3, end_id=5, logits_fn=flat)
    assert out == [5] and calls == [3]


def test_greedy_decode_stops_at_budget(tiny_model):
    out = greedy_decode(tiny_model, embeds(tiny_model, 3), 4, end_id=-1)
    assert len(out) == 4


def test_checkpoint_round_trip(tmp_path):
    model = tiny_backbone()
    save_backbone(model, tmp_path / "bb.npz")
    back = load_backbone(tmp_path / "bb.npz")
    assert back.config == model.config
    for k in model.weights:
        assert np.array_equal(back.weights[k], model.weights[k])
