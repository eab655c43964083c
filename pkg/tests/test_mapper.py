"""Attention-mapper: shapes, parameter count, permutation invariance, attention rows."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mapd_lab import mapper as mp
from mapd_lab import tensor as tn


def test_reference_scale_parameter_count():
    # m=256, d_in=1024, d_model=3584
    assert mp.reference_scale_count() == 24_117_248


@given(st.integers(1, 6), st.integers(1, 5), st.sampled_from([2, 4]), st.integers(1, 3))
def test_count_matches_formula(m, d_in, heads, mult):
    d_model = heads * mult * 2
    p = mp.init_mapper(m, d_in, d_model, heads, seed=1)
    assert mp.count_trainable(p) == mp.count_formula(m, d_in, d_model)
    assert mp.count_trainable(p.stack(3)) == mp.count_formula(m, d_in, d_model)


@given(st.integers(0, 12), st.integers(0, 2**16))
def test_output_shape_for_any_patch_count(n, seed):
    p = mp.init_mapper(m=4, d_in=6, d_model=8, num_heads=2, seed=seed % 7)
    z = np.random.default_rng(seed).normal(size=(n, 6)).astype(np.float32)
    assert mp.map_features(p, z).shape == (4, 8)


@given(st.integers(1, 10), st.integers(0, 2**16))
def test_exact_permutation_invariance(n, seed):
    rng = np.random.default_rng(seed)
    p = mp.init_mapper(m=3, d_in=5, d_model=8, num_heads=2, seed=2)
    z = rng.normal(size=(n, 5)).astype(np.float32)
    a = mp.map_features(p, z).data
    b = mp.map_features(p, z[rng.permutation(n)]).data
    assert np.array_equal(a, b)


@given(st.integers(1, 10), st.integers(0, 2**16))
def test_attention_rows_sum_to_one(n, seed):
    p = mp.init_mapper(m=5, d_in=4, d_model=8, num_heads=4, seed=3)
    z = np.random.default_rng(seed).normal(size=(n, 4)) * 5
    _, att = mp.map_features(p, z.astype(np.float32), return_attention=True)
    assert att.shape == (4, 5, 5 + n)
    assert np.abs(att.sum(-1) - 1).max() < 1e-6


def test_queries_come_from_prompts_only():
    p = mp.init_mapper(m=2, d_in=3, d_model=4, num_heads=1, seed=0)
    z = np.zeros((0, 3), dtype=np.float32)
    # without patches each prompt attends over the prompts alone
    _, att = mp.map_features(p, z, return_attention=True)
    assert att.shape == (1, 2, 2)


def test_xavier_bounds():
    w = mp.xavier_uniform(np.random.default_rng(0), (30, 50))
    assert np.abs(w).max() <= np.sqrt(6 / 80)


def test_stacked_slices_match_single_parameters():
    p = mp.init_mapper(m=3, d_in=4, d_model=8, num_heads=2, seed=4)
    z = np.random.default_rng(1).normal(size=(2, 5, 6, 4)).astype(np.float32)
    stacked = p.stack(2)
    stacked.arrays["P"][1] += 0.5
    out = mp.map_features(stacked, z).data
    for e in range(2):
        assert np.allclose(out[e], mp.map_features(stacked.select(e), z[e]).data, atol=1e-6)


def test_width_mismatch_is_a_shape_error():
    p = mp.init_mapper(m=2, d_in=4, d_model=8, num_heads=2)
    with pytest.raises(tn.ShapeError):
        mp.map_features(p, np.zeros((3, 5), dtype=np.float32))


def test_heads_must_divide_width():
    with pytest.raises(mp.MapperConfigError):
        mp.init_mapper(m=2, d_in=4, d_model=6, num_heads=4)


@pytest.mark.parametrize("kind,rows", [("att", 5), ("mlp", 5), ("sp_mlp", 7), ("sp_att", 2)])
def test_ablation_kinds_rows(kind, rows):
    p = mp.init_mapper(m=2, d_in=4, d_model=8, num_heads=2, kind=kind)
    out = mp.map_features(p, np.ones((5, 4), dtype=np.float32))
    assert out.shape == (rows, 8) == (p.config.prompt_rows(5), 8)
