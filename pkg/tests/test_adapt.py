"""Test-time adaptation, exact match, confidence intervals and attention entropy."""

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

import mpmath

from mapd_lab import adapt as A
from mapd_lab import mapper as mp
from mapd_lab import tasks as T

from conftest import tiny_backbone


@pytest.fixture(scope="module")
def setup():
    model = tiny_backbone()
    params = mp.init_mapper(m=3, d_in=32, d_model=8, num_heads=2, seed=5)
    tasks = [T.gen_episode("operator_induction", 2, 3, seed=s) for s in range(3)]
    pools = [T.validation_pool(t, 6, seed=s) for s, t in enumerate(tasks)]
    return model, params, tasks, pools


def test_zero_steps_returns_original(setup):
    model, params, tasks, _ = setup
    out, k = A.tta_finetune(params, model, tasks[0], A.AdaptationConfig(max_steps=0))
    assert k == 0 and out.digest() == params.digest() and out is not params


def test_empty_support_rejected(setup):
    model, params, tasks, _ = setup
    empty = tasks[0].with_support([])
    with pytest.raises(A.AdaptationError):
        A.tta_finetune(params, model, empty, A.AdaptationConfig())
    with pytest.raises(A.AdaptationError):
        A.AdaptationConfig(mode="prefix").validate()


def test_chosen_step_bounds_and_support_descent(setup):
    model, params, tasks, pools = setup
    cfg = A.AdaptationConfig(max_steps=6, lr=0.5)
    res = A.finetune_group(params, model, tasks, cfg, pools, track_queries=True)
    assert res.val_loss.shape == (7, 3) and res.query_correct.shape == (7, 3, 3)
    assert np.all((0 <= res.chosen_step) & (res.chosen_step <= 6))
    for e, k in enumerate(res.chosen_step):
        assert res.val_loss[k, e] == res.val_loss[:, e].min()
    assert np.all(res.support_loss[-1] < res.support_loss[0])


def test_group_adaptation_is_isolated_per_episode(setup):
    model, params, tasks, pools = setup
    cfg = A.AdaptationConfig(max_steps=3, lr=0.5)
    group = A.finetune_group(params, model, tasks, cfg, pools)
    before = params.digest()
    for e, (t, p) in enumerate(zip(tasks, pools)):
        alone, k = A.tta_finetune(params, model, t, cfg, p)
        assert k == group.chosen_step[e]
        for name in alone.arrays:
            assert np.allclose(alone.arrays[name], group.params.arrays[name][e], atol=1e-6)
    assert params.digest() == before


def test_icl_and_finetune_episode_evaluation(setup):
    model, params, tasks, pools = setup
    assert len(A.eval_episode(params, model, tasks[0], "icl")) == 3
    assert len(A.eval_episode(params, model, tasks[0], "finetune", A.AdaptationConfig(max_steps=2), pools[0])) == 3


def test_exact_match_ignores_trailing_terminator():
    end = T.VOCAB.end_id
    assert A.exact_match_ids([12, 13, end], [12, 13], end)
    assert A.exact_match_ids([12, 13], [12, 13, end], end)
    assert not A.exact_match_ids([12], [12, 13], end)


@pytest.mark.parametrize("c,n,expected", [(50, 100, (0.5, 0.098)), (0, 100, (0.0, 0.0)), (100, 100, (1.0, 0.0))])
def test_wald_interval(c, n, expected):
    p, half = A.binomial_ci(c, n)
    assert p == expected[0] and half == pytest.approx(expected[1], abs=5e-4)


def test_interval_errors_and_wilson():
    with pytest.raises(ValueError):
        A.binomial_ci(0, 0)
    centre, half = A.binomial_ci(0, 100, "wilson")
    assert half > 0 and centre - half <= 0 + 1e-12


def test_entropy_extremes():
    for n in (2, 5, 17):
        assert A.normalized_entropy(np.ones(n)) == pytest.approx(1.0, abs=1e-15)
        assert A.normalized_entropy(np.eye(n)[1]) == 0.0
    with pytest.raises(ValueError):
        A.normalized_entropy(np.ones(1))


def mp_entropy(a):
    mpmath.mp.dps = 50
    vals = [mpmath.mpf(float(x)) for x in a]
    s = sum(vals)
    h = -sum((v / s) * mpmath.log(v / s) for v in vals if v > 0)
    return h / mpmath.log(len(vals))


@given(hnp.arrays(np.float64, st.integers(2, 40), elements=st.floats(0, 10)))
def test_entropy_matches_high_precision_oracle(a):
    if a.sum() <= 0:
        return
    h = A.normalized_entropy(a)
    assert 0.0 <= h <= 1.0 + 1e-12
    assert abs(h - float(mp_entropy(a))) < 1e-10


def test_entropy_renormalizes_attention_mass():
    a = np.array([0.1, 0.3, 0.0, 0.2])
    assert A.normalized_entropy(a) == pytest.approx(A.normalized_entropy(a * 7), abs=1e-15)


def test_entropy_over_prompt_positions_is_bounded(setup):
    model, params, tasks, pools = setup
    for mode in A.MODES:
        h = A.attention_entropy(params, model, tasks, mode, A.AdaptationConfig(max_steps=2), pools)
        assert h.shape == (3,) and np.all((0 <= h) & (h <= 1))


def test_default_rates_keep_reference_ordering():
    for k, v in A.DEFAULT_LR.items():
        assert 0 < v <= A.REFERENCE_LR[k]
    assert A.DEFAULT_LR["mapd"] >= A.DEFAULT_LR["modelavg_pd"]
