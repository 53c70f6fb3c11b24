import numpy as np
import pytest

from reroute.model import (
    CapacityError,
    DeltaShapeError,
    ModelConfig,
    MoEModel,
    generate,
    init_params,
    sample_token,
)
from reroute.rerouter import DeltaSet
from conftest import random_prompts, tiny_config


def identity_router_model(**kw):
    cfg = ModelConfig(vocab_size=8, d_model=4, n_layers=1, n_experts=4, k_active=2, d_ff=3, n_heads=2, max_seq=8, **kw)
    params = init_params(cfg)
    params["layers.0.router"] = np.eye(4)
    return MoEModel(cfg, params)


def test_route_example_weights():
    m = identity_router_model()
    tr = m.route_tokens(np.array([2.0, 1.0, 0.0, -1.0]), 0)
    assert tr.selected[0, 0].tolist() == [0, 1]
    assert tr.weights[0, 0] == pytest.approx([0.7310585786, 0.2689414214], abs=1e-10)
    z = np.array([2.0, 1.0, 0.0, -1.0])
    p = np.exp(z) / np.exp(z).sum()
    assert tr.probs[0, 0] == pytest.approx(p, abs=1e-15)
    assert tr.topk_probs[0, 0] == pytest.approx(p[:2], abs=1e-15)


def test_delta_flips_selection():
    m = identity_router_model()
    delta = np.array([[0.0, 0.0, 3.0, 0.0]])
    tr = m.route_tokens(np.array([2.0, 1.0, 0.0, -1.0]), 0, delta)
    assert tr.selected[0, 0].tolist() == [2, 0]
    assert np.array_equal(tr.logits, [[[2.0, 1.0, 0.0, -1.0]]])
    assert np.array_equal(tr.modified, [[[2.0, 1.0, 3.0, -1.0]]])


def test_ties_go_to_lower_index():
    m = identity_router_model()
    tr = m.route_tokens(np.array([1.0, 1.0, 1.0, 1.0]), 0)
    assert tr.selected[0, 0].tolist() == [0, 1]
    assert tr.weights[0, 0].tolist() == [0.5, 0.5]


def test_top1_weight_is_one():
    cfg = tiny_config(k_active=1)
    m = MoEModel(cfg)
    _, tr = m.forward([1, 2, 3])
    assert np.array_equal(tr.weights, np.ones_like(tr.weights))


def test_shared_expert_added_unweighted():
    cfg = tiny_config(n_shared=1)
    params = init_params(cfg)
    m = MoEModel(cfg, params)
    x = np.random.default_rng(0).normal(size=(3, cfg.d_model))
    out, _ = m.moe_layer_forward(x, 0)
    zeroed = dict(params)
    for k in ("sw1", "sb1", "sw2", "sb2"):
        zeroed[f"layers.0.{k}"] = np.zeros_like(params[f"layers.0.{k}"])
    routed, _ = MoEModel(cfg, zeroed).moe_layer_forward(x, 0)
    a = x @ params["layers.0.sw1"][0] + params["layers.0.sb1"][0]
    shared = (a / (1 + np.exp(-a))) @ params["layers.0.sw2"][0] + params["layers.0.sb2"][0]
    assert np.allclose(out, routed + shared, atol=1e-12)


def test_zero_delta_bit_identical(tiny_model):
    ctx = np.arange(1, 12)
    a, ta = tiny_model.forward(ctx)
    b, tb = tiny_model.forward(ctx, DeltaSet.for_model(tiny_model))
    assert np.array_equal(a, b) and np.array_equal(ta.selected, tb.selected)


def test_causality(tiny_model):
    ctx = np.array([5, 9, 2, 7, 7, 1])
    a, _ = tiny_model.forward(ctx)
    b, _ = tiny_model.forward(np.concatenate([ctx[:4], [30, 31]]))
    assert np.array_equal(a[:4], b[:4])


def test_decoder_matches_full_forward(tiny_model):
    rng = np.random.default_rng(2)
    deltas = rng.normal(size=(2, 4))
    ctx = rng.integers(0, 50, 10)
    full, tr = tiny_model.forward(ctx, deltas)
    dec = tiny_model.decoder(deltas)
    logits, t0 = dec.prefill(ctx[:6])
    assert np.allclose(logits, full[5], atol=1e-12)
    for i in range(6, 10):
        logits, ti = dec.step(int(ctx[i]))
        assert np.allclose(logits, full[i], atol=1e-12)
        assert np.array_equal(ti.selected[0], tr.selected[i])


def test_capacity_and_shape_errors(tiny_model):
    with pytest.raises(CapacityError):
        tiny_model.forward(np.zeros(65, dtype=int))
    with pytest.raises(DeltaShapeError):
        tiny_model.forward([1, 2], np.zeros((2, 5)))
    with pytest.raises(IndexError):
        tiny_model.forward([1, 99])
    with pytest.raises(ValueError):
        ModelConfig(n_experts=2, k_active=3)


def test_params_read_only(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.params["head"][0, 0] = 1.0


def test_greedy_sampling_and_ties():
    rng = np.random.default_rng(0)
    assert sample_token([0.0, 3.0, 3.0], 0.0, rng) == 1


def test_temperature_sampling_frequencies():
    rng = np.random.default_rng(0)
    logits = np.log([0.2, 0.5, 0.3])
    draws = np.bincount([sample_token(logits, 1.0, rng) for _ in range(20000)], minlength=3) / 20000
    assert np.allclose(draws, [0.2, 0.5, 0.3], atol=0.015)


def test_generate_budget_and_determinism(tiny_model):
    prompt = [3, 4, 5]
    a, tr = generate(tiny_model, prompt, 10, temperature=0.8, rng=np.random.default_rng(1))
    b, _ = generate(tiny_model, prompt, 10, temperature=0.8, rng=np.random.default_rng(1))
    assert a == b and len(a) == 10 and tr.n_tokens == 10
    long_prompt = list(random_prompts(1, 60, 0)[0])
    out, _ = generate(tiny_model, long_prompt, 50)
    assert len(out) == 64 - 60 + 1


def test_generate_stops_at_eos(tiny_model):
    out, _ = generate(tiny_model, [1, 2], 30)
    eos = out[2]
    stopped, _ = generate(tiny_model, [1, 2], 30, eos=eos)
    assert stopped[-1] == eos and len(stopped) <= 3
