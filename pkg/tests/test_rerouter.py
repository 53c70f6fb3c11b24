import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reroute.model import MoEModel, generate
from reroute.rerouter import (
    AdamState,
    ConfigError,
    DeltaSet,
    EmptyContextError,
    OptimizationAborted,
    SessionConfig,
    SessionLog,
    adam_step,
    confidence_profile,
    layer_confidence,
    n_selected,
    optimize_deltas,
    run_session,
    select_layers,
    token_confidence,
)
from conftest import tiny_config


def test_token_confidence_example():
    assert token_confidence([0.5, 0.25]) == pytest.approx(1.0397207708, abs=1e-10)
    assert token_confidence([1.0, 1.0]) == 0.0
    assert token_confidence([0.0, 1.0]) == pytest.approx(-math.log(1e-12) / 2)


@given(st.lists(st.floats(1e-6, 1.0), min_size=1, max_size=6))
def test_token_confidence_scalar_oracle(p):
    expect = -math.fsum(math.log(x) for x in p) / len(p)
    assert abs(token_confidence(p) - expect) < 1e-12


def test_layer_confidence_mean_and_empty():
    assert layer_confidence([[1.0, 2.0], [3.0, 4.0]]).tolist() == [2.0, 3.0]
    with pytest.raises(EmptyContextError):
        layer_confidence(np.zeros((0, 3)))


@pytest.mark.parametrize("strategy,want", [("hard", (1, 2)), ("reverse", (0, 3)), ("last_k", (2, 3)), ("all", (0, 1, 2, 3))])
def test_select_layers_examples(strategy, want):
    assert select_layers([0.2, 0.9, 0.8, 0.1], strategy, 0.5).selected == want


def test_select_layers_soft_and_random():
    prof = select_layers([1.0, 3.0], "soft")
    assert prof.weights.tolist() == [0.25, 0.75] and prof.scale(1) == 0.75
    assert select_layers([0.0, 0.0], "soft").weights.tolist() == [0.5, 0.5]
    r = select_layers(np.zeros(6), "random", 0.5, np.random.default_rng(0))
    assert len(r.selected) == 3 and r.scale(r.selected[0]) == 1.0
    assert select_layers([0.2, 0.1], "hard", 0.5).scale(1) is None
    with pytest.raises(ConfigError):
        select_layers([1.0], "bogus")


def test_n_selected_rounding():
    assert n_selected(0.3, 10) == 3
    assert n_selected(0.5, 3) == 2
    assert n_selected(0.01, 4) == 1
    with pytest.raises(ConfigError):
        n_selected(0.0, 4)


def test_adam_first_step():
    new, st_ = adam_step(np.zeros(1), np.array([2.5]), AdamState(np.zeros(1), np.zeros(1), 0), 0.05, 1e-8, 1e-5)
    assert new[0] == pytest.approx(-0.05 * 2.5 / (2.5 + 1e-5), rel=1e-12)
    assert new[0] == pytest.approx(-0.0499998, abs=1e-7)
    assert st_.step == 1


def test_adam_zero_scale_is_noop_and_nonfinite_aborts():
    s = AdamState(np.ones(2), np.ones(2), 3)
    d = np.array([0.1, 0.2])
    new, s2 = adam_step(d, np.ones(2), s, 0.05, 0.0, 1e-5, lr_scale=0.0)
    assert new is d and s2 is s
    with pytest.raises(OptimizationAborted):
        adam_step(d, np.array([np.nan, 0.0]), s, 0.05, 0.0, 1e-5)


def test_confidence_profile_sign(tiny_model):
    _, tr = tiny_model.forward(np.arange(1, 9))
    a = confidence_profile(tr, "hard", 0.5)
    b = confidence_profile(tr, "hard", 0.5, confidence_sign="negated")
    assert np.allclose(a.layer_conf, -b.layer_conf)
    assert set(a.selected) | set(b.selected) == {0, 1}


# -- phase 1 -----------------------------------------------------------------------


@pytest.fixture
def model4():
    return MoEModel(tiny_config(n_layers=4, rng_seed=11))


def test_optimize_does_not_mutate_input(model4):
    d = DeltaSet.for_model(model4)
    res = optimize_deltas(model4, np.arange(1, 15), d, SessionConfig(opt_steps=2))
    assert not d.values.any() and res.deltas.values.any()
    assert res.forward_passes == 2 and res.backward_passes == 2 and len(res.losses) == 2


@pytest.mark.parametrize("strategy", ["hard", "random", "reverse", "last_k"])
def test_unselected_layers_untouched(model4, strategy):
    res = optimize_deltas(model4, np.arange(1, 15), DeltaSet.for_model(model4),
                          SessionConfig(strategy=strategy, opt_steps=5), rng=np.random.default_rng(0))
    sel = set(res.profile.selected)
    for l in range(4):
        moved = res.deltas.values[l].any()
        assert moved == (l in sel)
        if l not in sel:
            assert not res.deltas.m[l].any() and res.deltas.steps[l] == 0


def test_soft_lr_scaling_consistency(model4):
    ctx = np.arange(1, 15)
    one = SessionConfig(opt_steps=1, weight_decay=0.0)
    soft = optimize_deltas(model4, ctx, DeltaSet.for_model(model4), one)
    full = optimize_deltas(model4, ctx, DeltaSet.for_model(model4), SessionConfig(opt_steps=1, weight_decay=0.0, strategy="all"))
    w = soft.profile.weights
    assert w.sum() == pytest.approx(1.0)
    for l in range(4):
        assert np.allclose(soft.deltas.values[l], w[l] * full.deltas.values[l], rtol=1e-12, atol=1e-15)


def test_gradient_scaling_option_matches_all_on_first_step(model4):
    # Adam divides the gradient scale back out; only epsilon keeps the two apart.
    ctx = np.arange(1, 15)
    g = optimize_deltas(model4, ctx, DeltaSet.for_model(model4), SessionConfig(opt_steps=1, weight_decay=0.0, soft_scaling="gradient"))
    a = optimize_deltas(model4, ctx, DeltaSet.for_model(model4), SessionConfig(opt_steps=1, weight_decay=0.0, strategy="all"))
    assert np.allclose(g.deltas.values, a.deltas.values, rtol=2e-2)


def test_phase_lowers_context_loss(model4):
    ctx = np.array([5, 6, 7, 5, 6, 7, 5, 6, 7, 5, 6, 7])
    res = optimize_deltas(model4, ctx, DeltaSet.for_model(model4), SessionConfig(strategy="all"), eval_final=True)
    assert res.final_loss < res.losses[0]
    assert res.losses[0] == pytest.approx(model4.context_loss(ctx))


# -- sessions --------------------------------------------------------------------------


def test_zero_steps_equals_plain_decoding(tiny_model):
    prompt = [4, 8, 15, 16]
    for temp in (0.0, 0.9):
        cfg = SessionConfig(opt_steps=0, max_new_tokens=20, temperature=temp, rng_seed=5)
        toks, log = run_session(tiny_model, prompt, cfg)
        rng = np.random.default_rng(np.random.SeedSequence(5).spawn(2)[0])
        ref, trace = generate(tiny_model, prompt, 20, temp, rng)
        assert toks == ref
        assert np.array_equal(log.trace.probs, trace.probs)


@pytest.mark.parametrize("G,m", [(1, 4), (4, 4), (5, 4), (13, 4), (20, 7)])
def test_phase_count(tiny_model, G, m):
    _, log = run_session(tiny_model, [1, 2, 3], SessionConfig(opt_steps=1, regen_interval=m, max_new_tokens=G))
    assert log.of("session_end")[0]["generated"] == G
    assert log.n_phases == 1 + (G - 1) // m
    _, off = run_session(tiny_model, [1, 2, 3], SessionConfig(opt_steps=1, regen_interval=m, max_new_tokens=G, continuous=False))
    assert off.n_phases == 1


def test_single_token_prompt_skips_first_phase(tiny_model):
    _, log = run_session(tiny_model, [7], SessionConfig(max_new_tokens=3))
    assert log.of("phase_end")[0]["status"] == "skipped"


def test_session_log_round_trip(tiny_model, tmp_path):
    _, log = run_session(tiny_model, [1, 2, 3, 4], SessionConfig(max_new_tokens=6, regen_interval=3))
    path = tmp_path / "s.jsonl"
    log.write(path)
    back = SessionLog.read(path)
    assert back.events == log.events and back.to_jsonl() == log.to_jsonl()
    assert back.entropy_matrix().shape == (6, 2)
    kinds = [e["event"] for e in back.events]
    assert kinds[0] == "session_start" and kinds[-1] == "session_end"


def test_session_deterministic(tiny_model):
    cfg = SessionConfig(max_new_tokens=10, temperature=1.0, strategy="random", rng_seed=3, regen_interval=4)
    a = run_session(tiny_model, [9, 9, 1], cfg)[1].to_jsonl()
    b = run_session(tiny_model, [9, 9, 1], cfg)[1].to_jsonl()
    assert a == b


def test_config_validation():
    for bad in (dict(opt_steps=-1), dict(regen_interval=0), dict(lr=0.0), dict(strategy="x"),
                dict(confidence_sign="y"), dict(ratio=1.5), dict(soft_scaling="z")):
        with pytest.raises(ConfigError):
            SessionConfig(**bad)
