import copy

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from chunkspace.envs import EnvSpec, ReachHoldEnv, TrackingEnv
from chunkspace.model import ChunkModel, FrozenDecoder
from chunkspace.rl import (ActorCritic, AugmentedAction, AugmentedState, ChunkedEnv, RLConfig, VecEnv,
                           augmented_step, decode_chunk_from_code, gae, normalize_advantages, ppo_update,
                           train_policy)
from helpers import tiny_model_config

SPEC = EnvSpec()
D = SPEC.dof


class StubDecoder:
    """Chunk rows that encode the code, the step and the anchor posture."""

    K = 4

    class cfg:
        m = 5
        n = 50

    def __init__(self):
        self.calls = []

    def decode_codes(self, q0, indices, steps=None):
        q0, idx = np.atleast_2d(q0), np.atleast_2d(indices)
        self.calls.append((q0.copy(), idx.copy()))
        steps = np.arange(self.cfg.n) if steps is None else np.asarray(steps)
        return q0[:, None, :] + 0.1 * (idx[:, :1, None] + 1) + 0.001 * steps[None, :, None]


def reach_env():
    def sampler(rng):
        return rng.uniform(-0.5, 0.5, D)
    return ReachHoldEnv(SPEC, sampler, episode_steps=200)


@pytest.fixture
def wrapped():
    return ChunkedEnv(reach_env(), StubDecoder(), n_c=10)


def act(delta=0.0, select=(0, 0, 0, 0)):
    return AugmentedAction(np.full(D, float(delta)), np.asarray(select, dtype=float))


def with_select(s, xs):
    return AugmentedState(s.x, s.chunk, s.chunk_start, np.asarray(xs, dtype=float))


def test_trigger_selects_argmax_code(wrapped):
    s = with_select(wrapped.reset(0), (0.5, 0.3, 0.0, 0.0))
    nxt, _, trig = wrapped.step(s, act(select=(0.6, -0.1, 0, 0)), np.random.default_rng(0))
    assert bool(trig)
    q0, idx = wrapped.decoder.calls[-1]
    np.testing.assert_array_equal(idx, [[0] * 5])
    np.testing.assert_array_equal(q0[0], s.x.q)  # decoded from the pre-step posture
    assert int(nxt.chunk_start) == int(s.t) + 1
    assert np.all((nxt.select >= 0) & (nxt.select < 1))


def test_no_trigger_keeps_chunk_and_accumulator(wrapped):
    s = with_select(wrapped.reset(1), (0.2, 0.9, 0.4, 0.0))
    nxt, _, trig = wrapped.step(s, act(), np.random.default_rng(0))
    assert not bool(trig)
    np.testing.assert_array_equal(nxt.chunk, s.chunk)
    np.testing.assert_array_equal(nxt.select, s.select)
    assert wrapped.decoder.calls == []


def test_exactly_one_does_not_trigger(wrapped):
    s = with_select(wrapped.reset(1), (0.5, 0.0, 0.0, 0.0))
    _, _, trig = wrapped.step(s, act(select=(0.5, 0, 0, 0)), np.random.default_rng(0))
    assert not bool(trig)


@settings(max_examples=200, deadline=None)
@given(xs=st.lists(st.floats(0, 0.999), min_size=4, max_size=4),
       us=st.lists(st.floats(-0.5, 0.5), min_size=4, max_size=4))
def test_trigger_and_accumulation_laws(xs, us):
    env = ChunkedEnv(reach_env(), StubDecoder(), n_c=10)
    s = with_select(env.reset(2), xs)
    nxt, _, trig = env.step(s, act(select=us), np.random.default_rng(0))
    acc = np.asarray(xs) + np.asarray(us)
    assert bool(trig) == bool(acc.max() > 1)
    if not trig:
        np.testing.assert_array_equal(nxt.select, acc)
    else:
        assert np.all((nxt.select >= 0) & (nxt.select < 1))


def test_feedforward_follows_chunk_then_holds_last_row(wrapped):
    s = with_select(wrapped.reset(3), (0.99, 0, 0, 0))
    rng = np.random.default_rng(0)
    s, _, trig = wrapped.step(s, act(select=(0.5, 0, 0, 0)), rng)
    assert bool(trig)
    chunk = s.chunk.copy()
    for k in range(15):
        ff = wrapped.feedforward(s)
        np.testing.assert_array_equal(ff, chunk[min(k, 9)])
        obs = wrapped.observe(s)
        np.testing.assert_array_equal(obs[2 * D:3 * D], ff)
        s, _, trig = wrapped.step(s, act(select=(-0.5, -0.5, -0.5, -0.5)), rng)
        assert not bool(trig)


def test_observation_layout(wrapped):
    s = wrapped.reset(4)
    obs = wrapped.observe(s)
    assert len(obs) == wrapped.obs_dim == wrapped.env.obs_dim + D + 4
    np.testing.assert_array_equal(obs[:2 * D], wrapped.env.observe(s.x))
    np.testing.assert_array_equal(obs[-4:], s.select)


def test_initial_accumulator_is_uniform_draw(wrapped):
    draws = np.stack([wrapped.reset(i).select for i in range(200)])
    assert np.all((draws >= 0) & (draws < 1))
    assert abs(draws.mean() - 0.5) < 0.05


def test_residual_is_added_to_feedforward(wrapped):
    s = wrapped.reset(5)
    a = AugmentedAction(np.linspace(-0.1, 0.1, D), np.zeros(4))
    nxt, cost, _ = wrapped.step(s, a, np.random.default_rng(0))
    x_ref, c_ref = wrapped.env.transition(s.x, wrapped.feedforward(s) + a.residual)
    np.testing.assert_array_equal(nxt.x.q, x_ref.q)
    assert cost == c_ref


def test_residual_bound_in_vector_env():
    env = reach_env()
    venv = VecEnv(env, 3, seed=0, chunked=ChunkedEnv(env, StubDecoder()), residual_bound=0.1)
    venv.reset()
    raw = np.random.default_rng(0).normal(scale=50.0, size=(3, venv.act_dim))
    ff = venv.chunked.feedforward(venv.state)
    venv.step(raw)
    assert np.all(np.abs(venv.state.x.u_prev - ff) <= 0.1 + 1e-15)


def test_non_finite_action_is_rejected(wrapped):
    s = wrapped.reset(0)
    with pytest.raises(ValueError):
        wrapped.step(s, act(delta=np.nan), np.random.default_rng(0))


def test_wrapper_is_pure_given_rng(wrapped):
    s = with_select(wrapped.reset(6), (0.9, 0.1, 0.95, 0.2))
    a = act(delta=0.02, select=(0.05, 0, 0.1, 0))
    one = augmented_step(wrapped, copy.deepcopy(s), a, np.random.default_rng(9))
    two = augmented_step(wrapped, copy.deepcopy(s), a, np.random.default_rng(9))
    np.testing.assert_array_equal(one.chunk, two.chunk)
    np.testing.assert_array_equal(one.select, two.select)
    np.testing.assert_array_equal(one.x.q, two.x.q)


def test_batched_step_matches_single_steps():
    env = reach_env()
    wrap = ChunkedEnv(env, StubDecoder())
    venv = VecEnv(env, 4, seed=1, chunked=wrap)
    venv.reset()
    state = copy.deepcopy(venv.state)
    sel = np.array([[0.9, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0.9, 0], [0, 0, 0, 0]])
    a = AugmentedAction(np.zeros((4, D)), sel)
    nxt, _, trig = wrap.step(state, a, np.random.default_rng(0))
    for i in range(4):
        si = AugmentedState(type(state.x)(**{k: None if v is None else v[i] for k, v in vars(state.x).items()}),
                            state.chunk[i], state.chunk_start[i], state.select[i])
        ni, _, ti = wrap.step(si, AugmentedAction(np.zeros(D), sel[i]), np.random.default_rng(0))
        assert bool(ti) == bool(trig[i])
        np.testing.assert_array_equal(ni.chunk, nxt.chunk[i])
        np.testing.assert_array_equal(ni.x.q, nxt.x.q[i])


def test_decode_chunk_from_code_shape_and_prefix():
    cfg = tiny_model_config(quantization="vq", n=6, m=3)
    dec = FrozenDecoder(ChunkModel(cfg, seed=3))
    q = np.random.default_rng(0).normal(size=cfg.dof)
    n_c = cfg.n // cfg.m
    for code in range(dec.K):
        chunk = decode_chunk_from_code(dec, q, code, n_c)
        assert chunk.shape == (n_c, cfg.dof)
        for rest in ([0, 0], [dec.K - 1, 1]):
            full = dec.decode_codes(q[None], np.array([[code, *rest]]))[0]
            np.testing.assert_allclose(chunk, full[:n_c], rtol=0, atol=1e-6)
    with pytest.raises(IndexError):
        decode_chunk_from_code(dec, q, dec.K, n_c)
    with pytest.raises(IndexError):
        decode_chunk_from_code(dec, q, -1, n_c)


def test_n_c_must_be_positive():
    with pytest.raises(ValueError):
        RLConfig(n_c=0)
    with pytest.raises(ValueError):
        ChunkedEnv(reach_env(), StubDecoder(), n_c=0)


def test_gae_matches_direct_sum():
    rng = np.random.default_rng(0)
    T, gamma, lam = 7, 0.9, 0.8
    r, v = rng.normal(size=(T, 1)), rng.normal(size=(T, 1))
    last = np.array([0.3])
    adv, ret = gae(r, v, np.zeros((T, 1)), last, gamma, lam)
    vals = np.concatenate([v[:, 0], last])
    deltas = r[:, 0] + gamma * vals[1:] - vals[:-1]
    expect = [sum((gamma * lam) ** (k - t) * deltas[k] for k in range(t, T)) for t in range(T)]
    np.testing.assert_allclose(adv[:, 0], expect, rtol=1e-12)
    np.testing.assert_allclose(ret, adv + v)
    done = np.zeros((T, 1))
    done[3] = 1
    adv_d, _ = gae(r, v, done, last, gamma, lam)
    assert adv_d[3, 0] == pytest.approx(r[3, 0] - v[3, 0])


def test_reward_scale_leaves_greedy_action_unchanged():
    rng = np.random.default_rng(0)
    obs = rng.normal(size=(256, 6)).astype(np.float32)
    act_ = rng.normal(size=(256, 3)).astype(np.float32)
    adv = rng.normal(size=256)
    np.testing.assert_allclose(normalize_advantages(2 * adv), normalize_advantages(adv), atol=1e-12)
    outs = []
    for scale in (1.0, 2.0):
        torch.manual_seed(0)
        ac = ActorCritic(6, 3)
        opt = torch.optim.Adam(ac.parameters(), lr=1e-3)
        with torch.no_grad():
            logp = ac.dist(torch.as_tensor(obs)).log_prob(torch.as_tensor(act_)).sum(-1).numpy()
        cfg = RLConfig(value_coef=0.0, epochs=2, minibatch=64)
        ppo_update(ac, opt, cfg, obs, act_, logp, scale * adv, scale * adv, np.random.default_rng(1))
        with torch.no_grad():
            outs.append(ac.actor(torch.as_tensor(obs)).numpy())
    np.testing.assert_allclose(outs[0], outs[1], atol=1e-5)
    np.testing.assert_array_equal(outs[0].argmax(-1), outs[1].argmax(-1))


def test_training_is_deterministic_and_logs_curve(tmp_path):
    env = reach_env()
    cfg = RLConfig(total_steps=2048, n_envs=8, rollout_steps=128, seed=3, eval_every=2, eval_episodes=4)
    a = train_policy(env, cfg, chunked=True, decoder=StubDecoder(), curve_path=tmp_path / "c.jsonl")
    b = train_policy(env, cfg, chunked=True, decoder=StubDecoder())
    assert [r["loss"] for r in a.curve] == [r["loss"] for r in b.curve]
    assert a.curve[0]["eval_success_rate"] is None and a.curve[1]["eval_success_rate"] is not None
    assert a.curve[1]["eval_return"] == b.curve[1]["eval_return"]
    lines = (tmp_path / "c.jsonl").read_text().splitlines()
    assert len(lines) == len(a.curve) == 2
    assert {"iter", "env_steps", "mean_return", "success_rate", "eval_success_rate"} <= set(a.curve[0])
    with pytest.raises(ValueError):
        train_policy(env, cfg, chunked=True, decoder=None)


@pytest.mark.slow
def test_baseline_tracks_a_constant_reference():
    # frozen budget: 200k env steps, 16 envs
    pool = np.tile(np.linspace(-0.4, 0.4, D), (400, 1))
    env = TrackingEnv(SPEC, pool, episode_steps=100)
    res = train_policy(env, RLConfig(total_steps=200_000, n_envs=16, seed=0), chunked=False)
    s, errs = env.reset(3), []
    for _ in range(100):
        with torch.no_grad():
            mean = res.policy.dist(torch.as_tensor(env.observe(s), dtype=torch.float32)).mean.numpy()
        s, _ = env.transition(s, np.tanh(mean.astype(np.float64)))
        errs.append(env.tracking_error(s))
    assert np.mean(errs) < 0.1
