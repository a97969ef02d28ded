"""Action-chunked RL: a selection-state wrapper around an environment and a
compact PPO trainer shared by the chunked agent and the plain baseline."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import torch
from torch import nn

from .envs import EnvState
from .nn import NonFiniteError

log = logging.getLogger(__name__)


class ChunkDecoder(Protocol):
    K: int

    def decode_codes(self, q0: np.ndarray, indices: np.ndarray, steps=None) -> np.ndarray: ...


def decode_chunk_from_code(decoder: ChunkDecoder, q_t: np.ndarray, code, n_c: int) -> np.ndarray:
    """First ``n_c`` decoded actions with every latent slot set to ``code``.

    Accepts one posture/code or a batch (``q_t[B, D]``, ``code[B]``).
    """
    codes = np.atleast_1d(np.asarray(code, dtype=np.int64))
    if np.any(codes < 0) or np.any(codes >= decoder.K):
        raise IndexError(f"code index out of range [0, {decoder.K})")
    m = decoder.cfg.m
    q = np.atleast_2d(np.asarray(q_t, dtype=np.float64))
    out = decoder.decode_codes(q, np.repeat(codes[:, None], m, axis=1), list(range(n_c)))
    return out[0] if np.ndim(code) == 0 else out


@dataclass
class AugmentedState:
    """Environment state plus the active chunk and the selection accumulator.

    Arrays carry a leading batch axis when the wrapped env state does.
    """

    x: EnvState
    chunk: np.ndarray       # (..., n_c, D)
    chunk_start: np.ndarray  # (...,) step index where chunk row 0 applies
    select: np.ndarray      # (..., K)

    @property
    def t(self) -> np.ndarray:
        return self.x.t


@dataclass
class AugmentedAction:
    residual: np.ndarray  # (..., D)
    select: np.ndarray    # (..., K)


class ChunkedEnv:
    """Wraps an env so the agent picks decoded chunks and adds residuals.

    The applied control is the active chunk's row for the current step (its
    last row once the chunk is exhausted) plus the residual. Selection actions
    accumulate in ``select``; when any accumulated entry exceeds 1, the argmax
    code is decoded from the current posture into a new chunk starting next
    step, and the accumulator is redrawn uniformly from [0, 1).
    """

    def __init__(self, env, decoder: ChunkDecoder, n_c: int = 10, seed: int = 0):
        if n_c < 1:
            raise ValueError("n_c must be >= 1")
        self.env, self.decoder, self.n_c = env, decoder, n_c
        self.K = decoder.K
        self.dof = env.spec.dof
        self.seed = seed

    @property
    def obs_dim(self) -> int:
        return self.env.obs_dim + self.dof + self.K

    def reset(self, seed: int, rng: np.random.Generator | None = None) -> AugmentedState:
        x = self.env.reset(seed)
        rng = rng or np.random.default_rng([self.seed, seed, 303])
        chunk = np.repeat(np.asarray(x.q)[None], self.n_c, axis=0)
        return AugmentedState(x, chunk, np.array(0), rng.uniform(0.0, 1.0, self.K))

    def feedforward(self, s: AugmentedState) -> np.ndarray:
        k = np.asarray(s.t) - np.asarray(s.chunk_start)
        k = np.where((k >= 0) & (k < self.n_c), k, self.n_c - 1)
        if s.chunk.ndim == 2:
            return s.chunk[int(k)]
        return np.take_along_axis(s.chunk, k[:, None, None], axis=1)[:, 0]

    def observe(self, s: AugmentedState) -> np.ndarray:
        return np.concatenate([self.env.observe(s.x), self.feedforward(s), s.select], -1)

    def step(self, s: AugmentedState, a: AugmentedAction,
             rng: np.random.Generator) -> tuple[AugmentedState, np.ndarray, np.ndarray]:
        """Returns ``(next_state, cost, trigger)``."""
        delta = np.asarray(a.residual, dtype=np.float64)
        u_s = np.asarray(a.select, dtype=np.float64)
        if not (np.all(np.isfinite(delta)) and np.all(np.isfinite(u_s))):
            raise ValueError("augmented action contains non-finite values")
        u = self.feedforward(s) + delta
        x_next, cost = self.env.transition(s.x, u)
        acc = s.select + u_s
        trigger = np.max(acc, -1) > 1.0
        chunk, start, select = s.chunk, np.asarray(s.chunk_start), acc
        if np.any(trigger):
            code = np.argmax(acc, -1)
            if chunk.ndim == 2:
                chunk = decode_chunk_from_code(self.decoder, s.x.q, int(code), self.n_c)
                start = np.asarray(s.t) + 1
                select = rng.uniform(0.0, 1.0, self.K)
            else:
                idx = np.flatnonzero(trigger)
                chunk = chunk.copy()
                chunk[idx] = decode_chunk_from_code(self.decoder, s.x.q[idx], code[idx], self.n_c)
                start = np.where(trigger, np.asarray(s.t) + 1, start)
                select = acc.copy()
                select[idx] = rng.uniform(0.0, 1.0, (len(idx), self.K))
        return AugmentedState(x_next, chunk, start, select), cost, trigger


def augmented_step(env: ChunkedEnv, s: AugmentedState, a: AugmentedAction,
                   rng: np.random.Generator) -> AugmentedState:
    return env.step(s, a, rng)[0]


# ---------------------------------------------------------------------------
# Batched training environments


class VecEnv:
    """Fixed-length episodes over a batch of env copies with auto-reset.

    ``chunked`` selects the action interface: raw joint targets squashed to
    [-1, 1], or (residual, selection) for :class:`ChunkedEnv`.
    """

    def __init__(self, env, n_envs: int, seed: int, chunked: ChunkedEnv | None = None,
                 residual_bound: float = 0.1, select_bound: float = 0.5):
        self.env, self.n_envs, self.seed = env, n_envs, seed
        self.chunked = chunked
        self.residual_bound, self.select_bound = residual_bound, select_bound
        self.dof = env.spec.dof
        self.rng = np.random.default_rng([seed, 404])
        self.episode_counter = 0
        self.state = None
        self.ep_return = np.zeros(n_envs)

    @property
    def obs_dim(self) -> int:
        return self.chunked.obs_dim if self.chunked else self.env.obs_dim

    @property
    def act_dim(self) -> int:
        return self.dof + (self.chunked.K if self.chunked else 0)

    def _fresh(self, count: int):
        seeds = self.seed * 1_000_003 + self.episode_counter + np.arange(count)
        self.episode_counter += count
        if self.chunked:
            states = [self.chunked.reset(int(sd), self.rng) for sd in seeds]
            return _stack_aug(states)
        return _stack_env([self.env.reset(int(sd)) for sd in seeds])

    def reset(self) -> np.ndarray:
        self.state = self._fresh(self.n_envs)
        self.ep_return[:] = 0.0
        return self.observe()

    def observe(self) -> np.ndarray:
        if self.chunked:
            return self.chunked.observe(self.state)
        return self.env.observe(self.state)

    def env_state(self) -> EnvState:
        return self.state.x if self.chunked else self.state

    def step(self, raw: np.ndarray):
        """Apply raw (pre-squash) policy outputs; returns ``(obs, reward, done, info)``."""
        if self.chunked:
            a = AugmentedAction(self.residual_bound * np.tanh(raw[:, :self.dof]),
                                self.select_bound * np.tanh(raw[:, self.dof:]))
            self.state, cost, _ = self.chunked.step(self.state, a, self.rng)
        else:
            self.state, cost = self.env.transition(self.state, np.tanh(raw))
        reward = -cost
        self.ep_return += reward
        x = self.env_state()
        done = np.asarray(x.t) >= self.env.episode_steps
        info = {}
        if np.any(done):
            idx = np.flatnonzero(done)
            info["returns"] = self.ep_return[idx].copy()
            if x.successes is not None:
                info["successes"] = np.asarray(x.successes)[idx].copy()
            if hasattr(self.env, "tracking_error"):
                info["tracking_error"] = self.env.tracking_error(x)[idx].copy()
            fresh = self._fresh(len(idx))
            self.state = _replace_rows(self.state, idx, fresh)
            self.ep_return[idx] = 0.0
        return self.observe(), reward, done, info


def _stack_env(states: list[EnvState]) -> EnvState:
    return EnvState(**{f.name: None if getattr(states[0], f.name) is None
                       else np.stack([np.asarray(getattr(s, f.name)) for s in states])
                       for f in dataclasses.fields(EnvState)})


def _stack_aug(states: list[AugmentedState]) -> AugmentedState:
    return AugmentedState(_stack_env([s.x for s in states]), np.stack([s.chunk for s in states]),
                          np.stack([np.asarray(s.chunk_start) for s in states]),
                          np.stack([s.select for s in states]))


def _replace_rows(dst, idx, src):
    if isinstance(dst, AugmentedState):
        return AugmentedState(_replace_rows(dst.x, idx, src.x), _put(dst.chunk, idx, src.chunk),
                              _put(dst.chunk_start, idx, src.chunk_start), _put(dst.select, idx, src.select))
    return EnvState(**{f.name: None if getattr(dst, f.name) is None
                       else _put(getattr(dst, f.name), idx, getattr(src, f.name))
                       for f in dataclasses.fields(EnvState)})


def _put(a, idx, b):
    a = np.array(a, copy=True)
    a[idx] = b
    return a


# ---------------------------------------------------------------------------
# PPO


@dataclass
class RLConfig:
    n_c: int = 10
    residual_bound: float = 0.1
    select_bound: float = 0.5
    hidden: int = 64
    clip: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    n_envs: int = 64
    rollout_steps: int = 64
    epochs: int = 4
    minibatch: int = 1024
    lr: float = 1e-3
    init_log_std: float = -1.0
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    max_grad_norm: float = 0.5
    total_steps: int = 500_000
    eval_every: int = 10  # iterations between mean-action evaluations; 0 disables them
    eval_episodes: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.n_c < 1:
            raise ValueError("n_c must be >= 1")


class ActorCritic(nn.Module):
    def __init__(self, obs_dim: int, act_dim: int, hidden: int = 64, init_log_std: float = -1.0):
        super().__init__()
        self.actor = nn.Sequential(nn.Linear(obs_dim, hidden), nn.Tanh(), nn.Linear(hidden, hidden), nn.Tanh(),
                                   nn.Linear(hidden, act_dim))
        self.critic = nn.Sequential(nn.Linear(obs_dim, hidden), nn.Tanh(), nn.Linear(hidden, hidden), nn.Tanh(),
                                    nn.Linear(hidden, 1))
        self.log_std = nn.Parameter(torch.full((act_dim,), float(init_log_std)))
        with torch.no_grad():
            self.actor[-1].weight.mul_(0.01)
            self.actor[-1].bias.zero_()

    def actor_parameters(self) -> list[nn.Parameter]:
        return [*self.actor.parameters(), self.log_std]

    def dist(self, obs: torch.Tensor) -> torch.distributions.Normal:
        return torch.distributions.Normal(self.actor(obs), self.log_std.exp())

    def value(self, obs: torch.Tensor) -> torch.Tensor:
        return self.critic(obs).squeeze(-1)


def gae(rewards, values, dones, last_value, gamma, lam):
    """Generalized advantage estimates over a (T, E) rollout; returns (adv, returns)."""
    T = len(rewards)
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1])
    for t in reversed(range(T)):
        nxt = last_value if t == T - 1 else values[t + 1]
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * nxt * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


@dataclass
class PolicyResult:
    policy: ActorCritic
    curve: list[dict] = field(default_factory=list)

    def steps_to(self, key: str, threshold: float) -> float:
        for rec in self.curve:
            if rec[key] is not None and rec[key] >= threshold:
                return rec["env_steps"]
        return float("inf")


def evaluate_policy(env, ac: ActorCritic, cfg: RLConfig, wrapper: ChunkedEnv | None = None,
                    seed: int = 10_007) -> dict:
    """One batch of episodes under the mean action, on a fixed set of evaluation seeds."""
    venv = VecEnv(env, cfg.eval_episodes, seed, wrapper, cfg.residual_bound, cfg.select_bound)
    obs = venv.reset()
    returns, successes = [], []
    for _ in range(env.episode_steps):
        with torch.no_grad():
            mean = ac.actor(torch.as_tensor(obs, dtype=torch.float32)).numpy()
        obs, _, _, info = venv.step(mean.astype(np.float64))
        returns.extend(info.get("returns", []))
        successes.extend(info.get("successes", []))
    return {"eval_return": float(np.mean(returns)),
            "eval_success_rate": float(np.mean(np.asarray(successes) > 0)) if successes else None}


def train_policy(env, cfg: RLConfig, chunked: bool, decoder: ChunkDecoder | None = None,
                 curve_path: str | Path | None = None,
                 on_iter: Callable[[dict], None] | None = None,
                 stop: Callable[[dict], bool] | None = None) -> PolicyResult:
    """Clipped-surrogate actor-critic with GAE on the raw or chunk-augmented env."""
    torch.manual_seed(cfg.seed)
    wrapper = None
    if chunked:
        if decoder is None:
            raise ValueError("chunked training needs a decoder")
        wrapper = ChunkedEnv(env, decoder, cfg.n_c, seed=cfg.seed)
    venv = VecEnv(env, cfg.n_envs, cfg.seed, wrapper, cfg.residual_bound, cfg.select_bound)
    ac = ActorCritic(venv.obs_dim, venv.act_dim, cfg.hidden, cfg.init_log_std)
    opt = torch.optim.Adam(ac.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    mb_rng = np.random.default_rng([cfg.seed, 505])
    obs = venv.reset()
    T, E = cfg.rollout_steps, cfg.n_envs
    env_steps, it = 0, 0
    curve: list[dict] = []
    sink = open(curve_path, "w") if curve_path else None
    try:
        while env_steps < cfg.total_steps:
            buf_obs = np.zeros((T, E, venv.obs_dim), np.float32)
            buf_act = np.zeros((T, E, venv.act_dim), np.float32)
            buf_logp = np.zeros((T, E), np.float32)
            buf_val = np.zeros((T, E), np.float64)
            buf_rew = np.zeros((T, E), np.float64)
            buf_done = np.zeros((T, E), np.float64)
            finished_returns, finished_success, finished_err = [], [], []
            for t in range(T):
                o = torch.as_tensor(obs, dtype=torch.float32)
                with torch.no_grad():
                    d = ac.dist(o)
                    raw = d.mean + d.stddev * torch.randn(d.mean.shape, generator=gen)
                    buf_logp[t] = d.log_prob(raw).sum(-1).numpy()
                    buf_val[t] = ac.value(o).numpy()
                buf_obs[t], buf_act[t] = obs, raw.numpy()
                obs, rew, done, info = venv.step(raw.numpy().astype(np.float64))
                buf_rew[t], buf_done[t] = rew, done
                finished_returns.extend(info.get("returns", []))
                finished_success.extend(info.get("successes", []))
                finished_err.extend(info.get("tracking_error", []))
            env_steps += T * E
            with torch.no_grad():
                last_v = ac.value(torch.as_tensor(obs, dtype=torch.float32)).numpy()
            adv, ret = gae(buf_rew, buf_val, buf_done, last_v, cfg.gamma, cfg.gae_lambda)
            stats = ppo_update(ac, opt, cfg, buf_obs.reshape(T * E, -1), buf_act.reshape(T * E, -1),
                               buf_logp.reshape(-1), adv.reshape(-1), ret.reshape(-1), mb_rng)
            rec = {"iter": it, "env_steps": env_steps,
                   "mean_return": float(np.mean(finished_returns)) if finished_returns else None,
                   "success_rate": float(np.mean(np.asarray(finished_success) > 0)) if finished_success else None,
                   "tracking_error": float(np.mean(finished_err)) if finished_err else None,
                   "eval_return": None, "eval_success_rate": None, **stats}
            if cfg.eval_every and (it + 1) % cfg.eval_every == 0:
                rec.update(evaluate_policy(env, ac, cfg, wrapper))
            curve.append(rec)
            if sink:
                sink.write(json.dumps(rec) + "\n")
                sink.flush()
            if on_iter:
                on_iter(rec)
            it += 1
            if stop and stop(rec):
                break
    finally:
        if sink:
            sink.close()
    return PolicyResult(ac, curve)


def ppo_update(ac: ActorCritic, opt, cfg: RLConfig, obs, act, logp_old, adv, ret, rng) -> dict:
    obs_t = torch.as_tensor(obs)
    act_t = torch.as_tensor(act)
    logp_t = torch.as_tensor(logp_old)
    adv_t = torch.as_tensor(normalize_advantages(adv), dtype=torch.float32)
    ret_t = torch.as_tensor(ret, dtype=torch.float32)
    n = len(obs)
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for i in range(0, n, cfg.minibatch):
            mb = torch.as_tensor(order[i:i + cfg.minibatch])
            d = ac.dist(obs_t[mb])
            logp = d.log_prob(act_t[mb]).sum(-1)
            ratio = torch.exp(logp - logp_t[mb])
            surr = torch.min(ratio * adv_t[mb], torch.clamp(ratio, 1 - cfg.clip, 1 + cfg.clip) * adv_t[mb])
            v_loss = ((ac.value(obs_t[mb]) - ret_t[mb]) ** 2).mean()
            loss = -surr.mean() + cfg.value_coef * v_loss - cfg.entropy_coef * d.entropy().sum(-1).mean()
            if not bool(torch.isfinite(loss)):
                raise NonFiniteError(f"non-finite PPO loss (value loss {float(v_loss)}, "
                                     f"ratio range {float(ratio.min())}..{float(ratio.max())})")
            opt.zero_grad()
            loss.backward()
            # clipped per head so large value errors do not starve the actor
            nn.utils.clip_grad_norm_(ac.actor_parameters(), cfg.max_grad_norm)
            nn.utils.clip_grad_norm_(ac.critic.parameters(), cfg.max_grad_norm)
            opt.step()
            losses.append(float(loss.detach()))
    return {"loss": float(np.mean(losses)), "log_std": float(ac.log_std.detach().mean())}
