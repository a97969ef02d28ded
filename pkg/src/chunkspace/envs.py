"""Deterministic rate-limited servo environments.

``TrackingEnv`` follows a reference joint trajectory; ``ReachHoldEnv`` must
reach a goal posture and hold it, after which a new goal is drawn. Both work
on batched states: every array carries the same leading batch shape, so one
call advances many rollouts at once.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class EnvSpec:
    dof: int = 11
    dt: float = 0.02
    v_max: float = 4.0
    w_track: float = 1.0
    w_effort: float = 0.01
    w_goal: float = 1.0
    hold_tol: float = 0.1
    hold_steps: int = 25
    success_bonus: float = 5.0

    def __post_init__(self):
        if not self.dt > 0 or not self.v_max > 0:
            raise ValueError("dt and v_max must be positive")


@dataclass
class EnvState:
    q: np.ndarray
    u_prev: np.ndarray
    t: np.ndarray          # step counter
    payload: np.ndarray    # reference start index (tracking) or goal seed (reach)
    goal: np.ndarray | None = None
    hold: np.ndarray | None = None
    successes: np.ndarray | None = None

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.q.shape[:-1]

    def tile(self, n: int) -> "EnvState":
        """Stack ``n`` copies of an unbatched state."""
        return EnvState(**{f.name: None if (v := getattr(self, f.name)) is None
                           else np.repeat(np.asarray(v)[None], n, axis=0)
                           for f in dataclasses.fields(self)})

    def index(self, i) -> "EnvState":
        return EnvState(**{f.name: None if (v := getattr(self, f.name)) is None else np.asarray(v)[i]
                           for f in dataclasses.fields(self)})


def servo(spec: EnvSpec, q: np.ndarray, u: np.ndarray) -> np.ndarray:
    lim = spec.v_max * spec.dt
    return q + np.clip(u - q, -lim, lim)


def _check_u(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if not np.all(np.isfinite(u)):
        raise ValueError("control contains non-finite values")
    return u


class TrackingEnv:
    """Track a reference window cut from a pool of (held-out) frames."""

    def __init__(self, spec: EnvSpec, reference_pool: np.ndarray, episode_steps: int = 500,
                 lookahead: int = 50):
        pool = np.asarray(reference_pool, dtype=np.float64)
        if pool.ndim == 1:
            pool = pool[None]
        if pool.shape[1] != spec.dof:
            raise ValueError(f"reference pool has {pool.shape[1]} joints, spec says {spec.dof}")
        self.spec, self.pool = spec, pool
        self.episode_steps, self.lookahead = episode_steps, lookahead

    @classmethod
    def constant(cls, spec: EnvSpec, posture: np.ndarray, episode_steps: int = 500) -> "TrackingEnv":
        return cls(spec, np.asarray(posture, dtype=np.float64)[None], episode_steps)

    @property
    def obs_dim(self) -> int:
        return 2 * self.spec.dof

    def reset(self, seed: int) -> EnvState:
        rng = np.random.default_rng([seed, 101])
        span = len(self.pool) - self.episode_steps - self.lookahead
        start = int(rng.integers(span)) if span > 0 else 0
        q = self.pool[start].copy()
        return EnvState(q=q, u_prev=q.copy(), t=np.array(0), payload=np.array(start))

    def reference(self, state: EnvState, offset: int = 0) -> np.ndarray:
        idx = np.minimum(np.asarray(state.payload) + np.asarray(state.t) + offset, len(self.pool) - 1)
        return self.pool[idx]

    def transition(self, state: EnvState, u: np.ndarray) -> tuple[EnvState, np.ndarray]:
        u = _check_u(u)
        s = self.spec
        c = s.w_track * np.sum((state.q - self.reference(state)) ** 2, -1) \
            + s.w_effort * np.sum((u - state.u_prev) ** 2, -1)
        nxt = EnvState(q=servo(s, state.q, u), u_prev=u, t=state.t + 1, payload=state.payload)
        return nxt, c

    def step(self, state: EnvState, u) -> EnvState:
        return self.transition(state, u)[0]

    def cost(self, state: EnvState, u) -> np.ndarray:
        return self.transition(state, u)[1]

    def terminal_cost(self, state: EnvState) -> np.ndarray:
        return self.spec.w_track * np.sum((state.q - self.reference(state)) ** 2, -1)

    def observe(self, state: EnvState) -> np.ndarray:
        return np.concatenate([state.q, self.reference(state)], -1)

    def tracking_error(self, state: EnvState) -> np.ndarray:
        return np.max(np.abs(state.q - self.reference(state)), -1)


class ReachHoldEnv:
    """Reach a goal posture and hold it within tolerance for ``hold_steps`` steps."""

    def __init__(self, spec: EnvSpec, posture_sampler: Callable[[np.random.Generator], np.ndarray],
                 episode_steps: int = 200):
        self.spec, self.sampler, self.episode_steps = spec, posture_sampler, episode_steps

    @property
    def obs_dim(self) -> int:
        return 2 * self.spec.dof

    def goal_for(self, seed: int, k: int) -> np.ndarray:
        return np.asarray(self.sampler(np.random.default_rng([int(seed), 202, int(k)])), dtype=np.float64)

    def reset(self, seed: int) -> EnvState:
        q = np.asarray(self.sampler(np.random.default_rng([seed, 201])), dtype=np.float64)
        return EnvState(q=q, u_prev=q.copy(), t=np.array(0), payload=np.array(seed),
                        goal=self.goal_for(seed, 0), hold=np.array(0), successes=np.array(0))

    def transition(self, state: EnvState, u: np.ndarray) -> tuple[EnvState, np.ndarray]:
        u = _check_u(u)
        s = self.spec
        q = servo(s, state.q, u)
        inside = np.max(np.abs(q - state.goal), -1) < s.hold_tol
        hold = np.where(inside, state.hold + 1, 0)
        done = hold >= s.hold_steps
        successes = state.successes + done
        goal = state.goal.copy()
        if np.any(done):
            if goal.ndim == 1:
                goal = self.goal_for(int(state.payload), int(successes))
            else:
                for i in np.flatnonzero(done):
                    goal[i] = self.goal_for(int(state.payload[i]), int(successes[i]))
        hold = np.where(done, 0, hold)
        c = s.w_goal * np.sum((state.q - state.goal) ** 2, -1) \
            + s.w_effort * np.sum((u - state.u_prev) ** 2, -1) - s.success_bonus * done
        nxt = EnvState(q=q, u_prev=u, t=state.t + 1, payload=state.payload, goal=goal,
                       hold=hold, successes=successes)
        return nxt, c

    def step(self, state: EnvState, u) -> EnvState:
        return self.transition(state, u)[0]

    def cost(self, state: EnvState, u) -> np.ndarray:
        return self.transition(state, u)[1]

    def terminal_cost(self, state: EnvState) -> np.ndarray:
        return self.spec.w_goal * np.sum((state.q - state.goal) ** 2, -1)

    def observe(self, state: EnvState) -> np.ndarray:
        return np.concatenate([state.q, state.goal], -1)


class ZeroCostEnv(TrackingEnv):
    """Servo dynamics with identically zero cost; handy for planner checks."""

    def transition(self, state, u):
        nxt, c = super().transition(state, u)
        return nxt, np.zeros_like(c)

    def terminal_cost(self, state):
        return np.zeros(state.batch_shape)
