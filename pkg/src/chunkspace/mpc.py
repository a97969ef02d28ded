"""Predictive-sampling MPC over latent codes, latent splines or plain control splines.

A :class:`Plan` produces controls by decoding its latent codes from the
anchored joint posture and adding a knot-spline correction. Each planner
step time-shifts the nominal plan, samples candidates around it, rolls all
of them out in one batched simulation and keeps the cheapest.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .envs import EnvState
from .model import FrozenDecoder, latent_time
from .spline import Spline, evaluate, shift

log = logging.getLogger(__name__)

MODES = ("latent_vq", "latent_kl_spline", "baseline_spline")


@dataclass
class PlannerConfig:
    n_samples: int = 40
    flip_prob: float = 0.1
    noise_std: float = 0.05
    horizon: float = 1.0
    mode: str = "latent_vq"
    noise_knots: int = 4
    interpolation: str = "linear"
    latent_noise_std: float = 0.3
    latent_knots: int = 4
    reanchor: str = "slot"  # "slot" | "step"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        if self.n_samples < 1 or not self.horizon > 0:
            raise ValueError("need n_samples >= 1 and horizon > 0")
        if self.noise_std < 0 or self.latent_noise_std < 0:
            raise ValueError("noise std must be non-negative")


@dataclass
class Plan:
    anchor_q: np.ndarray
    anchor_time: float = 0.0
    latents: np.ndarray | None = None        # (m,) code indices, latent_vq
    latent_spline: Spline | None = None      # continuous latents, latent_kl_spline
    noise: Spline | None = None              # additive correction on every DoF
    plain: Spline | None = None              # DoFs without a latent prior
    phase: float = 0.0                       # time since the last latent-slot rotation

    def replace(self, **kw) -> "Plan":
        return dataclasses.replace(self, **kw)


@dataclass
class Candidates:
    plans: list[Plan]
    flips: np.ndarray | None = None    # (N, m) replacement events, latent_vq only
    changed: np.ndarray | None = None  # (N,) latents differ from nominal


@dataclass
class StepInfo:
    control: np.ndarray
    costs: np.ndarray
    chosen: int
    chosen_cost: float
    nominal_cost: float


class Planner:
    """Stateful predictive-sampling controller for one environment."""

    def __init__(self, env, cfg: PlannerConfig, decoder: FrozenDecoder | None = None):
        if cfg.mode != "baseline_spline" and decoder is None:
            raise ValueError(f"mode {cfg.mode} needs a trained decoder")
        if cfg.mode == "latent_vq" and decoder is not None and decoder.cfg.quantization != "vq":
            raise ValueError("latent_vq mode needs a vq decoder")
        if cfg.mode == "latent_kl_spline" and decoder is not None and decoder.cfg.quantization != "kl":
            raise ValueError("latent_kl_spline mode needs a kl decoder")
        self.env, self.cfg, self.decoder = env, cfg, decoder
        self.dt = env.spec.dt
        self.dof = env.spec.dof
        self.latent_dof = 0 if cfg.mode == "baseline_spline" else decoder.cfg.dof
        if self.latent_dof > self.dof:
            raise ValueError("decoder controls more joints than the environment has")
        self.steps = int(round(cfg.horizon / self.dt))
        self.nominal: Plan | None = None
        self.iteration = 0
        self.time = 0.0

    # -- plan construction ----------------------------------------------
    def initial_plan(self, q: np.ndarray) -> Plan:
        cfg = self.cfg
        q = np.asarray(q, dtype=np.float64)
        noise = Spline.zeros(cfg.noise_knots, self.dof, cfg.horizon, cfg.interpolation)
        if cfg.mode == "baseline_spline":
            knots = np.linspace(0.0, cfg.horizon, cfg.noise_knots)
            plain = Spline(knots, np.repeat(q[None], cfg.noise_knots, 0), cfg.interpolation)
            return Plan(anchor_q=q, plain=plain)
        extra = self.dof - self.latent_dof
        plain = None
        if extra:
            knots = np.linspace(0.0, cfg.horizon, cfg.noise_knots)
            plain = Spline(knots, np.repeat(q[None, self.latent_dof:], cfg.noise_knots, 0), cfg.interpolation)
        m = self.decoder.cfg.m
        if cfg.mode == "latent_vq":
            return Plan(anchor_q=q, latents=np.zeros(m, dtype=np.int64), noise=noise, plain=plain)
        lat = Spline.zeros(cfg.latent_knots, self.decoder.cfg.kl_latent_dim, cfg.horizon, cfg.interpolation)
        return Plan(anchor_q=q, latent_spline=lat, noise=noise, plain=plain)

    def reset(self, state: EnvState) -> None:
        self.nominal = self.initial_plan(state.q)
        self.iteration = 0
        self.time = 0.0

    # -- control evaluation ---------------------------------------------
    def query_step(self, plan: Plan, t: float) -> int:
        n = self.decoder.cfg.n if self.decoder is not None else self.steps
        return int(min(max(round((t - plan.anchor_time) / self.dt), 0), n - 1))

    def slot_duration(self) -> float:
        cfg = self.decoder.cfg
        return latent_time(1, cfg.n, cfg.m) * self.dt if cfg.m > 1 else cfg.n * self.dt

    def kl_latents(self, plan_splines: np.ndarray, times: np.ndarray) -> np.ndarray:
        cfg = self.decoder.cfg
        slot_t = np.array([latent_time(k, cfg.n, cfg.m) for k in range(cfg.m)]) * self.dt
        return evaluate(times, plan_splines, slot_t, self.cfg.interpolation)

    def controls(self, plans: Sequence[Plan], q_t: np.ndarray | None = None) -> np.ndarray:
        """Control sequences ``(len(plans), H, D)`` for the horizon starting at each plan's anchor.

        All plans must share knot times (true for candidates of one nominal).
        """
        H, D, Dl = self.steps, self.dof, self.latent_dof
        N = len(plans)
        rel_t = np.arange(H) * self.dt
        U = np.zeros((N, H, D))
        p0 = plans[0]
        anchor = p0.anchor_q if q_t is None else np.asarray(q_t, dtype=np.float64)
        if self.cfg.mode == "latent_vq":
            n = self.decoder.cfg.n
            off = int(round(p0.phase / self.dt)) if self.cfg.reanchor == "slot" else 0
            steps = np.minimum(np.arange(H) + off, n - 1)
            lat = np.stack([p.latents for p in plans])
            uniq, inverse = np.unique(lat, axis=0, return_inverse=True)
            dec = self.decoder.decode_codes(anchor[:Dl], uniq)
            U[:, :, :Dl] = dec[np.asarray(inverse).reshape(-1)][:, steps]
        elif self.cfg.mode == "latent_kl_spline":
            n = self.decoder.cfg.n
            steps = np.minimum(np.arange(H), n - 1)
            knots = np.stack([p.latent_spline.knot_values for p in plans])
            z = self.kl_latents(knots, p0.latent_spline.knot_times)
            dec = self.decoder.decode_latents(anchor[:Dl], z)
            U[:, :, :Dl] = dec[:, steps]
        if p0.plain is not None:
            vals = np.stack([p.plain.knot_values for p in plans])
            U[:, :, Dl:] += evaluate(p0.plain.knot_times, vals, rel_t, self.cfg.interpolation)
        if p0.noise is not None:
            vals = np.stack([p.noise.knot_values for p in plans])
            U += evaluate(p0.noise.knot_times, vals, rel_t, self.cfg.interpolation)
        return U

    def plan_control(self, plan: Plan, t: float, q_t: np.ndarray | None = None) -> np.ndarray:
        """Control at absolute time ``t``; times past the horizon clamp to the last step."""
        j = min(max(int(round((t - plan.anchor_time) / self.dt)), 0), self.steps - 1)
        return self.controls([plan], q_t)[0, j]

    # -- sampling --------------------------------------------------------
    def candidate_rng(self, i: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, self.iteration, i])

    def sample_candidates(self, nominal: Plan) -> Candidates:
        """N perturbed plans plus the unmodified nominal as the final entry."""
        cfg = self.cfg
        plans, flips, changed = [], [], []
        for i in range(cfg.n_samples):
            rng = self.candidate_rng(i)
            kw = {}
            reset_noise = False
            if cfg.mode == "latent_vq":
                m = len(nominal.latents)
                flip = rng.random(m) < cfg.flip_prob
                draws = rng.integers(self.decoder.K, size=m)
                lat = np.where(flip, draws, nominal.latents)
                reset_noise = bool(np.any(lat != nominal.latents))
                flips.append(flip)
                changed.append(reset_noise)
                kw["latents"] = lat
            elif cfg.mode == "latent_kl_spline":
                ls = nominal.latent_spline
                kw["latent_spline"] = ls.with_values(
                    ls.knot_values + rng.normal(0.0, cfg.latent_noise_std, ls.knot_values.shape))
            if nominal.noise is not None:
                base = 0.0 if reset_noise else nominal.noise.knot_values
                shape = nominal.noise.knot_values.shape
                kw["noise"] = nominal.noise.with_values(base + rng.normal(0.0, cfg.noise_std, shape))
            if nominal.plain is not None:
                pv = nominal.plain.knot_values
                kw["plain"] = nominal.plain.with_values(pv + rng.normal(0.0, cfg.noise_std, pv.shape))
            plans.append(nominal.replace(**kw))
        plans.append(nominal)
        if cfg.mode == "latent_vq":
            return Candidates(plans, np.array(flips), np.array(changed))
        return Candidates(plans)

    # -- time shift ------------------------------------------------------
    def shift_plan(self, plan: Plan, dt: float, q_t: np.ndarray) -> Plan:
        kw: dict = {"anchor_q": np.asarray(q_t, dtype=np.float64), "anchor_time": plan.anchor_time + dt}
        rotated = False
        for name in ("noise", "plain", "latent_spline"):
            sp = getattr(plan, name)
            if sp is not None:
                kw[name] = shift(sp, dt)
        if plan.latents is not None:
            slot = self.slot_duration()
            phase = plan.phase + dt
            lat = plan.latents.copy()
            while phase >= slot - 1e-9:
                lat = np.concatenate([lat[1:], lat[-1:]])
                phase -= slot
                rotated = True
            kw.update(latents=lat, phase=phase)
            if self.cfg.reanchor == "slot" and not rotated:
                kw["anchor_q"] = plan.anchor_q
        return plan.replace(**kw)

    # -- rollouts --------------------------------------------------------
    def rollout_costs(self, state: EnvState, plans: Sequence[Plan]) -> np.ndarray:
        U = self.controls(plans)
        return rollout_controls(self.env, state, U)

    def step(self, state: EnvState, dt: float | None = None) -> tuple[np.ndarray, StepInfo]:
        """One receding-horizon iteration; returns the control to apply now."""
        if self.nominal is None:
            raise RuntimeError("planner not reset")
        dt = self.dt if dt is None else dt
        if self.iteration > 0:
            self.time += dt
            self.nominal = self.shift_plan(self.nominal, dt, state.q)
        else:
            self.nominal = self.nominal.replace(anchor_q=np.asarray(state.q, dtype=np.float64))
        cand = self.sample_candidates(self.nominal)
        U = self.controls(cand.plans)
        costs = rollout_controls(self.env, state, U)
        nom = len(cand.plans) - 1
        best = costs.min()
        if not np.isfinite(best):
            warnings.warn("all candidate rollouts diverged; keeping the nominal plan", RuntimeWarning)
            chosen = nom
        elif costs[nom] == best:
            chosen = nom
        else:
            chosen = int(np.flatnonzero(costs == best)[0])
        self.nominal = cand.plans[chosen]
        self.iteration += 1
        info = StepInfo(control=U[chosen, 0], costs=costs, chosen=chosen,
                        chosen_cost=float(costs[chosen]), nominal_cost=float(costs[nom]))
        return U[chosen, 0], info


def rollout_controls(env, state: EnvState, U: np.ndarray) -> np.ndarray:
    """Accumulated running plus terminal cost of each control sequence ``U[i]``.

    Rollouts whose state or cost turns non-finite score ``+inf``.
    """
    N, H, _ = U.shape
    s = state.tile(N)
    total = np.zeros(N)
    with np.errstate(all="ignore"):
        for j in range(H):
            u = U[:, j]
            bad = ~np.all(np.isfinite(u), -1)
            s, c = env.transition(s, np.where(bad[:, None], s.q, u))
            total += np.where(bad, np.inf, c)
        total += env.terminal_cost(s)
    total[~np.isfinite(total)] = np.inf
    total[~np.all(np.isfinite(s.q), -1)] = np.inf
    return total


def rollout_cost(env, state: EnvState, planner: Planner, plan: Plan) -> float:
    return float(planner.rollout_costs(state, [plan])[0])


@dataclass
class EpisodeResult:
    cost: float
    success_rate: float
    wall_ms_per_step: float
    step_costs: list[float] = field(default_factory=list)
    elitism_violations: int = 0


def success_metric(env, state: EnvState, n_steps: int, in_tol_steps: int) -> float:
    if state.successes is not None:
        possible = max(1, n_steps // env.spec.hold_steps)
        return float(state.successes) / possible
    return in_tol_steps / n_steps


def run_episode(env, planner: Planner, seed: int, n_steps: int | None = None) -> EpisodeResult:
    n_steps = env.episode_steps if n_steps is None else n_steps
    state = env.reset(seed)
    planner.reset(state)
    total, costs, violations, in_tol = 0.0, [], 0, 0
    t0 = time.perf_counter()
    for _ in range(n_steps):
        u, info = planner.step(state)
        if info.chosen_cost > info.nominal_cost:
            violations += 1
        state, c = env.transition(state, u)
        total += float(c)
        costs.append(float(c))
        if hasattr(env, "tracking_error") and float(env.tracking_error(state)) < env.spec.hold_tol:
            in_tol += 1
    wall = (time.perf_counter() - t0) * 1000.0 / n_steps
    return EpisodeResult(total, success_metric(env, state, n_steps, in_tol), wall, costs, violations)


SWEEP_FIELDS = ("mode", "n_traj", "seed", "episode_cost", "success_rate", "wall_ms_per_step")


def budget_sweep(env, planner_cfgs: Iterable[PlannerConfig], n_list: Sequence[int], seeds: Sequence[int],
                 decoders: dict[str, FrozenDecoder | None], out_csv: str | Path | None = None,
                 n_steps: int | None = None,
                 progress: Callable[[dict], None] | None = None) -> list[dict]:
    """Episode costs for every (mode, N, seed); optionally written as CSV."""
    rows = []
    for base in planner_cfgs:
        for n in n_list:
            for seed in seeds:
                cfg = dataclasses.replace(base, n_samples=int(n), seed=int(seed))
                planner = Planner(env, cfg, decoders.get(cfg.mode))
                res = run_episode(env, planner, seed=int(seed), n_steps=n_steps)
                row = {"mode": cfg.mode, "n_traj": int(n), "seed": int(seed), "episode_cost": res.cost,
                       "success_rate": res.success_rate, "wall_ms_per_step": res.wall_ms_per_step}
                rows.append(row)
                if progress:
                    progress(row)
    if out_csv is not None:
        write_sweep_csv(rows, out_csv)
    return rows


def write_sweep_csv(rows: list[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in SWEEP_FIELDS})


def summarize(rows: list[dict]) -> dict[tuple[str, int], tuple[float, float]]:
    """(mode, N) -> (mean cost, std cost)."""
    out: dict[tuple[str, int], list[float]] = {}
    for r in rows:
        out.setdefault((r["mode"], r["n_traj"]), []).append(r["episode_cost"])
    return {k: (float(np.mean(v)), float(np.std(v))) for k, v in out.items()}
