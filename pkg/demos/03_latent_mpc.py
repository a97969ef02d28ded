"""Predictive-sampling MPC in token space versus a plain spline planner.

Pass a trained checkpoint (``chunkspace train``) to plan with a real decoder:

    python demos/03_latent_mpc.py runs/model.ckpt
"""

import sys

import numpy as np

from chunkspace.checkpoint import load_model
from chunkspace.model import FrozenDecoder
from chunkspace.mpc import Planner, PlannerConfig, run_episode
from chunkspace.pipeline import RunConfig, build_corpus, tracking_env

if len(sys.argv) < 2:
    sys.exit(__doc__)
model, norm, _ = load_model(sys.argv[1])
cfg = RunConfig()
env = tracking_env(cfg, norm, build_corpus(cfg.corpus))
decoder = FrozenDecoder(model)

# The planner keeps a nominal plan (5 tokens plus a noise spline), samples N
# perturbed copies, rolls each out for one second and keeps the cheapest.
# The nominal always competes, so the executed plan never gets worse.
planner = Planner(env, PlannerConfig(mode="latent_vq", n_samples=20), decoder)
state = env.reset(0)
planner.reset(state)
for t in range(5):
    u, info = planner.step(state)
    print(f"step {t}: chose candidate {info.chosen:2d}  cost {info.chosen_cost:8.3f}  "
          f"nominal {info.nominal_cost:8.3f}  tokens {planner.nominal.latents}")
    state = env.step(state, u)

# Short episodes at two budgets for both planners.
for mode in ("latent_vq", "baseline_spline"):
    for n in (10, 40):
        p = Planner(env, PlannerConfig(mode=mode, n_samples=n), decoder if mode == "latent_vq" else None)
        res = run_episode(env, p, seed=0, n_steps=100)
        print(f"{mode:16s} N={n:2d}  cost {res.cost:8.2f}  {res.wall_ms_per_step:.1f} ms/step")
