"""The chunk-selection wrapper, one step at a time, then a short PPO run."""

import numpy as np

from chunkspace.envs import EnvSpec, ReachHoldEnv
from chunkspace.model import ChunkModel, FrozenDecoder, ModelConfig
from chunkspace.rl import AugmentedAction, ChunkedEnv, RLConfig, train_policy

spec = EnvSpec()
env = ReachHoldEnv(spec, lambda rng: rng.uniform(-0.6, 0.6, spec.dof))
# An untrained decoder is enough to watch the state machine. Its chunks are
# arbitrary, so expect the wrapped agent to do far worse than the raw one below.
decoder = FrozenDecoder(ChunkModel(ModelConfig(), seed=0))
wrap = ChunkedEnv(env, decoder, n_c=10)
rng = np.random.default_rng(0)

s = wrap.reset(seed=0)
print("selection state at reset:", np.round(s.select, 3))
# Push code 2 until its accumulator crosses 1; each step also applies the
# active chunk's row plus a (zero) residual.
push = AugmentedAction(np.zeros(spec.dof), np.array([0.0, 0.0, 0.3, 0.0]))
for t in range(6):
    s, cost, fired = wrap.step(s, push, rng)
    print(f"t={t + 1}  select {np.round(s.select, 2)}  trigger {bool(fired)}  chunk starts at {int(s.chunk_start)}")
    if fired:
        print("  new chunk decoded from code 2; accumulator redrawn from U(0,1)")

# The observation carries the env view, the current feedforward row and the accumulator.
print("observation length:", wrap.observe(s).shape[0], "=", env.obs_dim, "+", spec.dof, "+", wrap.K)

# A few PPO iterations on the wrapped task and on the raw task.
for chunked in (True, False):
    res = train_policy(env, RLConfig(total_steps=40_000, n_envs=16), chunked, decoder if chunked else None)
    last = [r for r in res.curve if r["mean_return"] is not None][-1]
    print(f"chunked={chunked}: {last['env_steps']} steps, mean return {last['mean_return']:.1f}, "
          f"success rate {last['success_rate']:.2f}")
