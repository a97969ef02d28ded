"""Synthetic motion corpus and the chunk view the autoencoder trains on."""

import numpy as np

from chunkspace.corpus import Normalizer, SynergyGenerator, chunk_count, chunk_arrays, generate_corpus

# Five minutes of 11-joint "hand" motion at 50 Hz. A few latent synergies
# drive all joints, so the motion lives on a low-dimensional manifold.
gen = SynergyGenerator(seed=7)
seq = generate_corpus(gen, duration_s=300.0, rate_hz=50.0)
print("frames x joints:", seq.frames.shape)
print("joint ranges:", np.round(seq.frames.min(0), 2), np.round(seq.frames.max(0), 2))

# Fit the normalizer on the training split only, then map both splits into [-1, 1].
train, val = seq.split(0.1)
norm = Normalizer.fit(train)
train_n, val_n = norm.apply(train), norm.apply(val)
print("normalized train range:", train_n.frames.min().round(3), train_n.frames.max().round(3))

# A chunk is the posture at t plus the next 50 targets.
n = 50
print("chunks at stride 1:", chunk_count(len(train_n), n, 1))
q0, act = chunk_arrays(train_n, n, stride=25)
print("q0", q0.shape, "actions", act.shape)

# Synergies show up as a fast-decaying singular spectrum.
sv = np.linalg.svd(train_n.frames - train_n.frames.mean(0), compute_uv=False)
print("variance explained by first 3 directions:", round(float((sv[:3] ** 2).sum() / (sv ** 2).sum()), 3))
