"""Train a small chunk autoencoder and poke at its latent space.

Runs in well under a minute on one core: ten minutes of corpus, a few epochs.
"""

import numpy as np
import torch

from chunkspace.corpus import SynergyGenerator, chunk_arrays, generate_corpus
from chunkspace.model import FrozenDecoder, ModelConfig
from chunkspace.training import TrainConfig, code_usage, train

corpus = generate_corpus(SynergyGenerator(seed=7), duration_s=600.0)
cfg = ModelConfig()  # D=11, n=50, m=5 tokens, K=4 codes of width 16
result = train(cfg, corpus, TrainConfig(epochs=8, stride=10),
               on_epoch=lambda r: print(f"epoch {r['epoch']}  val L1 {r['val_l1']:.4f}"))
model, norm = result.model, result.normalizer

_, val = corpus.split(0.1)
q0, act = (torch.tensor(a, dtype=torch.float32) for a in chunk_arrays(norm.apply(val), cfg.n, 10))
print("code usage on validation:", np.round(code_usage(model, q0, act), 3))

# Every chunk is now one of K**m = 1024 token strings.
with torch.no_grad():
    _, idx = model.encode(q0[:5], act[:5])
print("token strings of five validation chunks:\n", idx.numpy())

# Token k only influences steps at or after its time k*n/m, so swapping the
# last token leaves the first 40 steps untouched.
dec = FrozenDecoder(model)
q = q0[0].double().numpy()
a = dec.decode_codes(q, np.array([0, 1, 2, 3, 0]))[0]
b = dec.decode_codes(q, np.array([0, 1, 2, 3, 3]))[0]
print("first step that differs after swapping token 4:", int(np.argmax(np.abs(a - b).max(1) > 0)))

# Decoding one code in every slot gives that code's "primitive" from posture q.
for code in range(dec.K):
    chunk = dec.decode_codes(q, np.full(cfg.m, code))[0]
    print(f"code {code}: net joint motion over the chunk {np.abs(chunk[-1] - chunk[0]).sum():.3f}")
