"""Finite-difference gradient oracle shared by the gradient tests."""

import numpy as np
import torch


def fd_max_rel_error(loss_fn, params, eps=1e-5, floor=1e-6):
    """Largest relative gap between autograd and central differences over every parameter entry."""
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [torch.zeros_like(p) if p.grad is None else p.grad.detach().clone() for p in params]
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
                num = (up - down) / (2 * eps)
                a = float(g.view(-1)[i])
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst


def n_params(params):
    return int(sum(p.numel() for p in params))


def tiny_model_config(**kw):
    from chunkspace.model import ModelConfig
    base = dict(dof=2, n=4, m=2, K=3, d_latent=2, d_model=4, layers=1, heads=2, d_ff=4, kl_latent_dim=2)
    return ModelConfig(**(base | kw))


def as_numpy(t):
    return np.asarray(t.detach().numpy())


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok
