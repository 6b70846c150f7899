"""Shared micro-config finite-difference check of the training loss."""

import numpy as np
import torch

from spiraldiff.nnet import DenoiseModel, ModelConfig
from spiraldiff.schedule import build_sqrt_schedule
from spiraldiff.train import loss_vlb

from oracles import fd_grad, rel_err

MICRO = dict(L_e=1, L_d=1, d_c=8, d_x=4, heads=2, k_c=3, k_x=3, T=20, ffn_mult=2)
VOCAB = 7


def loss_gradient_errors(arch="sia", selfcond="c-type", tied_rounding=True):
    """Relative error between autograd and central differences, per parameter tensor."""
    torch.manual_seed(0)
    cfg = ModelConfig(**{**MICRO, "arch": arch, "selfcond": selfcond, "tied_rounding": tied_rounding})
    model = DenoiseModel(cfg, VOCAB).double()
    sched = build_sqrt_schedule(cfg.T)
    w_c = torch.tensor([[4, 5, 2], [6, 2, 0]])
    w_x = torch.tensor([[5, 4, 2], [6, 6, 2]])
    t = torch.tensor([1, 13])
    weights = np.array([0.7, 1.3])

    def loss():
        value, _ = loss_vlb(model, sched, w_c, w_x, t, generator=torch.Generator().manual_seed(5),
                            rng=np.random.default_rng(5), sigma0=0.1, zero_prob=1.0,
                            weights=weights)
        return value

    model.zero_grad()
    loss().backward()
    named = [(n, p) for n, p in model.named_parameters() if p.grad is not None]
    numeric = fd_grad(loss, [p for _, p in named])
    return {n: rel_err(p.grad, g, floor=1e-6) for (n, p), g in zip(named, numeric)}
