"""Self-conditioning: combining x_t with the previous x0 estimate."""

from __future__ import annotations

import torch
from torch import nn

KINDS = ("none", "a-type", "c-type")


class SelfCondCombiner(nn.Module):
    """Merge the noisy input with the previous step's x0 estimate.

    ``none`` ignores the estimate, ``a-type`` adds it, ``c-type`` concatenates
    along the hidden axis and projects ``2*d -> d``.  The c-type projection
    starts as ``[I ; 0]`` so a fresh model behaves like one without
    self-conditioning.
    """

    def __init__(self, kind: str, d: int):
        super().__init__()
        if kind not in KINDS:
            raise ValueError(f"unknown self-conditioning kind {kind!r}; expected one of {KINDS}")
        self.kind = kind
        self.d = d
        self.proj = None
        if kind == "c-type":
            self.proj = nn.Linear(2 * d, d)
            with torch.no_grad():
                self.proj.weight.zero_()
                self.proj.weight[:, :d].copy_(torch.eye(d))
                self.proj.bias.zero_()

    def forward(self, x_t: torch.Tensor, x0_prev: torch.Tensor | None) -> torch.Tensor:
        if self.kind == "none":
            return x_t
        if x0_prev is None:
            raise ValueError(f"{self.kind} self-conditioning requires x0_prev (zeros for the fallback)")
        if x0_prev.shape != x_t.shape:
            raise ValueError(f"shape mismatch: x_t {tuple(x_t.shape)} vs x0_prev {tuple(x0_prev.shape)}")
        if self.kind == "a-type":
            return x_t + x0_prev
        return self.proj(torch.cat([x_t, x0_prev], dim=-1))


def training_two_pass(model, x_t, w_c, t, rng, zero_prob: float = 0.5):
    """Estimate x0 under the self-conditioning training protocol.

    With probability ``zero_prob`` a single pass is run with a zero estimate.
    Otherwise a first pass (no gradient) produces an estimate which is fed
    to a second pass; only the second pass is differentiated.
    """
    if model.cfg.selfcond == "none":
        return model(x_t, None, w_c, t)
    zeros = torch.zeros_like(x_t)
    if rng.random() < zero_prob:
        return model(x_t, zeros, w_c, t)
    with torch.no_grad():
        first = model(x_t, zeros, w_c, t)
    return model(x_t, first.detach(), w_c, t)
