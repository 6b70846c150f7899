"""Reverse-process generation with self-conditioning, clamping and MBR selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .metrics import bleu
from .schedule import NoiseSchedule, posterior_mean_var
from .textspace import clamp_to_table, round_to_tokens, strip_ids


@dataclass
class MBRConfig:
    S: int = 10
    metric: str = "bleu"

    def __post_init__(self):
        if self.S < 1:
            raise ValueError("MBR candidate count S must be >= 1")
        if self.metric != "bleu":
            raise ValueError(f"unsupported MBR metric {self.metric!r}")


@dataclass
class DenoiseState:
    x_t: torch.Tensor
    x0_prev: torch.Tensor
    t: int
    generators: list


def candidate_generator(seed: int, input_index: int, candidate: int) -> torch.Generator:
    """Noise stream for one candidate, a pure function of its coordinates."""
    ss = np.random.SeedSequence(seed, spawn_key=(input_index, candidate))
    return torch.Generator().manual_seed(int(ss.generate_state(1, np.uint64)[0] >> 1))


def _row_noise(generators, shape, dtype):
    return torch.stack([torch.randn(shape, generator=g, dtype=dtype) for g in generators])


def reverse_step(model, sched: NoiseSchedule, state: DenoiseState, w_c, *, clamp: bool = True,
                 cond_cache=None, hook=None) -> DenoiseState:
    """One ancestral step ``x_t -> x_{t-1}`` using the predicted x0."""
    t = state.t
    if t < 1:
        raise ValueError(f"cannot step from t={t}")
    x0_prev = state.x0_prev if model.cfg.selfcond != "none" else None
    x0_hat = model(state.x_t, x0_prev, w_c, t, cond_cache=cond_cache)
    if hook is not None:
        hook(t, state.x0_prev, x0_hat)
    x0_used = clamp_to_table(x0_hat, model.rounding_table) if clamp else x0_hat
    mean, var = posterior_mean_var(sched, state.x_t, x0_used, t)
    if t > 1:
        noise = _row_noise(state.generators, state.x_t.shape[1:], state.x_t.dtype)
        x_next = mean + float(np.sqrt(var)) * noise
    else:
        x_next = mean
    return DenoiseState(x_t=x_next, x0_prev=x0_hat, t=t - 1, generators=state.generators)


def mbr_select(candidates, metric=None) -> int:
    """Index of the candidate with the highest summed similarity to the others."""
    if not candidates:
        raise ValueError("mbr_select needs at least one candidate")
    metric = metric or (lambda h, r: bleu(h, [r]))
    best, best_score = 0, None
    for i, cand in enumerate(candidates):
        score = sum(metric(cand, other) for j, other in enumerate(candidates) if j != i)
        if best_score is None or score > best_score:
            best, best_score = i, score
    return best


@torch.no_grad()
def sample_x0(model, sched: NoiseSchedule, w_c, generators, *, clamp: bool = True, hook=None):
    """Run the full reverse chain for each row of ``w_c`` and return the final x0."""
    model.eval()
    cfg = model.cfg
    dtype = model.target_emb.weight.dtype
    x_T = _row_noise(generators, (cfg.k_x, cfg.d_x), dtype)
    cond_cache = model.encode(w_c) if cfg.arch == "diffu-ed" else None
    state = DenoiseState(x_t=x_T, x0_prev=torch.zeros_like(x_T), t=sched.T, generators=generators)
    while state.t >= 1:
        state = reverse_step(model, sched, state, w_c, clamp=clamp, cond_cache=cond_cache, hook=hook)
    return state.x_t


def generate(model, sched: NoiseSchedule, vocab, w_c, *, S: int = 10, seed: int = 0,
             index_offset: int = 0, clamp: bool = True, max_rows: int = 1024, hook=None):
    """Sample ``S`` candidates per condition row and pick one by MBR.

    Returns a list of ``(selected_ids, candidate_ids)`` per row of ``w_c``.
    Candidate noise depends only on ``(seed, index_offset + row, candidate)``.
    """
    MBRConfig(S=S)
    n = w_c.shape[0]
    rows = [(i, s) for i in range(n) for s in range(S)]
    cands: list[list[int]] = []
    for lo in range(0, len(rows), max_rows):
        chunk = rows[lo:lo + max_rows]
        gens = [candidate_generator(seed, index_offset + i, s) for i, s in chunk]
        w_chunk = w_c[[i for i, _ in chunk]]
        x0 = sample_x0(model, sched, w_chunk, gens, clamp=clamp, hook=hook)
        _, ids = round_to_tokens(x0, model.rounding_table)
        cands.extend(strip_ids(r.tolist(), vocab) for r in ids)
    out = []
    for i in range(n):
        group = cands[i * S:(i + 1) * S]
        out.append((group[mbr_select(group)], group))
    return out
