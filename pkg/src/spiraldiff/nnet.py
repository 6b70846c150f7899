"""Denoising network: conditional encoder, target decoder and their interleaving."""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass
import math
from typing import NamedTuple

import torch
from torch import nn
import torch.nn.functional as F

from .selfcond import KINDS as SELFCOND_KINDS, SelfCondCombiner

ARCHS = ("diffu-ed", "cace-no-si", "sia")


@dataclass
class ModelConfig:
    L_e: int = 2
    L_d: int = 2
    d_c: int = 64
    d_x: int = 32
    heads: int = 4
    ffn_mult: int = 4
    arch: str = "sia"
    selfcond: str = "c-type"
    T: int = 200
    k_c: int = 16
    k_x: int = 16
    tied_rounding: bool = True

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.selfcond not in SELFCOND_KINDS:
            raise ValueError(f"selfcond must be one of {SELFCOND_KINDS}, got {self.selfcond!r}")
        if self.L_e < 0 or self.L_d < 1:
            raise ValueError("need L_e >= 0 and L_d >= 1")
        if self.arch == "sia" and self.L_e < 1:
            raise ValueError("arch=sia requires L_e >= 1")
        if min(self.d_c, self.d_x, self.heads, self.ffn_mult, self.T, self.k_c, self.k_x) < 1:
            raise ValueError("dimensions, heads, T and lengths must be positive")
        if self.d_c % self.heads or self.d_x % self.heads:
            raise ValueError(f"heads={self.heads} must divide d_c={self.d_c} and d_x={self.d_x}")

    def to_dict(self) -> dict:
        return asdict(self)


# full-scale preset: six encoder and six decoder layers, 768/128 widths, T=2000
FULL_SCALE = dict(L_e=6, L_d=6, d_c=768, d_x=128, heads=8, T=2000, k_c=32, k_x=32)


class PlanStep(NamedTuple):
    """One layer execution.

    ``kind`` is ``"E"`` (encoder layer, ``source`` = decoder depth n of the
    x^n it attends to) or ``"D"`` (decoder layer, ``source`` = encoder depth
    m of the c^m it attends to).
    """

    kind: str
    layer: int
    source: int

    def __repr__(self):
        ref = "x" if self.kind == "E" else "c"
        return f"{self.kind}{self.layer}({ref}{self.source})"


def plan_interleave(L_e: int, L_d: int) -> list[PlanStep]:
    """Spiral ordering of encoder and decoder layers.

    Equal depths alternate E(m), D(m).  A deeper decoder finishes its extra
    layers against the last encoder output; a deeper encoder runs its extra
    leading layers against the decoder input before interleaving starts.
    """
    if L_e < 1 or L_d < 1:
        raise ValueError(f"plan_interleave needs L_e >= 1 and L_d >= 1, got ({L_e}, {L_d})")
    lead = max(L_e - L_d, 0)
    order = [("E", m) for m in range(lead)]
    for j in range(min(L_e, L_d)):
        order += [("E", lead + j), ("D", j)]
    order += [("D", n) for n in range(L_e, L_d)]
    return _resolve_sources(order)


def plan_sequential(L_e: int, L_d: int) -> list[PlanStep]:
    """All encoder layers against x^0, then all decoder layers against c^{L_e}."""
    return _resolve_sources([("E", m) for m in range(L_e)] + [("D", n) for n in range(L_d)])


def _resolve_sources(order) -> list[PlanStep]:
    enc_depth = dec_depth = 0
    steps = []
    for kind, layer in order:
        if kind == "E":
            steps.append(PlanStep("E", layer, dec_depth))
            enc_depth += 1
        else:
            steps.append(PlanStep("D", layer, enc_depth))
            dec_depth += 1
    return steps


def check_plan(plan, L_e: int, L_d: int) -> None:
    """Raise if ``plan`` does not run every layer once in order with available inputs."""
    enc_depth = dec_depth = 0
    for step in plan:
        if step.kind == "E":
            if step.layer != enc_depth or not 0 <= step.source <= dec_depth:
                raise ValueError(f"invalid plan step {step!r}")
            enc_depth += 1
        elif step.kind == "D":
            if step.layer != dec_depth or not 0 <= step.source <= enc_depth:
                raise ValueError(f"invalid plan step {step!r}")
            dec_depth += 1
        else:
            raise ValueError(f"invalid plan step {step!r}")
    if (enc_depth, dec_depth) != (L_e, L_d):
        raise ValueError(f"plan covers ({enc_depth}, {dec_depth}) layers, expected ({L_e}, {L_d})")


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with queries of width ``d_q`` and keys/values
    projected from a source of width ``d_src`` into ``d_q``."""

    def __init__(self, d_q: int, d_src: int, heads: int):
        super().__init__()
        if d_q % heads:
            raise ValueError(f"heads={heads} must divide d_q={d_q}")
        self.heads = heads
        self.w_q = nn.Linear(d_q, d_q)
        self.w_k = nn.Linear(d_src, d_q)
        self.w_v = nn.Linear(d_src, d_q)
        self.w_o = nn.Linear(d_q, d_q)

    def forward(self, q_in, kv_in, kv_mask=None):
        B, k_q, d_q = q_in.shape
        k_v = kv_in.shape[1]
        h, dh = self.heads, d_q // self.heads
        q = self.w_q(q_in).view(B, k_q, h, dh).transpose(1, 2)
        k = self.w_k(kv_in).view(B, k_v, h, dh).transpose(1, 2)
        v = self.w_v(kv_in).view(B, k_v, h, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if kv_mask is not None:
            if kv_mask.shape != (B, k_v):
                raise ValueError(f"mask shape {tuple(kv_mask.shape)} != {(B, k_v)}")
            if not bool(kv_mask.any(-1).all()):
                raise ValueError("attention row with every key masked")
            scores = scores.masked_fill(~kv_mask[:, None, None, :], float("-inf"))
        attn = scores.softmax(-1)
        out = (attn @ v).transpose(1, 2).reshape(B, k_q, d_q)
        return self.w_o(out)


def cross_attention(q_in, kv_in, attn: MultiHeadAttention, kv_mask=None):
    """Attention from ``q_in`` onto ``kv_in``; 2-D inputs are treated as batch 1."""
    if q_in.dim() == 2:
        mask = None if kv_mask is None else kv_mask.unsqueeze(0)
        return attn(q_in.unsqueeze(0), kv_in.unsqueeze(0), mask).squeeze(0)
    return attn(q_in, kv_in, kv_mask)


class FeedForward(nn.Module):
    def __init__(self, d: int, mult: int):
        super().__init__()
        self.up = nn.Linear(d, mult * d)
        self.down = nn.Linear(mult * d, d)

    def forward(self, x):
        return self.down(F.gelu(self.up(x)))


class EncoderLayer(nn.Module):
    """Post-LN encoder layer; with ``d_ref`` set it becomes a CACE layer that
    also cross-attends to the target stream."""

    def __init__(self, d: int, heads: int, ffn_mult: int, d_ref: int | None = None):
        super().__init__()
        self.self_attn = MultiHeadAttention(d, d, heads)
        self.norm_self = nn.LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, d_ref, heads) if d_ref else None
        self.norm_cross = nn.LayerNorm(d) if d_ref else None
        self.ffn = FeedForward(d, ffn_mult)
        self.norm_ffn = nn.LayerNorm(d)

    def forward(self, c, c_mask, x_ref=None, x_mask=None):
        c = self.norm_self(c + self.self_attn(c, c, c_mask))
        if self.cross_attn is not None:
            if x_ref is None:
                raise ValueError("CACE layer needs a target reference")
            c = self.norm_cross(c + self.cross_attn(c, x_ref, x_mask))
        return self.norm_ffn(c + self.ffn(c))


class DecoderLayer(nn.Module):
    """Post-LN target decoder layer with full (non-causal) self-attention."""

    def __init__(self, d: int, heads: int, ffn_mult: int, d_ref: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(d, d, heads)
        self.norm_self = nn.LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, d_ref, heads)
        self.norm_cross = nn.LayerNorm(d)
        self.ffn = FeedForward(d, ffn_mult)
        self.norm_ffn = nn.LayerNorm(d)

    def forward(self, x, c_ref, c_mask):
        x = self.norm_self(x + self.self_attn(x, x))
        x = self.norm_cross(x + self.cross_attn(x, c_ref, c_mask))
        return self.norm_ffn(x + self.ffn(x))


def sinusoid(t, d: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sin half then cos half over geometric frequencies; odd ``d`` gets a zero pad."""
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = d // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if d % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class TimestepEmbedding(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.d = d
        self.mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.SiLU(), nn.Linear(4 * d, d))

    def forward(self, t):
        ref = self.mlp[0].weight
        return self.mlp(sinusoid(t, self.d).to(dtype=ref.dtype, device=ref.device))


class DenoiseModel(nn.Module):
    """Predicts x0 from (x_t, previous x0 estimate, condition tokens, t).

    ``stats`` counts forward calls and encoder rows processed so samplers
    and tests can check how often each stack runs.
    """

    def __init__(self, cfg: ModelConfig, vocab_size: int, pad_id: int = 0):
        super().__init__()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.pad_id = pad_id
        self.target_emb = nn.Embedding(vocab_size, cfg.d_x)
        self.cond_emb = nn.Embedding(vocab_size, cfg.d_c)
        self.lm_head = None if cfg.tied_rounding else nn.Linear(cfg.d_x, vocab_size, bias=False)
        self.pos_x = nn.Embedding(cfg.k_x, cfg.d_x)
        self.pos_c = nn.Embedding(cfg.k_c, cfg.d_c)
        self.time_x = TimestepEmbedding(cfg.d_x)
        # diffu-ed keeps the encoder timestep-free so its output can be cached
        self.time_c = TimestepEmbedding(cfg.d_c) if cfg.arch != "diffu-ed" else None
        self.norm_x_in = nn.LayerNorm(cfg.d_x)
        self.norm_c_in = nn.LayerNorm(cfg.d_c)
        self.combiner = SelfCondCombiner(cfg.selfcond, cfg.d_x)
        d_ref = None if cfg.arch == "diffu-ed" else cfg.d_x
        self.encoder = nn.ModuleList(
            EncoderLayer(cfg.d_c, cfg.heads, cfg.ffn_mult, d_ref) for _ in range(cfg.L_e)
        )
        self.decoder = nn.ModuleList(
            DecoderLayer(cfg.d_x, cfg.heads, cfg.ffn_mult, cfg.d_c) for _ in range(cfg.L_d)
        )
        self.head = nn.Linear(cfg.d_x, cfg.d_x)
        nn.init.normal_(self.cond_emb.weight, std=0.02)
        nn.init.normal_(self.pos_x.weight, std=0.02)
        nn.init.normal_(self.pos_c.weight, std=0.02)
        self.stats = Counter()

    @property
    def rounding_table(self) -> torch.Tensor:
        return self.target_emb.weight if self.lm_head is None else self.lm_head.weight

    def default_plan(self) -> list[PlanStep]:
        if self.cfg.arch == "sia":
            return plan_interleave(self.cfg.L_e, self.cfg.L_d)
        return plan_sequential(self.cfg.L_e, self.cfg.L_d)

    def _t_vector(self, t, batch: int) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() == 1:
            t = t.expand(batch)
        if t.numel() != batch:
            raise ValueError(f"got {t.numel()} timesteps for batch of {batch}")
        if int(t.min()) < 1 or int(t.max()) > self.cfg.T:
            raise ValueError(f"timestep out of range [1, {self.cfg.T}]")
        return t

    def embed_cond(self, w_c, t=None):
        k = w_c.shape[1]
        if k > self.cfg.k_c:
            raise ValueError(f"condition length {k} exceeds k_c={self.cfg.k_c}")
        c = self.cond_emb(w_c) + self.pos_c.weight[:k]
        if self.time_c is not None:
            c = c + self.time_c(t)[:, None, :]
        return self.norm_c_in(c)

    def cond_mask(self, w_c):
        return w_c != self.pad_id

    def encode(self, w_c):
        """Timestep-free encoder pass (diffu-ed only); result can be reused for every t."""
        if self.cfg.arch != "diffu-ed":
            raise ValueError("only diffu-ed has a timestep-independent encoder")
        mask = self.cond_mask(w_c)
        c = self.embed_cond(w_c)
        for layer in self.encoder:
            c = layer(c, mask)
        self.stats["encoder_rows"] += w_c.shape[0]
        return c

    def forward(self, x_t, x0_prev, w_c, t, *, plan=None, cond_cache=None):
        B, k_x, _ = x_t.shape
        if k_x > self.cfg.k_x:
            raise ValueError(f"target length {k_x} exceeds k_x={self.cfg.k_x}")
        t = self._t_vector(t, B).to(x_t.device)
        self.stats["forward_calls"] += 1
        x = self.combiner(x_t, x0_prev)
        x = self.norm_x_in(x + self.pos_x.weight[:k_x] + self.time_x(t)[:, None, :])
        mask = self.cond_mask(w_c)

        if self.cfg.arch == "diffu-ed":
            if plan is not None:
                raise ValueError("diffu-ed has a fixed layer order")
            c = cond_cache if cond_cache is not None else self.encode(w_c)
            for layer in self.decoder:
                x = layer(x, c, mask)
            return self.head(x)

        if plan is None:
            plan = self.default_plan()
        else:
            check_plan(plan, self.cfg.L_e, self.cfg.L_d)
        enc = [self.embed_cond(w_c, t)]
        dec = [x]
        for step in plan:
            if step.kind == "E":
                enc.append(self.encoder[step.layer](enc[-1], mask, dec[step.source]))
            else:
                dec.append(self.decoder[step.layer](dec[-1], enc[step.source], mask))
        if self.cfg.L_e:
            self.stats["encoder_rows"] += B
        return self.head(dec[-1])
