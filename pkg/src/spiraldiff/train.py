"""Training objective, loss-aware timestep sampling and the optimization loop."""

from __future__ import annotations

from dataclasses import asdict, dataclass
import json
import logging
import time

import numpy as np
import torch
import torch.nn.functional as F

from .schedule import NoiseSchedule, q_sample
from .selfcond import training_two_pass
from .textspace import embed_target, rounding_logits

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    steps: int = 3000
    batch_size: int = 64
    seed: int = 0
    clip_norm: float = 1.0
    mask_pad: bool = False
    zero_prob: float = 0.5
    history: int = 10
    uniform_prob: float = 1e-3
    ckpt_every: int = 0
    log_timing: bool = False

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.zero_prob <= 1.0:
            raise ValueError("zero_prob must be in [0, 1]")
        if self.history < 1 or not 0.0 < self.uniform_prob <= 1.0:
            raise ValueError("history must be >= 1 and uniform_prob in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


class NonFiniteLoss(RuntimeError):
    pass


def step_rngs(seed: int, step: int):
    """Independent numpy and torch generators for one training step."""
    ss = np.random.SeedSequence([seed, step])
    np_rng = np.random.default_rng(ss)
    gen = torch.Generator().manual_seed(int(ss.generate_state(1, np.uint64)[0] >> 1))
    return np_rng, gen


def loss_vlb(model, sched: NoiseSchedule, w_c, w_x, t, *, generator=None, rng=None,
             sigma0: float = 0.0, zero_prob: float = 0.5, mask_pad: bool = False,
             weights=None):
    """Monte-Carlo estimate of the end-to-end objective with one ``t`` per example.

    Returns ``(loss, terms)`` where ``terms`` holds the per-example losses
    (detached) and the mse / t=1 / rounding-NLL breakdown.
    """
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    sched.check_t(t)
    if rng is None:
        rng = np.random.default_rng(0)
    table = model.target_emb.weight
    emb = F.embedding(w_x, table)
    x0 = embed_target(w_x, table, sigma0, generator)
    noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = q_sample(sched, x0, t, noise)
    x0_hat = training_two_pass(model, x_t, w_c, t, rng, zero_prob)

    first = (t == 1)[:, None, None]
    target = torch.where(first, emb, x0)
    sq = ((target - x0_hat) ** 2).mean(-1)
    logits = rounding_logits(x0, model.rounding_table)
    nll = F.cross_entropy(logits.transpose(1, 2), w_x, reduction="none")
    if mask_pad:
        pos = (w_x != model.pad_id).to(sq.dtype)
    else:
        pos = torch.ones_like(sq)
    denom = pos.sum(-1).clamp_min(1.0)
    sq_ex = (sq * pos).sum(-1) / denom
    nll_ex = (nll * pos).sum(-1) / denom
    per_example = sq_ex + nll_ex
    if weights is None:
        loss = per_example.mean()
    else:
        loss = (torch.as_tensor(weights, dtype=per_example.dtype) * per_example).mean()

    def masked_mean(vals, sel):
        return float(vals[sel].mean()) if bool(sel.any()) else 0.0

    with torch.no_grad():
        terms = {
            "per_example": per_example.detach(),
            "mse_term": masked_mean(sq_ex, t >= 2),
            "t1_term": masked_mean(sq_ex, t == 1),
            "nll_term": float(nll_ex.mean()),
        }
    return loss, terms


class LossAwareSampler:
    """Samples timesteps in proportion to the RMS of recent per-step losses.

    Uniform until every timestep has ``history`` recorded losses; afterwards
    ``p(t)`` is mixed with a uniform floor and importance weights
    ``1 / (T p(t))`` keep the objective unbiased.
    """

    def __init__(self, T: int, history: int = 10, uniform_prob: float = 1e-3):
        self.T = T
        self.history = history
        self.uniform_prob = uniform_prob
        self._losses = np.zeros((T, history), dtype=np.float64)
        self._counts = np.zeros(T, dtype=np.int64)

    @property
    def warm(self) -> bool:
        return bool((self._counts == self.history).all())

    def probs(self) -> np.ndarray:
        if not self.warm:
            return np.full(self.T, 1.0 / self.T)
        w = np.sqrt(np.mean(self._losses ** 2, axis=-1))
        if not w.sum() > 0:
            return np.full(self.T, 1.0 / self.T)
        w = w / w.sum()
        w = w * (1.0 - self.uniform_prob) + self.uniform_prob / self.T
        return w / w.sum()

    def sample(self, batch_size: int, rng: np.random.Generator):
        """Return ``(t in 1..T, importance weights)``."""
        if not self.warm:
            idx = rng.integers(0, self.T, size=batch_size)
            return idx + 1, np.ones(batch_size)
        p = self.probs()
        idx = rng.choice(self.T, size=batch_size, p=p)
        return idx + 1, 1.0 / (self.T * p[idx])

    def update(self, ts, losses) -> None:
        for t, loss in zip(np.asarray(ts), np.asarray(losses, dtype=np.float64)):
            i = int(t) - 1
            if self._counts[i] == self.history:
                self._losses[i, :-1] = self._losses[i, 1:]
                self._losses[i, -1] = loss
            else:
                self._losses[i, self._counts[i]] = loss
                self._counts[i] += 1

    def state_dict(self) -> dict:
        return {"losses": self._losses.tolist(), "counts": self._counts.tolist()}

    def load_state_dict(self, state: dict) -> None:
        self._losses = np.asarray(state["losses"], dtype=np.float64).reshape(self.T, self.history)
        self._counts = np.asarray(state["counts"], dtype=np.int64).reshape(self.T)


def lr_at(step: int, total: int, base: float) -> float:
    """Linear decay from ``base`` at step 0 to 0 at step ``total``."""
    return base * max(0.0, 1.0 - step / total)


class Trainer:
    """AdamW optimizer loop with linear decay, clipping and loss-aware sampling."""

    def __init__(self, model, sched: NoiseSchedule, cfg: TrainConfig, sigma0: float = 0.0):
        self.model = model
        self.sched = sched
        self.cfg = cfg
        self.sigma0 = sigma0
        self.optimizer = torch.optim.AdamW(
            model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0
        )
        self.sampler = LossAwareSampler(sched.T, cfg.history, cfg.uniform_prob)
        self.step = 0

    def train_step(self, src, trg) -> dict:
        cfg = self.cfg
        rng, gen = step_rngs(cfg.seed, self.step)
        idx = rng.integers(0, src.shape[0], size=cfg.batch_size)
        w_c, w_x = src[idx], trg[idx]
        t, weights = self.sampler.sample(cfg.batch_size, rng)
        lr = lr_at(self.step, cfg.steps, cfg.lr)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

        self.model.train()
        loss, terms = loss_vlb(
            self.model, self.sched, w_c, w_x, t, generator=gen, rng=rng,
            sigma0=self.sigma0, zero_prob=cfg.zero_prob, mask_pad=cfg.mask_pad,
            weights=weights,
        )
        if not torch.isfinite(loss):
            raise NonFiniteLoss(
                f"non-finite loss {float(loss.detach())} at step {self.step}; t={t.tolist()}"
            )
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.clip_norm)
        if not torch.isfinite(grad_norm):
            norms = {n: float(p.grad.norm()) for n, p in self.model.named_parameters() if p.grad is not None}
            raise NonFiniteLoss(f"non-finite gradient at step {self.step}; grad norms={norms}")
        self.optimizer.step()
        self.sampler.update(t, terms["per_example"].numpy())

        record = {
            "step": self.step,
            "loss": float(loss.detach()),
            "mse_term": terms["mse_term"],
            "t1_term": terms["t1_term"],
            "nll_term": terms["nll_term"],
            "lr": lr,
        }
        self.step += 1
        return record

    def fit(self, src, trg, *, until: int | None = None, log_file=None, on_checkpoint=None) -> list[dict]:
        """Train until step ``until`` (default: the configured total)."""
        until = self.cfg.steps if until is None else min(until, self.cfg.steps)
        history = []
        while self.step < until:
            tic = time.perf_counter()
            record = self.train_step(src, trg)
            if self.cfg.log_timing:
                record["wall_ms"] = round((time.perf_counter() - tic) * 1000.0, 3)
            history.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
            if record["step"] % 100 == 0:
                log.info("step %d loss %.4f lr %.2e", record["step"], record["loss"], record["lr"])
            every = self.cfg.ckpt_every
            if on_checkpoint is not None and every and self.step % every == 0 and self.step < until:
                on_checkpoint(self)
        if on_checkpoint is not None:
            on_checkpoint(self)
        return history

    def state_dict(self) -> dict:
        return {"step": self.step, "sampler": self.sampler.state_dict()}


def train_loop(model, sched, cfg: TrainConfig, src, trg, *, sigma0: float = 0.0,
               log_file=None, on_checkpoint=None) -> tuple[Trainer, list[dict]]:
    trainer = Trainer(model, sched, cfg, sigma0)
    history = trainer.fit(src, trg, log_file=log_file, on_checkpoint=on_checkpoint)
    return trainer, history
