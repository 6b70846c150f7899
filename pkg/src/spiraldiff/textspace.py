"""Vocabulary, tokenization, the embedding step and the rounding step."""

from __future__ import annotations

from dataclasses import dataclass
import hashlib
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)


class Vocabulary:
    """Closed whitespace vocabulary; specials occupy ids 0..3."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {tok: i for i, tok in enumerate(tokens)}
        self.pad_id, self.bos_id, self.eos_id, self.unk_id = range(4)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        words = set()
        for text in texts:
            words.update(text.split())
        words -= set(SPECIALS)
        return cls(list(SPECIALS) + sorted(words))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.split("\n")[:-1] if text.endswith("\n") else text.split("\n"))

    def save(self, path) -> None:
        Path(path).write_text("".join(tok + "\n" for tok in self.tokens), encoding="utf-8")

    def digest(self) -> str:
        data = "".join(tok + "\n" for tok in self.tokens).encode("utf-8")
        return hashlib.sha256(data).hexdigest()


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> list[int]:
    """Map ``text`` to a fixed-length id list terminated by eos and padded."""
    ids = [vocab.index.get(tok, vocab.unk_id) for tok in text.split()]
    ids = ids[: max_len - 1] + [vocab.eos_id]
    return ids + [vocab.pad_id] * (max_len - len(ids))


def strip_ids(ids: Sequence[int], vocab: Vocabulary) -> list[int]:
    """Cut at the first eos and drop padding."""
    out = []
    for i in ids:
        i = int(i)
        if i == vocab.eos_id:
            break
        if i != vocab.pad_id:
            out.append(i)
    return out


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.tokens[i] for i in strip_ids(ids, vocab))


@dataclass
class EmbeddingSpec:
    d_x: int
    d_c: int
    sigma0: float = 0.0
    tied_rounding: bool = True

    def __post_init__(self):
        if self.d_x < 1 or self.d_c < 1:
            raise ValueError("embedding dims must be >= 1")
        if self.sigma0 < 0:
            raise ValueError("sigma0 must be non-negative")


def embed_target(ids: torch.Tensor, table: torch.Tensor, sigma0: float, generator=None) -> torch.Tensor:
    """Embedding step: ``Emb(w) + sigma0 * eps``."""
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise IndexError("token id out of range for embedding table")
    emb = F.embedding(ids, table)
    if sigma0 == 0:
        return emb
    eps = torch.randn(emb.shape, generator=generator, dtype=emb.dtype, device=emb.device)
    return emb + sigma0 * eps


def rounding_logits(x0: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """Per-position logits ``x_i . table^T`` (table may be a separate head)."""
    if x0.shape[-1] != table.shape[1]:
        raise ValueError(f"dim mismatch: x0 {x0.shape[-1]} vs table {table.shape[1]}")
    return x0 @ table.T


def first_argmax(logits: torch.Tensor) -> torch.Tensor:
    """Argmax along the last axis, ties resolved to the lowest index."""
    top = logits.max(dim=-1, keepdim=True).values
    hit = logits == top
    idx = torch.arange(logits.shape[-1], device=logits.device).expand_as(logits)
    big = torch.full_like(idx, logits.shape[-1])
    return torch.where(hit, idx, big).min(dim=-1).values


def round_to_tokens(x0: torch.Tensor, table: torch.Tensor):
    logits = rounding_logits(x0, table)
    return logits, first_argmax(logits)


def rounding_log_prob(x0: torch.Tensor, table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    """``log p(w | x0)`` summed over positions (last two axes are k × d)."""
    logp = torch.log_softmax(rounding_logits(x0, table), dim=-1)
    return logp.gather(-1, ids.unsqueeze(-1)).squeeze(-1).sum(-1)


def clamp_to_table(x0: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """Snap each row to its nearest table row in Euclidean distance."""
    dist = (
        (x0 * x0).sum(-1, keepdim=True)
        - 2 * x0 @ table.T
        + (table * table).sum(-1)
    )
    return F.embedding(first_argmax(-dist), table)
