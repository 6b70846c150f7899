"""Synthetic sequence-to-sequence tasks and JSONL dataset IO."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .textspace import Vocabulary, tokenize

TASKS = ("copy", "reverse", "sort", "lookup")
QUERY = "query"


def word(i: int, width: int) -> str:
    return f"t{i:0{width}d}"


def _make_pair(task, rng, vocab_size, min_len, max_len, width):
    if task == "lookup":
        max_pairs = (max_len - 2) // 2
        min_pairs = max(1, min(max_pairs, (min_len - 1) // 2))
        n = int(rng.integers(min_pairs, max_pairs + 1))
        keys = rng.choice(vocab_size, size=min(n, vocab_size), replace=False)
        vals = rng.integers(0, vocab_size, size=keys.size)
        q = int(rng.integers(0, keys.size))
        toks = []
        for k, v in zip(keys, vals):
            toks += [word(k, width), word(v, width)]
        toks += [QUERY, word(keys[q], width)]
        return " ".join(toks), word(vals[q], width)
    n = int(rng.integers(min_len, max_len + 1))
    ids = rng.integers(0, vocab_size, size=n)
    src = [word(i, width) for i in ids]
    if task == "copy":
        trg = src
    elif task == "reverse":
        trg = src[::-1]
    else:
        trg = [word(i, width) for i in sorted(ids)]
    return " ".join(src), " ".join(trg)


def make_task(task: str, n_train: int, n_valid: int, n_test: int, vocab_size: int,
              min_len: int, max_len: int, seed: int, k_x: int = 16) -> dict[str, list[dict]]:
    """Generate disjoint train/valid/test splits of ``{"src", "trg"}`` records."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    if vocab_size < 4:
        raise ValueError("vocab_size must be >= 4")
    if min(n_train, n_valid, n_test) < 0 or n_train < 1:
        raise ValueError("split sizes must be non-negative and n_train >= 1")
    if not 1 <= min_len <= max_len:
        raise ValueError("need 1 <= min_len <= max_len")
    if max_len >= k_x:
        raise ValueError(f"max_len={max_len} must be < k_x={k_x} to leave room for eos")
    if task == "lookup" and max_len < 4:
        raise ValueError("lookup needs max_len >= 4")
    rng = np.random.default_rng(seed)
    width = len(str(vocab_size - 1))
    total = n_train + n_valid + n_test
    seen, records = set(), []
    attempts = 0
    while len(records) < total:
        attempts += 1
        if attempts > 50 * total + 1000:
            raise ValueError("task space too small for the requested number of distinct pairs")
        src, trg = _make_pair(task, rng, vocab_size, min_len, max_len, width)
        if src in seen:
            continue
        seen.add(src)
        records.append({"src": src, "trg": trg})
    return {
        "train": records[:n_train],
        "valid": records[n_train:n_train + n_valid],
        "test": records[n_train + n_valid:],
    }


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if not isinstance(rec, dict):
                raise ValueError(f"{path}:{lineno}: expected a JSON object")
            records.append(rec)
    return records


def read_pairs(path) -> list[dict]:
    records = read_jsonl(path)
    for i, rec in enumerate(records, 1):
        if not rec.get("src") or not rec.get("trg"):
            raise ValueError(f"{path}:{i}: records need non-empty 'src' and 'trg'")
    if not records:
        raise ValueError(f"{path}: empty dataset")
    return records


def encode_pairs(records, vocab: Vocabulary, k_c: int, k_x: int):
    src = torch.tensor([tokenize(r["src"], vocab, k_c) for r in records], dtype=torch.long)
    trg = torch.tensor([tokenize(r["trg"], vocab, k_x) for r in records], dtype=torch.long)
    return src, trg


def write_task(out_dir, splits) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, records in splits.items():
        paths[name] = out / f"{name}.jsonl"
        write_jsonl(paths[name], records)
    return paths
