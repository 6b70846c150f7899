"""Checkpoint directories: a JSON manifest plus raw little-endian float32 arrays."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .nnet import DenoiseModel, ModelConfig
from .textspace import Vocabulary

FORMAT_VERSION = 1
MANIFEST = "manifest.json"


def _write_array(path: Path, tensor: torch.Tensor) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tensor.detach().cpu().numpy().astype("<f4").tofile(path)


def _read_array(path: Path, shape) -> torch.Tensor:
    arr = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(shape)) if shape else 1
    if arr.size != expected:
        raise ValueError(f"{path}: expected {expected} values, found {arr.size}")
    return torch.from_numpy(arr.reshape(shape).astype(np.float32))


def save_checkpoint(ckpt_dir, model: DenoiseModel, vocab: Vocabulary, run_config: dict,
                    trainer=None) -> Path:
    out = Path(ckpt_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    params = []
    for name, tensor in model.state_dict().items():
        rel = f"params/{name}.f32"
        _write_array(out / rel, tensor)
        params.append({"name": name, "shape": list(tensor.shape), "dtype": "float32", "file": rel})
    manifest = {
        "format": FORMAT_VERSION,
        "config": run_config,
        "model": model.cfg.to_dict(),
        "vocab_size": vocab.size,
        "vocab_hash": vocab.digest(),
        "step": 0,
        "params": params,
        "optimizer": None,
        "sampler": None,
    }
    if trainer is not None:
        manifest["step"] = trainer.step
        manifest["sampler"] = trainer.sampler.state_dict()
        manifest["optimizer"] = _save_optimizer(out, model, trainer.optimizer)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def _save_optimizer(out: Path, model, optimizer) -> list[dict]:
    entries = []
    for name, p in model.named_parameters():
        state = optimizer.state.get(p)
        if not state:
            continue
        entry = {"name": name, "step": float(state["step"])}
        for key in ("exp_avg", "exp_avg_sq"):
            rel = f"optim/{name}.{key}.f32"
            _write_array(out / rel, state[key])
            entry[key] = rel
        entries.append(entry)
    return entries


def read_manifest(ckpt_dir) -> dict:
    path = Path(ckpt_dir) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(ckpt_dir, dtype=torch.float32):
    """Return ``(model, vocab, manifest)``."""
    ckpt = Path(ckpt_dir)
    manifest = read_manifest(ckpt)
    vocab = Vocabulary.load(ckpt / "vocab.txt")
    if vocab.digest() != manifest["vocab_hash"]:
        raise ValueError("vocabulary file does not match the checkpoint manifest hash")
    model = DenoiseModel(ModelConfig(**manifest["model"]), vocab.size, vocab.pad_id)
    expected = model.state_dict()
    state = {}
    for entry in manifest["params"]:
        name = entry["name"]
        if name not in expected:
            raise ValueError(f"unexpected parameter {name!r} in checkpoint")
        if list(expected[name].shape) != entry["shape"]:
            raise ValueError(f"shape mismatch for {name}: {entry['shape']} vs {list(expected[name].shape)}")
        state[name] = _read_array(ckpt / entry["file"], entry["shape"])
    model.load_state_dict(state, strict=True)
    return model.to(dtype), vocab, manifest


def restore_trainer(trainer, ckpt_dir, manifest: dict | None = None) -> None:
    """Load optimizer moments, sampler history and step counter into ``trainer``."""
    ckpt = Path(ckpt_dir)
    manifest = manifest or read_manifest(ckpt)
    trainer.step = int(manifest["step"])
    if manifest.get("sampler"):
        trainer.sampler.load_state_dict(manifest["sampler"])
    params = dict(trainer.model.named_parameters())
    for entry in manifest.get("optimizer") or []:
        p = params[entry["name"]]
        trainer.optimizer.state[p] = {
            "step": torch.tensor(entry["step"], dtype=torch.float32),
            "exp_avg": _read_array(ckpt / entry["exp_avg"], list(p.shape)).to(p.dtype),
            "exp_avg_sq": _read_array(ckpt / entry["exp_avg_sq"], list(p.shape)).to(p.dtype),
        }
