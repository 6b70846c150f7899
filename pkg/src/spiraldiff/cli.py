"""Command-line entry point: make-task, train, sample, eval, ablate, inspect-schedule."""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
from pathlib import Path
import sys
import time

import torch

from .checkpoint import load_checkpoint, read_manifest, restore_trainer, save_checkpoint
from .config import RunConfig, load_config, parse_config
from .metrics import evaluate
from .nnet import ARCHS, DenoiseModel
from .schedule import build_sqrt_schedule, default_sigma0
from .selfcond import KINDS as SELFCOND_KINDS
from .tasks import TASKS, encode_pairs, make_task, read_jsonl, read_pairs, write_task
from .textspace import Vocabulary, tokenize
from .train import NonFiniteLoss, Trainer
from . import sample as sampling

log = logging.getLogger("spiraldiff")

ABLATE_COLUMNS = ["arch", "selfcond", "L_e", "L_d", "seed", "bleu", "rouge_l", "exact_match", "n", "final_loss"]


def resolve_sigma0(cfg: RunConfig, sched) -> float:
    if cfg.schedule.sigma0 == "auto":
        return default_sigma0(sched)
    return float(cfg.schedule.sigma0)


def run_train(cfg: RunConfig, *, resume: bool = False, stop_at: int | None = None) -> Path:
    """Train per ``cfg`` into ``cfg.data.out_dir``; returns the checkpoint directory."""
    out = Path(cfg.data.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoint"
    records = read_pairs(cfg.data.train)
    if cfg.data.vocab:
        vocab = Vocabulary.load(cfg.data.vocab)
    else:
        vocab = Vocabulary.build([r["src"] for r in records] + [r["trg"] for r in records])
    vocab.save(out / "vocab.txt")
    cfg.save(out / "config.ini")
    src, trg = encode_pairs(records, vocab, cfg.model.k_c, cfg.model.k_x)

    sched = build_sqrt_schedule(cfg.schedule.T, cfg.schedule.s)
    torch.manual_seed(cfg.train.seed)
    model = DenoiseModel(cfg.model, vocab.size, vocab.pad_id)
    trainer = Trainer(model, sched, cfg.train, resolve_sigma0(cfg, sched))
    mode = "w"
    if resume:
        manifest = read_manifest(ckpt_dir)
        if manifest["vocab_hash"] != vocab.digest():
            raise ValueError("cannot resume: vocabulary changed")
        loaded, _, _ = load_checkpoint(ckpt_dir)
        model.load_state_dict(loaded.state_dict())
        restore_trainer(trainer, ckpt_dir, manifest)
        mode = "a"
        _truncate_log(out / "metrics.jsonl", trainer.step)

    def on_checkpoint(tr):
        save_checkpoint(ckpt_dir, tr.model, vocab, cfg.to_dict(), tr)

    with open(out / "metrics.jsonl", mode, encoding="utf-8") as log_file:
        trainer.fit(src, trg, until=stop_at, log_file=log_file, on_checkpoint=on_checkpoint)
    return ckpt_dir


def _truncate_log(path: Path, step: int) -> None:
    """Drop metric lines at or beyond ``step`` so a resumed run appends cleanly."""
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines(True) if json.loads(line)["step"] < step]
    path.write_text("".join(keep))


def run_sample(ckpt_dir, input_path, output_path, *, seed: int | None = None, S: int | None = None,
               clamp: bool | None = None, log_timing: bool | None = None, limit: int | None = None) -> list[dict]:
    model, vocab, manifest = load_checkpoint(ckpt_dir)
    cfg = _config_from_dict(manifest["config"])
    sc = cfg.sample
    seed = sc.seed if seed is None else seed
    S = sc.S if S is None else S
    clamp = sc.clamp if clamp is None else clamp
    log_timing = sc.log_timing if log_timing is None else log_timing
    sc.seed, sc.S, sc.clamp, sc.log_timing = seed, S, clamp, log_timing

    records = read_jsonl(input_path)
    if limit is not None:
        records = records[:limit]
    if not records:
        raise ValueError(f"{input_path}: no inputs")
    sched = build_sqrt_schedule(cfg.schedule.T, cfg.schedule.s)
    w_c = torch.tensor([tokenize(r["src"], vocab, cfg.model.k_c) for r in records], dtype=torch.long)
    out_path = Path(output_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    cfg.save(out_path.with_name(out_path.name + ".config.ini"))

    tic = time.perf_counter()
    results = sampling.generate(model, sched, vocab, w_c, S=S, seed=seed, clamp=clamp)
    wall_ms = (time.perf_counter() - tic) * 1000.0 / len(records)
    rows = []
    detok = lambda ids: " ".join(vocab.tokens[i] for i in ids)
    with open(out_path, "w", encoding="utf-8") as f:
        for rec, (selected, cands) in zip(records, results):
            row = {
                "src": rec["src"],
                "selected": detok(selected),
                "candidates": [detok(c) for c in cands],
                "seed": seed,
                "steps": sched.T,
            }
            if "trg" in rec:
                row["trg"] = rec["trg"]
            if log_timing:
                row["wall_ms"] = round(wall_ms, 3)
            rows.append(row)
            f.write(json.dumps(row) + "\n")
    return rows


def _config_from_dict(d: dict) -> RunConfig:
    overrides = {f"{sec}.{k}": v for sec, vals in d.items() for k, v in vals.items()}
    return parse_config("", overrides)


def run_eval(input_path, output_path=None, csv_path=None, corpus_counts: bool = False) -> dict:
    rows = read_jsonl(input_path)
    if not rows:
        raise ValueError(f"{input_path}: empty file")
    for i, r in enumerate(rows, 1):
        if "selected" not in r or "trg" not in r:
            raise ValueError(f"{input_path}:{i}: needs 'selected' and 'trg' fields")
    hyps = [r["selected"].split() for r in rows]
    refs = [r["trg"].split() for r in rows]
    report, per_example = evaluate(hyps, refs, corpus_counts=corpus_counts)
    result = report.to_dict()
    if output_path:
        Path(output_path).write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    if csv_path:
        with open(csv_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["index", "bleu", "rouge_l", "exact_match"])
            for i, ex in enumerate(per_example):
                writer.writerow([i, repr(ex["bleu"]), repr(ex["rouge_l"]), int(ex["exact"])])
    return result


def ablation_cells(archs, selfconds, layers, seeds) -> list[tuple]:
    """Deduplicated cross product in grid order; all layer splits must share one total."""
    totals = {le + ld for le, ld in layers}
    if len(totals) > 1:
        raise ValueError(f"layer splits must share a constant L_e + L_d, got totals {sorted(totals)}")
    cells, seen = [], set()
    for cell in itertools.product(archs, selfconds, layers, seeds):
        arch, sc, (le, ld), seed = cell
        key = (arch, sc, le, ld, seed)
        if key in seen:
            continue
        seen.add(key)
        cells.append(key)
    return cells


def run_ablate(base: RunConfig, cells, out_csv, *, S: int = 5, limit: int | None = None,
               reuse: bool = True) -> list[dict]:
    """Train, sample and evaluate each cell on the base config's test split."""
    if not base.data.test:
        raise ValueError("ablation needs [data] test")
    root = Path(base.data.out_dir)
    rows = []
    for arch, sc, le, ld, seed in cells:
        name = f"{arch}_{sc}_{le}-{ld}_s{seed}"
        cell_dir = root / "ablate" / name
        cfg = _config_from_dict(base.to_dict())
        cfg.model.arch, cfg.model.selfcond, cfg.model.L_e, cfg.model.L_d = arch, sc, le, ld
        cfg.model.__post_init__()
        cfg.train.seed = seed
        cfg.data.out_dir = str(cell_dir)
        result_file = cell_dir / "result.json"
        if reuse and result_file.exists() and (cell_dir / "config.ini").read_text() == cfg.dumps():
            row = json.loads(result_file.read_text())
        else:
            ckpt = run_train(cfg)
            run_sample(ckpt, base.data.test, cell_dir / "samples.jsonl", S=S, seed=seed, limit=limit)
            report = run_eval(cell_dir / "samples.jsonl", cell_dir / "report.json")
            final = [json.loads(line) for line in (cell_dir / "metrics.jsonl").read_text().splitlines()]
            tail = final[-100:]
            row = {"arch": arch, "selfcond": sc, "L_e": le, "L_d": ld, "seed": seed,
                   "bleu": report["bleu"], "rouge_l": report["rouge_l"],
                   "exact_match": report["exact_match"], "n": report["n"],
                   "final_loss": sum(r["loss"] for r in tail) / len(tail)}
            result_file.write_text(json.dumps(row, sort_keys=True) + "\n")
        rows.append(row)
        log.info("ablate %s: bleu %.4f", name, row["bleu"])
    with open(out_csv, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=ABLATE_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return rows


def _parse_sets(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ValueError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _load(path, sets) -> RunConfig:
    return load_config(path, _parse_sets(sets))


def _int_list(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _layer_list(text):
    pairs = []
    for item in text.split(","):
        le, _, ld = item.strip().partition("+")
        pairs.append((int(le), int(ld)))
    return pairs


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spiraldiff", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    mk = sub.add_parser("make-task", help="write synthetic train/valid/test JSONL splits")
    mk.add_argument("--task", choices=TASKS, required=True)
    mk.add_argument("--out-dir", required=True)
    mk.add_argument("--n-train", type=int, default=5000)
    mk.add_argument("--n-valid", type=int, default=200)
    mk.add_argument("--n-test", type=int, default=200)
    mk.add_argument("--vocab-size", type=int, default=20)
    mk.add_argument("--min-len", type=int, default=1)
    mk.add_argument("--max-len", type=int, default=12)
    mk.add_argument("--k-x", type=int, default=16)
    mk.add_argument("--seed", type=int, default=0)

    tr = sub.add_parser("train", help="train a model from a config file")
    tr.add_argument("--config", required=True)
    tr.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    tr.add_argument("--resume", action="store_true", help="continue from <out_dir>/checkpoint")
    tr.add_argument("--stop-at", type=int, help="stop (and checkpoint) after this many steps")

    sm = sub.add_parser("sample", help="generate targets for a JSONL file of sources")
    sm.add_argument("--checkpoint", required=True)
    sm.add_argument("--input", required=True)
    sm.add_argument("--output", required=True)
    sm.add_argument("--seed", type=int)
    sm.add_argument("--S", type=int, help="MBR candidate count")
    sm.add_argument("--no-clamp", action="store_true")
    sm.add_argument("--log-timing", action="store_true")
    sm.add_argument("--limit", type=int)

    ev = sub.add_parser("eval", help="score a sampling output file that carries references")
    ev.add_argument("--input", required=True)
    ev.add_argument("--output", required=True)
    ev.add_argument("--csv")
    ev.add_argument("--corpus-counts", action="store_true")

    ab = sub.add_parser("ablate", help="train/sample/eval a grid of architecture variants")
    ab.add_argument("--config", required=True)
    ab.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    ab.add_argument("--arch", default="sia", help=f"comma list of {ARCHS}")
    ab.add_argument("--selfcond", default="c-type", help=f"comma list of {SELFCOND_KINDS}")
    ab.add_argument("--layers", default="2+2", help="comma list of L_e+L_d splits, e.g. 1+3,2+2,3+1")
    ab.add_argument("--seeds", default="0")
    ab.add_argument("--S", type=int, default=5)
    ab.add_argument("--limit", type=int)
    ab.add_argument("--output", required=True)

    ins = sub.add_parser("inspect-schedule", help="dump t, beta, alpha_bar, posterior variance as CSV")
    ins.add_argument("--T", type=int, default=2000)
    ins.add_argument("--s", type=float, default=1e-4)
    ins.add_argument("--output", help="CSV path (default stdout)")
    return p


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("SPIRALDIFF_LOG", "WARNING").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        if args.command == "make-task":
            splits = make_task(args.task, args.n_train, args.n_valid, args.n_test, args.vocab_size,
                               args.min_len, args.max_len, args.seed, args.k_x)
            paths = write_task(args.out_dir, splits)
            Path(args.out_dir, "task.json").write_text(json.dumps(
                {k: v for k, v in vars(args).items() if k not in ("command", "out_dir")}, sort_keys=True) + "\n")
            for name, path in paths.items():
                print(f"{name}: {path}")
        elif args.command == "train":
            cfg = _load(args.config, args.set)
            ckpt = run_train(cfg, resume=args.resume, stop_at=args.stop_at)
            print(ckpt)
        elif args.command == "sample":
            run_sample(args.checkpoint, args.input, args.output, seed=args.seed, S=args.S,
                       clamp=False if args.no_clamp else None,
                       log_timing=True if args.log_timing else None, limit=args.limit)
        elif args.command == "eval":
            print(json.dumps(run_eval(args.input, args.output, args.csv, args.corpus_counts), sort_keys=True))
        elif args.command == "ablate":
            base = _load(args.config, args.set)
            cells = ablation_cells(args.arch.split(","), args.selfcond.split(","),
                                   _layer_list(args.layers), _int_list(args.seeds))
            run_ablate(base, cells, args.output, S=args.S, limit=args.limit)
        elif args.command == "inspect-schedule":
            sched = build_sqrt_schedule(args.T, args.s)
            f = open(args.output, "w", newline="") if args.output else sys.stdout
            writer = csv.writer(f)
            writer.writerow(["t", "beta", "alpha_bar", "posterior_var"])
            for row in sched.to_rows():
                writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
            if args.output:
                f.close()
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
