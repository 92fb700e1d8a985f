"""Command-line entry point: ``masattn <subcommand> ...``.

Every failed contract prints a single ``E_<CODE>: message`` line on stderr and
exits with status 2. Training runs write a manifest before the first step and
finalize it once, on completion.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from . import atlas as at
from .chatdata import (ASST_BEGIN, EOS, ChatExample, detokenize, gen_base_corpus, gen_recall_task,
                       gen_retrieval_task, read_jsonl, render_chat, render_system, render_user, write_jsonl)
from .errors import ConfigError, MasError, StateError, ValidationError
from .lora import TARGETS, load_adapters, save_adapters
from .masking import MODES, SegmentedTokens, build_mask, to_pgm
from .model import ModelConfig, init_weights, load_model, save_model
from .training import TrainConfig, MetricsHistory, evaluate, pretrain, train

log = logging.getLogger("masattn")

EXIT_CONTRACT = 2
MANIFEST = "manifest.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"E_USAGE: {message}", file=sys.stderr)
        sys.exit(EXIT_CONTRACT)


# ---------------------------------------------------------------- manifests

def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclasses.dataclass
class RunManifest:
    config: dict
    seed: int
    git: str
    started: str
    artifacts: dict
    ended: str | None = None
    complete: bool = False

    def write(self, run_dir: Path) -> None:
        (run_dir / MANIFEST).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True))

    @classmethod
    def read(cls, run_dir: str | Path) -> "RunManifest":
        path = Path(run_dir) / MANIFEST
        if not path.exists():
            raise StateError(f"no run at {run_dir} (missing {MANIFEST})")
        return cls(**json.loads(path.read_text()))


# ---------------------------------------------------------------- shared helpers

def _train_config(args) -> TrainConfig:
    """Flags first, then the optional config file on top."""
    data = {}
    for f in dataclasses.fields(TrainConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            data[f.name] = val
    if getattr(args, "mode", None):
        data["train_mode"] = args.mode
    if getattr(args, "config", None):
        try:
            data.update(json.loads(Path(args.config).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from exc
    if isinstance(data.get("lora_targets"), str):
        data["lora_targets"] = tuple(t for t in data["lora_targets"].split(",") if t)
    return TrainConfig.from_dict(data)


def _load_examples(path) -> list[ChatExample]:
    if path is None:
        return []
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"dataset {p} does not exist")
    return read_jsonl(p)


def _load_base(path):
    if path is None:
        raise ConfigError("--weights is required")
    if not Path(path).exists():
        raise ValidationError(f"weights file {path} does not exist")
    weights, config, _ = load_model(path)
    return weights, config


def _load_run(run_dir):
    man = RunManifest.read(run_dir)
    if not man.complete:
        raise StateError(f"run {run_dir} did not complete")
    weights, config = _load_base(man.artifacts["base_weights"])
    adapters = load_adapters(Path(run_dir) / man.artifacts["adapter"])
    return man, weights, config, adapters


def run_training(weights_path, train_path, eval_path, cfg: TrainConfig, out_dir) -> RunManifest:
    """One complete fine-tuning run into ``out_dir``."""
    out = Path(out_dir)
    if (out / MANIFEST).exists() and RunManifest.read(out).complete:
        raise StateError(f"{out} already holds a completed run")
    out.mkdir(parents=True, exist_ok=True)
    weights, config = _load_base(weights_path)
    train_set, eval_set = _load_examples(train_path), _load_examples(eval_path)
    man = RunManifest(
        config={"train": cfg.to_dict(), "model": json.loads(config.to_json())},
        seed=cfg.seed, git=git_describe(), started=_now(),
        artifacts={"base_weights": str(Path(weights_path).resolve()), "train_data": str(Path(train_path).resolve()),
                   "eval_data": str(Path(eval_path).resolve()) if eval_path else None,
                   "metrics": "metrics.csv", "adapter": "adapter.masw",
                   "inputs_sha256": _file_digest(*[p for p in (weights_path, train_path, eval_path) if p])},
    )
    man.write(out)
    (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    history, adapters = train(weights, config, train_set, cfg, eval_set)
    history.to_csv(out / "metrics.csv")
    save_adapters(out / "adapter.masw", adapters)
    man.ended, man.complete = _now(), True
    man.write(out)
    return man


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args):
    if args.task == "base":
        exs = gen_base_corpus(args.n, args.seed, max_facts=args.facts, pool=args.pool, n_queries=args.queries)
    elif args.task == "retrieval":
        exs = gen_retrieval_task(args.n, args.facts, args.choices, args.seed, args.split, pool=args.pool)
    else:
        exs = gen_recall_task(args.n, args.facts, args.seed, args.split, pool=args.pool, n_queries=args.queries)
    n = write_jsonl(args.out, exs)
    _emit({"written": n, "path": str(args.out)})


def cmd_init(args):
    config = ModelConfig(d=args.d, h=args.heads, n_layers=args.layers, d_m=args.d_ff, max_seq=args.max_seq)
    weights = init_weights(config, seed=args.seed, dtype=args.dtype, std=args.init_std or args.d ** -0.5)
    if args.data:
        weights, losses = pretrain(config, _load_examples(args.data), args.steps, lr=args.lr,
                                   batch_size=args.batch_size, seed=args.seed, weights=weights,
                                   loss_scope=args.loss_scope)
        _emit({"steps": args.steps, "final_loss": sum(losses[-50:]) / len(losses[-50:])})
    save_model(args.out, weights, config)


def cmd_train(args):
    cfg = _train_config(args)
    man = run_training(args.weights, args.data, args.eval_data, cfg, args.out)
    hist = MetricsHistory.from_csv(Path(args.out) / "metrics.csv")
    _emit({"run": str(args.out), "final": hist.checkpoints[-1].accuracy if len(hist) else None,
           "started": man.started, "ended": man.ended})


def cmd_evaluate(args):
    if args.run:
        man, weights, config, adapters = _load_run(args.run)
        mode = args.mode or man.config["train"]["train_mode"]
        unified = man.config["train"]["unified_segments"]
    else:
        weights, config = _load_base(args.weights)
        adapters = load_adapters(args.adapter) if args.adapter else None
        mode, unified = args.mode or "mas", False
    acc = evaluate(weights, config, _load_examples(args.data), mode, adapters, unified)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task", "accuracy"])
            for k in sorted(acc):
                w.writerow([k, repr(acc[k])])
    _emit({"mode": mode, "accuracy": acc})


def _text_arg(inline, path, name):
    if path is None:
        return inline
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{name} file {p} does not exist")
    return p.read_text()


def _file_digest(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        if p:
            h.update(Path(p).read_bytes())
    return h.hexdigest()


def cmd_generate(args):
    system = _text_arg(args.system, args.system_file, "system")
    user = _text_arg(args.user, args.user_file, "user")
    if user is None:
        raise ConfigError("one of --user or --user-file is required")
    if args.server:
        from .service.client import generate_remote
        _emit(generate_remote(args.server, system, user, args.mode, args.max_new))
        return
    from .engine import cache_key, generate, load_cache, save_cache, snapshot_system_cache
    if args.run:
        man, weights, config, adapters = _load_run(args.run)
        sources = (man.artifacts["base_weights"], Path(args.run) / man.artifacts["adapter"])
    else:
        weights, config = _load_base(args.weights)
        adapters = load_adapters(args.adapter) if args.adapter else None
        sources = (args.weights, args.adapter)
    header = SegmentedTokens((ASST_BEGIN,), (-1,), ("assistant",))
    sys_seg = render_system(system)
    cache, hit = None, False
    if args.cache_dir:
        store = Path(args.cache_dir)
        store.mkdir(parents=True, exist_ok=True)
        path = store / f"{cache_key(_file_digest(*sources), sys_seg, args.mode)}.masw"
        if path.exists():
            cache, hit = load_cache(path), True
        else:
            cache = snapshot_system_cache(sys_seg, weights, config, args.mode, adapters)
            save_cache(path, cache)
        seg = render_user(user) + header
    else:
        seg = sys_seg + render_user(user) + header
    ids = generate(seg, weights, config, args.mode, args.max_new, EOS, adapters, cache=cache)
    _emit({"mode": args.mode, "tokens": ids, "text": detokenize(ids, errors="replace"), "system_cache_hit": hit})


def _parse_segments(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError:
        raise ValidationError(f"segment ids must be comma-separated integers, got {text!r}") from None


def cmd_mask_dump(args):
    mask = build_mask(_parse_segments(args.segments), args.mode)
    if args.format == "pgm":
        if not args.out:
            raise ConfigError("--format pgm needs --out")
        Path(args.out).write_bytes(to_pgm(mask))
        _emit({"path": str(args.out), "n": mask.n})
    else:
        print("\n".join(mask.rows()))


def _prompt_segments(path) -> SegmentedTokens:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"prompt file {p} does not exist")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{p}: {exc}") from exc
    ex = ChatExample.from_dict({"system": "", **d})
    seg = render_chat(ex, include_assistant=False)
    return seg + SegmentedTokens((ASST_BEGIN,), (-1,), ("assistant",))


def cmd_atlas(args):
    if args.run:
        man, weights, config, adapters = _load_run(args.run)
        mode = args.mode or man.config["train"]["train_mode"]
    else:
        weights, config = _load_base(args.weights)
        adapters = load_adapters(args.adapter) if args.adapter else None
        mode = args.mode or "mas"
    recs = at.record_attention(weights, config, _prompt_segments(args.prompt_file), mode, adapters)
    path = at.report(recs, args.out, heatmaps=True)
    counts: dict[str, int] = {}
    for row in at.read_report(path):
        counts[row["label"]] = counts.get(row["label"], 0) + 1
    _emit({"report": str(path), "labels": counts})


def _sweep_cell(job):
    weights, train_path, eval_path, cfg_dict, out = job
    cfg = TrainConfig.from_dict(cfg_dict)
    run_training(weights, train_path, eval_path, cfg, out)
    return MetricsHistory.from_csv(Path(out) / "metrics.csv").final_accuracy()


def cmd_sweep(args):
    base = _train_config(args)
    lrs = [float(x) for x in args.lrs.split(",") if x]
    seeds = [int(x) for x in args.seeds.split(",") if x]
    if not lrs or not seeds:
        raise ConfigError("--lrs and --seeds must be nonempty")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs, keys = [], []
    for mode in MODES:
        for lr in lrs:
            for seed in seeds:
                cfg = base.replace(lr=lr, seed=seed, train_mode=mode, eval_mode=None)
                jobs.append((args.weights, args.data, args.eval_data, cfg.to_dict(), out / f"{mode}_lr{lr:g}_s{seed}"))
                keys.append((mode, lr, seed))
    if args.workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(args.workers) as pool:
            accs = list(pool.map(_sweep_cell, jobs))
    else:
        accs = [_sweep_cell(j) for j in jobs]
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "lr", "seed", "accuracy"])
        for (mode, lr, seed), acc in zip(keys, accs):
            w.writerow([mode, repr(lr), seed, repr(acc)])
    best = {}
    for mode in MODES:
        means = {lr: sum(a for (m, l, _), a in zip(keys, accs) if m == mode and l == lr) / len(seeds) for lr in lrs}
        top = max(lrs, key=lambda lr: means[lr])
        best[mode] = {"lr": top, "mean_accuracy": means[top]}
    _emit({"cells": len(accs), "best": best, "csv": str(out / "sweep.csv")})


def crossmask_table(runs: dict, examples: Sequence[ChatExample]) -> dict[tuple[str, str], float]:
    """Accuracy of each trained run (keyed by its train mode) under both eval masks."""
    table = {}
    for train_mode, run_dir in runs.items():
        man, weights, config, adapters = _load_run(run_dir)
        unified = man.config["train"]["unified_segments"]
        for eval_mode in MODES:
            table[(train_mode, eval_mode)] = evaluate(weights, config, examples, eval_mode, adapters, unified)["avg"]
    return table


def cmd_ablate_crossmask(args):
    table = crossmask_table({"mas": args.run_mas, "causal": args.run_causal}, _load_examples(args.data))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["train_mode", "eval_mode", "accuracy"])
        for (tm, em), acc in sorted(table.items()):
            w.writerow([tm, em, repr(acc)])
    _emit({f"{tm}->{em}": acc for (tm, em), acc in sorted(table.items())})


def cmd_ablate_unified(args):
    base = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    acc = {}
    for name, unified in (("separated", False), ("unified", True)):
        run_dir = out / name
        if name == "separated" and args.separated_run:
            run_dir = Path(args.separated_run)
            if RunManifest.read(run_dir).config["train"] != base.to_dict():
                raise ConfigError(f"{run_dir} was trained with a different configuration")
        else:
            run_training(args.weights, args.data, args.eval_data, base.replace(unified_segments=unified), run_dir)
        acc[name] = MetricsHistory.from_csv(run_dir / "metrics.csv").final_accuracy()
    gap = acc["separated"] - acc["unified"]
    with open(out / "unified.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segments", "accuracy"])
        for k in ("separated", "unified"):
            w.writerow([k, repr(acc[k])])
        w.writerow(["gap", repr(gap)])
    _emit({**acc, "gap": gap})


def cmd_rerun(args):
    """Repeat a completed run from its manifest and compare the metrics files byte for byte."""
    man = RunManifest.read(args.run)
    if not man.complete:
        raise StateError(f"run {args.run} did not complete")
    art = man.artifacts
    inputs = [p for p in (art["base_weights"], art["train_data"], art["eval_data"]) if p]
    if "inputs_sha256" in art and _file_digest(*inputs) != art["inputs_sha256"]:
        raise StateError(f"inputs of {args.run} changed since it was recorded")
    cfg = TrainConfig.from_dict(man.config["train"])
    run_training(art["base_weights"], art["train_data"], art["eval_data"], cfg, args.out)
    before = (Path(args.run) / art["metrics"]).read_bytes()
    after = (Path(args.out) / "metrics.csv").read_bytes()
    _emit({"identical": before == after, "metrics": str(Path(args.out) / "metrics.csv")})
    if before != after:
        raise StateError(f"metrics of {args.out} differ from {args.run}")


def cmd_serve(args):
    import uvicorn

    from .service.app import create_app
    uvicorn.run(create_app(args.weights, args.adapter), host=args.host, port=args.port, log_level="warning")


# ---------------------------------------------------------------- parser

def _add_train_flags(p):
    """One flag per TrainConfig field; unset flags keep the dataclass defaults."""
    for f in dataclasses.fields(TrainConfig):
        if f.name in ("train_mode",):
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.name == "unified_segments":
            p.add_argument(flag, dest=f.name, action="store_const", const=True, default=None)
        elif f.name == "lora_targets":
            p.add_argument(flag, dest=f.name, default=None, help=f"comma list from {','.join(TARGETS)}")
        elif f.name in ("eval_mode",):
            p.add_argument(flag, dest=f.name, choices=MODES, default=None)
        elif f.name == "loss_scope":
            p.add_argument(flag, dest=f.name, choices=("assistant_only", "full_sequence"), default=None)
        else:
            typ = type(f.default) if f.default is not None else str
            p.add_argument(flag, dest=f.name, type=typ, default=None)
    p.add_argument("--mode", choices=MODES, default=None, help="training mask")
    p.add_argument("--config", help="JSON file; its keys override flags")
    p.add_argument("--weights", required=True, help="base model (.masw)")
    p.add_argument("--data", required=True, help="training set (.jsonl)")
    p.add_argument("--eval-data", help="evaluation set (.jsonl)")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="masattn", description="Segment-masked attention experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--task", choices=("retrieval", "recall", "base"), default="retrieval")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--facts", type=int, default=6)
    p.add_argument("--choices", type=int, default=4)
    p.add_argument("--pool", type=int, default=8, help="letters available for keys and values")
    p.add_argument("--queries", type=int, default=12, help="worked lookups per recall example")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("init", help="create a base model, optionally pretrained on a corpus")
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--d-ff", type=int, default=256)
    p.add_argument("--max-seq", type=int, default=256)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    p.add_argument("--init-std", type=float, help="default 1/sqrt(d)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", help="pretraining corpus (.jsonl)")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--loss-scope", choices=("assistant_only", "full_sequence"), default="full_sequence")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_init)

    p = sub.add_parser("train", help="LoRA fine-tune a base model")
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="accuracy of a run or base model")
    p.add_argument("--run")
    p.add_argument("--weights")
    p.add_argument("--adapter")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--out", help="write task,accuracy CSV")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("generate", help="greedy completion for one system/user pair")
    p.add_argument("--run")
    p.add_argument("--weights")
    p.add_argument("--adapter")
    p.add_argument("--system", default="")
    p.add_argument("--system-file")
    p.add_argument("--user")
    p.add_argument("--user-file")
    p.add_argument("--cache-dir", help="reuse serialized system-prompt snapshots stored here")
    p.add_argument("--mode", choices=MODES, default="mas")
    p.add_argument("--max-new", type=int, default=16)
    p.add_argument("--server", help="base URL of a running service; the call is forwarded there")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("mask-dump", help="print or save the mask for a segment layout")
    p.add_argument("--segments", required=True, help="comma-separated ids, -1 for generated tokens")
    p.add_argument("--mode", choices=MODES, default="mas")
    p.add_argument("--format", choices=("rows", "pgm"), default="rows")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_mask_dump)

    p = sub.add_parser("atlas", help="classify every head's attention map on one prompt")
    p.add_argument("--run")
    p.add_argument("--weights")
    p.add_argument("--adapter")
    p.add_argument("--prompt-file", required=True, help="JSON with user (and optional system)")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_atlas)

    p = sub.add_parser("sweep", help="lr x seed grid for both masks")
    _add_train_flags(p)
    p.add_argument("--lrs", required=True)
    p.add_argument("--seeds", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("ablate-crossmask", help="2x2 train/eval mask table")
    p.add_argument("--run-mas", required=True)
    p.add_argument("--run-causal", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate_crossmask)

    p = sub.add_parser("ablate-unified", help="separated vs unified prompt segments")
    _add_train_flags(p)
    p.add_argument("--separated-run", help="reuse this completed run as the separated arm")
    p.set_defaults(fn=cmd_ablate_unified)

    p = sub.add_parser("rerun", help="repeat a run from its manifest and check the metrics are identical")
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_rerun)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--weights", required=True)
    p.add_argument("--adapter")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=cmd_serve)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.fn(args)
    except MasError as exc:
        print(str(exc).splitlines()[0], file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"E_IO: {exc}".splitlines()[0], file=sys.stderr)
        return EXIT_CONTRACT
    return 0


if __name__ == "__main__":
    sys.exit(main())
