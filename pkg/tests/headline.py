"""Toy-scale fine-tuning runs shared by acceptance criteria 7-10 and 12.

Everything goes through the command-line interface, so each run directory has a
manifest and can be replayed with ``masattn rerun``. Artifacts and stage timings
are cached under ``root``; a stage is skipped when its output already exists.
"""

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from masattn.cli import RunManifest, crossmask_table, main
from masattn.chatdata import read_jsonl
from masattn.training import MetricsHistory

SEEDS = (0, 1, 2, 3, 4)
MODES = ("causal", "mas")
TARGETS = "w_q,w_k,w_v,w_u,w_d"
BASE_STEPS = 2000
BASE_CORPUS = BASE_STEPS * 32


@dataclass
class Headline:
    root: Path
    timings: dict = field(default_factory=dict)
    runs: dict = field(default_factory=dict)  # (mode, seed) -> run dir
    crossmask: dict = field(default_factory=dict)  # seed -> {(train, eval): acc}
    unified: dict = field(default_factory=dict)

    def history(self, mode: str, seed: int) -> MetricsHistory:
        return MetricsHistory.from_csv(self.runs[mode, seed] / "metrics.csv")

    def final(self, mode: str) -> list[float]:
        return [self.history(mode, s).final_accuracy() for s in SEEDS]


def _cli(*argv) -> None:
    code = main([str(a) for a in argv])
    if code != 0:
        raise RuntimeError(f"masattn {argv[0]} exited with {code}")


def _stage(h: Headline, name: str, done: bool, fn) -> None:
    if not done:
        t0 = time.perf_counter()
        fn()
        h.timings[name] = time.perf_counter() - t0
        (h.root / "timings.json").write_text(json.dumps(h.timings, indent=2, sort_keys=True))


def _complete(run_dir: Path) -> bool:
    try:
        return RunManifest.read(run_dir).complete
    except Exception:
        return False


def build(root: Path) -> Headline:
    root.mkdir(parents=True, exist_ok=True)
    h = Headline(root)
    if (root / "timings.json").exists():
        h.timings = json.loads((root / "timings.json").read_text())

    corpus, base = root / "base_corpus.jsonl", root / "base.masw"
    train, test = root / "train.jsonl", root / "test.jsonl"
    _stage(h, "data", corpus.exists() and train.exists() and test.exists(), lambda: (
        _cli("gen-data", "--task", "base", "--n", BASE_CORPUS, "--seed", 0, "--out", corpus),
        _cli("gen-data", "--n", 5000, "--facts", 6, "--choices", 4, "--seed", 0, "--out", train),
        _cli("gen-data", "--n", 1000, "--facts", 6, "--choices", 4, "--seed", 0, "--split", "test", "--out", test)))
    _stage(h, "base", base.exists(), lambda: _cli(
        "init", "--d", 64, "--heads", 4, "--layers", 2, "--d-ff", 256, "--max-seq", 160, "--seed", 0,
        "--data", corpus, "--steps", BASE_STEPS, "--out", base))

    for seed in SEEDS:
        for mode in MODES:
            run_dir = root / "runs" / f"{mode}_s{seed}"
            h.runs[mode, seed] = run_dir
            _stage(h, f"train_{mode}_s{seed}", _complete(run_dir), lambda: _cli(
                "train", "--weights", base, "--data", train, "--eval-data", test, "--mode", mode,
                "--seed", seed, "--lora-targets", TARGETS, "--out", run_dir))

    cross_path = root / "crossmask.json"
    if not cross_path.exists():
        examples = read_jsonl(test)
        table = {}
        for seed in SEEDS:
            cells = crossmask_table({m: h.runs[m, seed] for m in MODES}, examples)
            table[str(seed)] = {f"{tm}->{em}": acc for (tm, em), acc in cells.items()}
        cross_path.write_text(json.dumps(table, indent=2, sort_keys=True))
    h.crossmask = {int(s): {tuple(k.split("->")): v for k, v in cells.items()}
                   for s, cells in json.loads(cross_path.read_text()).items()}

    uni = root / "unified"
    _stage(h, "unified", (uni / "unified.csv").exists(), lambda: _cli(
        "ablate-unified", "--weights", base, "--data", train, "--eval-data", test, "--mode", "mas", "--seed", 0,
        "--lora-targets", TARGETS, "--separated-run", h.runs["mas", 0], "--out", uni))
    rows = (uni / "unified.csv").read_text().splitlines()[1:]
    h.unified = {k: float(v) for k, v in (r.split(",") for r in rows)}
    return h
