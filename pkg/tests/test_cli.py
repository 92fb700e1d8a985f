import csv
import json
from contextlib import nullcontext

import pytest

from masattn.cli import RunManifest, main
from masattn.masking import build_mask


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--n", "24", "--facts", "3", "--choices", "2", "--seed", "1",
                 "--out", str(root / "train.jsonl")]) == 0
    assert main(["gen-data", "--n", "8", "--facts", "3", "--choices", "2", "--seed", "1", "--split", "test",
                 "--out", str(root / "test.jsonl")]) == 0
    assert main(["init", "--d", "16", "--heads", "2", "--layers", "2", "--d-ff", "32", "--max-seq", "96",
                 "--out", str(root / "base.masw")]) == 0
    return root


def _train(root, name, mode="mas", extra=()):
    return main(["train", "--weights", str(root / "base.masw"), "--data", str(root / "train.jsonl"),
                 "--eval-data", str(root / "test.jsonl"), "--mode", mode, "--epochs", "1", "--batch-size", "8",
                 "--lora-r", "2", "--lora-alpha", "4", "--warmup-steps", "1", "--lr", "0.01",
                 "--out", str(root / name), *extra])


def test_mask_dump_rows(capsys):
    code, out, _ = run_cli(capsys, "mask-dump", "--segments", "0,0,1,1,-1", "--mode", "mas")
    assert code == 0
    assert out.split() == ["11000", "11000", "11110", "11110", "11111"]


def test_mask_dump_pgm(tmp_path, capsys):
    code, _, _ = run_cli(capsys, "mask-dump", "--segments", "0,1", "--format", "pgm", "--out", tmp_path / "m.pgm")
    assert code == 0
    data = (tmp_path / "m.pgm").read_bytes()
    assert data.startswith(b"P5\n2 2\n255\n") and data.endswith(bytes([255, 0, 255, 255]))
    assert build_mask([0, 1], "mas").n == 2


@pytest.mark.parametrize("argv, code", [
    (["mask-dump", "--segments", "0,x"], "E_VALIDATION"),
    (["mask-dump", "--segments", "0,1,0"], "E_VALIDATION"),
    (["mask-dump", "--segments", "0", "--mode", "bidirectional"], "E_USAGE"),
    (["evaluate", "--weights", "/nonexistent.masw", "--data", "/nonexistent.jsonl"], "E_VALIDATION"),
    (["nosuch"], "E_USAGE"),
])
def test_contract_failures_exit_2_with_one_line(capsys, argv, code):
    with pytest.raises(SystemExit) if code == "E_USAGE" else nullcontext() as ctx:
        rc = main(argv)
    if code == "E_USAGE":
        rc = ctx.value.code
    _, err = capsys.readouterr()
    assert rc == 2
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith(code + ":")


def test_train_writes_manifest_and_metrics(workspace, capsys):
    assert _train(workspace, "run_mas") == 0
    man = RunManifest.read(workspace / "run_mas")
    assert man.complete and man.ended and man.config["train"]["train_mode"] == "mas"
    rows = list(csv.reader(open(workspace / "run_mas" / "metrics.csv")))
    assert rows[0][:2] == ["step", "loss"] and len(rows) == 4
    capsys.readouterr()
    # a completed run directory is never overwritten
    assert _train(workspace, "run_mas") == 2
    assert capsys.readouterr().err.startswith("E_STATE:")


def test_config_file_overrides_flags(workspace):
    (workspace / "cfg.json").write_text(json.dumps({"lora_r": 3}))
    assert _train(workspace, "run_cfg", extra=("--config", str(workspace / "cfg.json"), "--lora-r", "5")) == 0
    assert json.loads((workspace / "run_cfg" / "train_config.json").read_text())["lora_r"] == 3


def test_evaluate_is_repeatable(workspace, capsys):
    if not (workspace / "run_mas").exists():
        _train(workspace, "run_mas")
    outs = []
    for k in range(2):
        assert main(["evaluate", "--run", str(workspace / "run_mas"), "--data", str(workspace / "test.jsonl"),
                     "--out", str(workspace / f"eval{k}.csv")]) == 0
        outs.append((workspace / f"eval{k}.csv").read_bytes())
    assert outs[0] == outs[1]
    assert outs[0].splitlines()[0] == b"task,accuracy"


def test_generate_with_snapshot_cache(workspace, capsys):
    (workspace / "s.txt").write_text("Pick a letter.")
    argv = ["generate", "--weights", workspace / "base.masw", "--system-file", workspace / "s.txt",
            "--user", "a=1 | b?", "--max-new", "4", "--cache-dir", workspace / "cache"]
    results = []
    for _ in range(2):
        code, out, _ = run_cli(capsys, *argv)
        assert code == 0
        results.append(json.loads(out))
    assert [r["system_cache_hit"] for r in results] == [False, True]
    assert results[0]["tokens"] == results[1]["tokens"]
    code, out, _ = run_cli(capsys, *argv[:-2])
    assert json.loads(out)["tokens"] == results[0]["tokens"]
    assert len(list((workspace / "cache").glob("*.masw"))) == 1


def test_generate_needs_user(workspace, capsys):
    code, _, err = run_cli(capsys, "generate", "--weights", workspace / "base.masw")
    assert code == 2 and err.startswith("E_CONFIG:")


def test_crossmask_table(workspace, capsys):
    for name, mode in (("cm_mas", "mas"), ("cm_causal", "causal")):
        assert _train(workspace, name, mode) == 0
    code, out, _ = run_cli(capsys, "ablate-crossmask", "--run-mas", workspace / "cm_mas", "--run-causal",
                           workspace / "cm_causal", "--data", workspace / "test.jsonl", "--out", workspace / "cm.csv")
    assert code == 0
    rows = list(csv.DictReader(open(workspace / "cm.csv")))
    assert {(r["train_mode"], r["eval_mode"]) for r in rows} == {(a, b) for a in ("causal", "mas")
                                                                for b in ("causal", "mas")}


def test_atlas_command(workspace, capsys):
    (workspace / "p.json").write_text(json.dumps({"system": "sys", "user": "a=1 | a?"}))
    code, out, _ = run_cli(capsys, "atlas", "--weights", workspace / "base.masw", "--prompt-file",
                           workspace / "p.json", "--mode", "causal", "--out", workspace / "atlas")
    assert code == 0
    labels = json.loads(out)["labels"]
    assert sum(labels.values()) == 4 and "ForwardLooking" not in labels
    assert len(list((workspace / "atlas").glob("*.pgm"))) == 4


def test_sweep_and_unified(workspace, capsys):
    common = ["--weights", workspace / "base.masw", "--data", workspace / "train.jsonl", "--eval-data",
              workspace / "test.jsonl", "--epochs", "1", "--lora-r", "2", "--lora-alpha", "4", "--warmup-steps", "1"]
    code, out, _ = run_cli(capsys, "sweep", *common, "--lrs", "0.01,0.001", "--seeds", "0", "--out", workspace / "sw")
    assert code == 0 and json.loads(out)["cells"] == 4
    assert len(list(csv.reader(open(workspace / "sw" / "sweep.csv")))) == 5
    code, out, _ = run_cli(capsys, "ablate-unified", *common, "--out", workspace / "un")
    res = json.loads(out)
    assert code == 0 and res["gap"] == res["separated"] - res["unified"]


def test_rerun_reproduces_metrics(workspace, capsys):
    if not (workspace / "run_mas").exists():
        _train(workspace, "run_mas")
    code, out, _ = run_cli(capsys, "rerun", "--run", workspace / "run_mas", "--out", workspace / "run_mas_again")
    assert code == 0 and json.loads(out)["identical"] is True
    assert (workspace / "run_mas" / "metrics.csv").read_bytes() == (workspace / "run_mas_again" / "metrics.csv").read_bytes()


def test_rerun_refuses_changed_inputs(workspace, capsys, tmp_path):
    data = tmp_path / "train.jsonl"
    data.write_bytes((workspace / "train.jsonl").read_bytes())
    assert main(["train", "--weights", str(workspace / "base.masw"), "--data", str(data), "--epochs", "1",
                 "--lora-r", "2", "--out", str(tmp_path / "r")]) == 0
    data.write_text(data.read_text().splitlines()[0] + "\n")
    capsys.readouterr()
    code, _, err = run_cli(capsys, "rerun", "--run", tmp_path / "r", "--out", tmp_path / "r2")
    assert code == 2 and err.startswith("E_STATE:")


def test_unified_reuses_separated_run(workspace, capsys):
    common = ["--weights", workspace / "base.masw", "--data", workspace / "train.jsonl", "--eval-data",
              workspace / "test.jsonl", "--mode", "mas", "--epochs", "1", "--batch-size", "8", "--lora-r", "2",
              "--lora-alpha", "4", "--warmup-steps", "1", "--lr", "0.01"]
    if not (workspace / "run_mas").exists():
        _train(workspace, "run_mas")
    code, out, _ = run_cli(capsys, "ablate-unified", *common, "--separated-run", workspace / "run_mas",
                           "--out", workspace / "un2")
    assert code == 0 and not (workspace / "un2" / "separated").exists()
    res = json.loads(out)
    assert res["gap"] == res["separated"] - res["unified"]
    code, _, err = run_cli(capsys, "ablate-unified", *common[:-2], "--lr", "0.02", "--separated-run",
                           workspace / "run_mas", "--out", workspace / "un3")
    assert code == 2 and err.startswith("E_CONFIG:")


def test_gen_data_base_corpus(tmp_path, capsys):
    code, out, _ = run_cli(capsys, "gen-data", "--task", "base", "--n", "50", "--out", tmp_path / "b.jsonl")
    assert code == 0 and json.loads(out)["written"] == 50
    sizes = {len(json.loads(line)["user"].split(" | ")[0].split()) for line in open(tmp_path / "b.jsonl")}
    assert sizes == {2, 3, 4, 5, 6}
