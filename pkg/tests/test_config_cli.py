"""Configuration validation, seed fan-out, manifests and the command line."""

import csv
import json

import numpy as np
import pytest

from mapd_lab import cli
from mapd_lab import config as C
from mapd_lab import manifest as M

from conftest import TINY_CONFIG


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_errors_are_path_qualified():
    with pytest.raises(C.ConfigError, match=r"backbone\.d_model"):
        C.resolve({"backbone": {"d_model": "wide"}})
    with pytest.raises(C.ConfigError, match=r"eval\.shots\.1"):
        C.resolve({"eval": {"shots": [1, 0]}})
    with pytest.raises(C.ConfigError, match="valid methods: mapd"):
        C.resolve({"trainer": {"methods": ["mapd", "reptile"]}})


def test_seed_override_and_hash():
    cfg = C.resolve({}, seed=7)
    assert cfg["seed"] == 7 and cfg["seeds"] == [7]
    assert C.config_hash(cfg) == C.config_hash(json.loads(C.canonical(cfg)))
    assert C.config_hash(cfg) != C.config_hash(C.resolve({}, seed=8))


def test_derived_seeds_are_deterministic_and_label_sensitive():
    a = C.derive_seed(0, "test", "operator_induction", 4, 0)
    assert a == C.derive_seed(0, "test", "operator_induction", 4, 0)
    others = {C.derive_seed(r, "test", f, s, i) for r in range(2) for f in "ab" for s in (1, 2) for i in range(5)}
    assert len(others) == 40


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"trainer": {"methods": ["sgd"]}}')
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert "valid methods" in capsys.readouterr().err
    assert cli.main(["train", "--config", str(TINY_CONFIG), "--out", str(tmp_path / "o")]) == cli.EXIT_DEPENDENCY
    assert "pretrain" in capsys.readouterr().err
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert cli.main(["eval", "--config", str(TINY_CONFIG), "--out", str(blocker / "sub")]) == cli.EXIT_RUNTIME
    with pytest.raises(SystemExit):
        cli.main(["analyze", "--kind", "nonsense"])


def test_manifests_cover_every_file_once(tiny_runs):
    run = tiny_runs[0]
    assert M.orphans(run) == [] and M.verify(run) == []
    for man in M.load_manifests(run):
        assert man["config_hash"] == C.config_hash(man["config"])


def test_training_logs_have_one_line_per_step(tiny_runs):
    for path in (tiny_runs[0] / "logs").glob("train-*.jsonl"):
        lines = path.read_text().splitlines()
        steps = [json.loads(l)["step"] for l in lines]
        if "modelavg" in path.name:
            continue  # one sub-run per family, each counting from 1
        assert steps == list(range(1, len(lines) + 1))


def test_checkpoints_identical_across_runs(tiny_runs):
    a, b = tiny_runs
    for p in sorted((a / "checkpoints").glob("*.npz")) + [a / "stage1.npz"]:
        assert M.file_hash(p) == M.file_hash(b / p.relative_to(a)), p.name


def test_eval_table_structure(tiny_runs):
    cfg = C.load(TINY_CONFIG)
    rows = read_csv(tiny_runs[0] / "reports" / "eval.csv")
    methods, fams, shots = cfg["trainer"]["methods"], cfg["eval"]["families"], cfg["eval"]["shots"]
    for method in methods:
        for mode in cfg["eval"]["modes"]:
            mine = [r for r in rows if r["method"] == method and r["mode"] == mode]
            assert len(mine) == len(fams) * len(shots)
    report = json.loads((tiny_runs[0] / "reports" / "eval.json").read_text())
    for key, mean in report["mean_across_shots"].items():
        method, mode, family = key.split("|")
        accs = [r["accuracy"] for r in report["rows"] if (r["method"], r["mode"], r["family"]) == (method, mode, family)]
        assert mean == pytest.approx(float(np.mean(accs)), abs=1e-12)


def test_analysis_layouts(tiny_runs):
    cfg = C.load(TINY_CONFIG)
    an = cfg["analysis"]
    pert = read_csv(tiny_runs[0] / "reports" / "perturb.csv")
    for method in cfg["trainer"]["methods"]:
        mine = [r for r in pert if r["method"] == method]
        assert len(mine) == len(an["perturbations"]) * len(an["perturb_shots"])
    sweep = read_csv(tiny_runs[0] / "reports" / "prompt-sweep.csv")
    assert len(sweep) == len(an["prompt_grid"]) * len(cfg["eval"]["shots"])
    assert sorted({int(r["m"]) for r in sweep}) == an["prompt_grid"]


def test_report_merges_runs(tiny_runs, tmp_path):
    out = tmp_path / "merged"
    assert cli.main(["report", "--runs", str(tiny_runs[0]), str(tiny_runs[1]), "--config", str(TINY_CONFIG),
                     "--out", str(out)]) == 0
    rows = read_csv(out / "reports" / "report.csv")
    assert len(rows) == 2 * len(read_csv(tiny_runs[0] / "reports" / "eval.csv"))
    assert cli.main(["report", "--runs", str(tmp_path / "nowhere"), "--out", str(out)]) == cli.EXIT_DEPENDENCY
