"""``mapd-lab`` command line: pretrain | train | eval | analyze | report.

Exit codes: 0 success, 2 configuration or usage error, 3 missing dependency
(an earlier stage has not been run), 4 runtime failure.
"""

from __future__ import annotations

import os
import sys

_THREADS = os.environ.get("MAPD_LAB_THREADS")
if _THREADS:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _THREADS

import argparse  # noqa: E402
import json  # noqa: E402
import time  # noqa: E402
from pathlib import Path  # noqa: E402

from . import config as C  # noqa: E402
from . import experiments as X  # noqa: E402
from . import manifest as M  # noqa: E402
from .adapt import AdaptationError, MODES  # noqa: E402
from .tasks import ConfigurationError  # noqa: E402

ANALYSES = ("entropy", "flops", "perturb", "selection", "prompt-sweep", "convergence")
EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_RUNTIME = 0, 2, 3, 4


class DependencyError(RuntimeError):
    pass


class JsonlLog:
    """Append-only JSON-lines writer; one record per call."""

    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.path = path
        self.fh = open(path, "w")
        self.count = 0

    def __call__(self, rec: dict):
        self.fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self.count += 1

    def close(self):
        self.fh.close()


def _say(msg: str):
    print(msg, flush=True)


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.get("output_dir") or Path("runs") / cfg["name"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot create output directory {out}: {err}") from err
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    return out


def _load_config(args) -> dict:
    if args.config:
        return C.load(args.config, args.seed)
    return C.resolve({}, args.seed)


def _stage1_path(out: Path) -> Path:
    return out / "stage1.npz"


def _ckpt_path(out: Path, method: str, seed: int, family: str | None = None) -> Path:
    tail = f"-{family}" if family else ""
    return out / "checkpoints" / f"{method}-s{seed}{tail}.npz"


def _backbone(cfg):
    return X.get_backbone(cfg, log_every=500)


def _load_trained(out: Path, methods, seeds) -> dict:
    params = {}
    for method in methods:
        for seed in seeds:
            path = _ckpt_path(out, method, seed)
            if not path.exists():
                raise DependencyError(f"missing checkpoint {path}; run `mapd-lab train` first")
            params[(method, seed)] = X.load_mapper(path)[0]
    return params


# --- subcommands ------------------------------------------------------------------

def cmd_pretrain(cfg: dict, out: Path) -> Path:
    man = M.start("pretrain", cfg, C.config_hash(cfg))
    bb = _backbone(cfg)
    log = JsonlLog(out / "logs" / "pretrain.jsonl")
    try:
        params = X.get_stage1(cfg, bb, log=log)
    finally:
        log.close()
    path = _stage1_path(out)
    X.save_mapper(path, params, {"stage1_key": X.stage1_key(cfg), "backbone_key": X.backbone_key(cfg)})
    man.add(out, path)
    man.add(out, log.path)
    man.write(out)
    _say(f"stage-1 checkpoint: {path}")
    return path


def cmd_train(cfg: dict, out: Path) -> list[Path]:
    stage1 = _stage1_path(out)
    if not stage1.exists():
        raise DependencyError(f"missing stage-1 checkpoint {stage1}; run `mapd-lab pretrain` first")
    init, _ = X.load_mapper(stage1)
    man = M.start("train", cfg, C.config_hash(cfg))
    bb = _backbone(cfg)
    paths = []
    for method in cfg["trainer"]["methods"]:
        for seed in cfg["seeds"]:
            t0 = time.time()
            steps = JsonlLog(out / "logs" / f"train-{method}-s{seed}.jsonl")
            vals = JsonlLog(out / "logs" / f"val-{method}-s{seed}.jsonl")
            try:
                res = X.train_method(cfg, method, seed, bb, init, lambda r: (vals if "val_loss" in r else steps)(r))
            finally:
                steps.close()
                vals.close()
            meta = {"method": method, "seed": seed, "config_hash": C.config_hash(cfg),
                    "rates": [float(r) for r in res["rates"]]}
            path = _ckpt_path(out, method, seed)
            path.parent.mkdir(parents=True, exist_ok=True)
            X.save_mapper(path, res["params"], meta)
            new = [path, steps.path, vals.path]
            for fam, p in sorted(res.get("family_params", {}).items()):
                fp = _ckpt_path(out, method, seed, fam)
                X.save_mapper(fp, p, {**meta, "family": fam})
                new.append(fp)
            for p in new:
                man.add(out, p)
            paths += new
            _say(f"trained {method} seed {seed}: {steps.count} steps in {time.time() - t0:.0f}s")
    man.write(out)
    return paths


def cmd_eval(cfg: dict, out: Path, shots=None, modes=None) -> dict:
    methods, seeds = cfg["trainer"]["methods"], cfg["seeds"]
    params = _load_trained(out, methods, seeds)
    man = M.start("eval", cfg, C.config_hash(cfg))
    bb = _backbone(cfg)
    records = []
    for method in methods:
        t0 = time.time()
        by_seed = {s: params[(method, s)] for s in seeds}
        records += X.evaluate(cfg, bb, by_seed, method, shots=shots, modes=modes)
        _say(f"evaluated {method} in {time.time() - t0:.0f}s")
    rows = X.table_rows(cfg, records)
    means = {"|".join(k): v for k, v in X.mean_across_shots(rows).items()}
    report = {"config_hash": C.config_hash(cfg), "rows": rows, "mean_across_shots": means, "episodes": records,
              "methods": {m: X.config_hash(X.trainer_config(cfg, m, 0).__dict__) for m in methods}}
    j = X.write_json(out / "reports" / "eval.json", report)
    c = X.write_csv(out / "reports" / "eval.csv", rows)
    man.add(out, j)
    man.add(out, c)
    man.write(out)
    _say(X.format_grid(rows))
    return report


def cmd_analyze(cfg: dict, out: Path, kind: str) -> dict:
    if kind not in ANALYSES:
        raise ConfigurationError(f"unknown analysis {kind!r}; valid kinds: {', '.join(ANALYSES)}")
    seeds = cfg["seeds"]
    man = M.start(f"analyze-{kind}", cfg, C.config_hash(cfg))
    bb = _backbone(cfg)
    files = []
    if kind == "prompt-sweep":
        rows = X.prompt_sweep(cfg, bb)
        result = {"rows": rows}
        files.append(X.write_csv(out / "reports" / "prompt-sweep.csv", rows, ("m",) + X.CSV_COLUMNS))
    elif kind == "perturb":
        methods = cfg["trainer"]["methods"]
        rows = X.perturb_analysis(cfg, bb, _load_trained(out, methods, seeds), methods)
        result = {"rows": rows, "mean_drop": X.perturbation_drops(rows)}
        files.append(X.write_csv(out / "reports" / "perturb.csv", rows, ("perturbation",) + X.CSV_COLUMNS + ("drop",)))
    else:
        mapd = {s: p for (_, s), p in _load_trained(out, ["mapd"], seeds).items()}
        if kind == "entropy":
            rows = X.entropy_analysis(cfg, bb, mapd)
            result = {"rows": rows}
            files.append(X.write_csv(out / "reports" / "entropy.csv", rows))
        elif kind == "flops":
            result = X.flops_analysis(cfg, bb, mapd)
            files.append(X.write_csv(out / "reports" / "flops.csv", result["grid"], ("steps",) + X.CSV_COLUMNS))
            files.append(X.write_csv(out / "reports" / "flops-curves.csv", result["curves"],
                                     ("mode", "budget_tflops", "accuracy", "shots", "steps", "tflops")))
        elif kind == "selection":
            rows = X.selection_analysis(cfg, bb, mapd)
            result = {"rows": rows}
            files.append(X.write_csv(out / "reports" / "selection.csv", rows, ("selection",) + X.CSV_COLUMNS))
        else:
            result = X.convergence_analysis(cfg, bb, mapd)
            rows = [{"family": f, "step": k, "accuracy": a} for f, r in result.items() for k, a in enumerate(r["curve"])]
            files.append(X.write_csv(out / "reports" / "convergence.csv", rows, ("family", "step", "accuracy")))
    files.append(X.write_json(out / "reports" / f"{kind}.json", {"config_hash": C.config_hash(cfg), **result}))
    for f in files:
        man.add(out, f)
    man.write(out)
    _say(f"{kind} analysis written to {out / 'reports'}")
    return result


def cmd_report(cfg: dict, out: Path, runs) -> list[dict]:
    """Merge the evaluation tables of several runs into one grid."""
    rows = []
    for run in runs:
        path = Path(run) / "reports" / "eval.json"
        if not path.exists():
            raise DependencyError(f"missing {path}; run `mapd-lab eval` in {run} first")
        for r in json.loads(path.read_text())["rows"]:
            rows.append({**r, "run": str(run)})
    man = M.start("report", cfg, C.config_hash(cfg))
    files = [X.write_csv(out / "reports" / "report.csv", rows, ("run",) + X.CSV_COLUMNS),
             X.write_json(out / "reports" / "report.json", {"rows": rows})]
    for f in files:
        man.add(out, f)
    man.write(out)
    _say(X.format_grid(rows))
    return rows


# --- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mapd-lab", description="Meta-learned prompt distillation lab.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration (defaults if omitted)")
        sp.add_argument("--seed", type=int, help="single seed overriding the configured seed list")
        sp.add_argument("--out", help="output directory")
        return sp

    common(sub.add_parser("pretrain", help="warm-up backbone and stage-1 alignment"))
    common(sub.add_parser("train", help="train the configured methods from the stage-1 checkpoint"))
    ev = common(sub.add_parser("eval", help="few-shot evaluation of trained checkpoints"))
    ev.add_argument("--shots", help="comma-separated shot counts")
    ev.add_argument("--mode", choices=MODES + ("both",), default="both")
    an = common(sub.add_parser("analyze", help="entropy, FLOPs, perturbation, selection or prompt-count analysis"))
    an.add_argument("--kind", required=True, choices=ANALYSES)
    rp = common(sub.add_parser("report", help="merge evaluation tables of several runs"))
    rp.add_argument("--runs", nargs="+", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        out = _out_dir(args, cfg)
        if args.command == "pretrain":
            cmd_pretrain(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, out)
        elif args.command == "eval":
            shots = [int(s) for s in args.shots.split(",")] if args.shots else None
            modes = list(MODES) if args.mode == "both" else [args.mode]
            cmd_eval(cfg, out, shots, modes)
        elif args.command == "analyze":
            cmd_analyze(cfg, out, args.kind)
        else:
            cmd_report(cfg, out, args.runs)
    except (C.ConfigError, ConfigurationError, AdaptationError) as err:
        print(f"mapd-lab: configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as err:
        print(f"mapd-lab: {err}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except Exception as err:  # noqa: BLE001
        print(f"mapd-lab: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
