"""Experiment drivers shared by the CLI, the scripts and the acceptance suite.

Everything is a pure function of the resolved run configuration and a seed.
The warm-up backbone and the stage-1 aligned mapper do not depend on the run
seed; they are cached on disk under a key derived from the configuration
sections they depend on.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import adapt as ad
from . import tasks as tk
from . import trainers as tr
from .backbone import FrozenBackbone, init_backbone, load_arrays, load_backbone, save_arrays, save_backbone
from .config import backbone_config, config_hash, derive_seed
from .flops import flops_count, flops_matched_sweep
from .mapper import MapperConfig, MapperParams, init_mapper

CACHE_ENV = "MAPD_LAB_CACHE"
# bump when the warm-up corpus or the alignment items change meaning
PRETRAIN_TAG = "pretrain/3"
CSV_COLUMNS = ("method", "mode", "family", "shots", "accuracy", "ci95", "entropy", "tflops")


def cache_root() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "mapd-lab"))


def _key(obj) -> str:
    return config_hash(obj)[:16]


def _atomic(path: Path, write: Callable[[Path], None]):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    write(tmp)
    os.replace(tmp, path)


# --- pretrained artifacts ---------------------------------------------------------

def backbone_key(cfg: dict) -> str:
    return _key({"backbone": cfg["backbone"], "tag": PRETRAIN_TAG})


def get_backbone(cfg: dict, cache: Path | None = None, log_every: int = 0) -> FrozenBackbone:
    """Warm-up backbone for ``cfg``, trained once and then read from the cache."""
    path = Path(cache or cache_root()) / f"backbone-{backbone_key(cfg)}.npz"
    if path.exists():
        return load_backbone(path)
    model = init_backbone(backbone_config(cfg), log_every=log_every)
    _atomic(path, lambda p: save_backbone(model, p))
    return model


def mapper_config(cfg: dict, m: int | None = None) -> MapperConfig:
    mc = cfg["mapper"]
    return MapperConfig(m=m or mc["m"], d_in=mc["d_in"], d_model=cfg["backbone"]["d_model"],
                        num_heads=mc["num_heads"], kind=mc["kind"])


def distribution(cfg: dict, seed: int) -> tk.MetaDistribution:
    d = cfg["distribution"]
    dc = tk.DistributionConfig(families=tuple(d["families"]),
                               episodes={f: d["episodes_per_family"] for f in d["families"]},
                               val_fraction=d["val_fraction"], seed=derive_seed(seed, "distribution"))
    return tk.build_meta_distribution(dc)


def stage1_key(cfg: dict, m: int | None = None) -> str:
    return _key({"backbone": backbone_key(cfg), "mapper": asdict(mapper_config(cfg, m)),
                 "alignment": cfg["alignment"], "distribution": cfg["distribution"], "tag": PRETRAIN_TAG})


def align(cfg: dict, backbone, m: int | None = None, log: Callable | None = None) -> tuple[MapperParams, dict]:
    """Stage-1 alignment from a fresh mapper; returns ``(params, history)``."""
    a = cfg["alignment"]
    mc = mapper_config(cfg, m)
    init = init_mapper(mc.m, mc.d_in, mc.d_model, mc.num_heads, seed=derive_seed(a["seed"], "mapper-init"), kind=mc.kind)
    items = tr.caption_pairs(distribution(cfg, a["seed"]).train, seed=derive_seed(a["seed"], "captions"))
    return tr.pretrain_align(init, backbone, items, a["steps"], lr=a["lr"], batch_size=a["batch_size"],
                             seed=derive_seed(a["seed"], "align"), log=log)


def save_mapper(path, params: MapperParams, meta: dict | None = None):
    save_arrays(path, {"kind": "mapper", "mapper": asdict(params.config), **(meta or {})}, params.arrays)


def load_mapper(path) -> tuple[MapperParams, dict]:
    meta, arrays = load_arrays(path)
    if meta.get("kind") != "mapper":
        raise ValueError(f"{path} is not a mapper checkpoint")
    return MapperParams(MapperConfig(**meta["mapper"]), arrays), meta


def get_stage1(cfg: dict, backbone, cache: Path | None = None, m: int | None = None,
               log: Callable | None = None) -> MapperParams:
    path = Path(cache or cache_root()) / f"stage1-{stage1_key(cfg, m)}.npz"
    if path.exists():
        return load_mapper(path)[0]
    params, hist = align(cfg, backbone, m, log)
    _atomic(path, lambda p: save_mapper(p, params, {"val": hist["val"]}))
    return params


# --- stage 2 ------------------------------------------------------------------------

def trainer_config(cfg: dict, method: str, seed: int) -> tr.TrainerConfig:
    t = cfg["trainer"]
    return tr.TrainerConfig(method=method, inner_steps=t["inner_steps"], alpha_init=t["alpha_init"], beta=t["beta"],
                            batch_meta_tasks=t["batch_meta_tasks"], epochs=t["epochs"],
                            seed=derive_seed(seed, "trainer", method), outer_optimizer=t["outer_optimizer"],
                            learn_rates=t["learn_rates"], examples_per_step=t["examples_per_step"])


def train_method(cfg: dict, method: str, seed: int, backbone, init: MapperParams, log: Callable | None = None) -> dict:
    return tr.train(trainer_config(cfg, method, seed), distribution(cfg, seed), backbone, init, log)


def train_all(cfg: dict, backbone, init: MapperParams, methods: Sequence[str] | None = None,
              seeds: Sequence[int] | None = None, log: Callable | None = None) -> dict:
    """``{(method, seed): params}`` for every requested method and seed."""
    out = {}
    for method in methods or cfg["trainer"]["methods"]:
        for seed in seeds or cfg["seeds"]:
            out[(method, seed)] = train_method(cfg, method, seed, backbone, init, log)["params"]
    return out


# --- evaluation ------------------------------------------------------------------------

def adaptation_config(cfg: dict, method: str, mode: str = "finetune", max_steps: int | None = None) -> ad.AdaptationConfig:
    a = cfg["adaptation"]
    target = a["target"]
    lr = a["lr"]["lora" if target.startswith("lora") and target != "lora_half_plus_mapper" else method]
    return ad.AdaptationConfig(mode=mode, max_steps=a["max_steps"] if max_steps is None else max_steps,
                               lr=lr, val_pool_size=a["val_pool_size"], target=target)


def test_episodes(cfg: dict, family: str, shots: int, seed: int, n: int | None = None,
                  n_query: int | None = None) -> tuple[list, list]:
    """Test meta-tasks and their validation pools for one (family, shots, seed) cell."""
    e = cfg["eval"]
    n = e["episodes"] if n is None else n
    nq = e["n_query"] if n_query is None else n_query
    tasks, pools = [], []
    for i in range(n):
        t = tk.gen_episode(family, shots, nq, seed=derive_seed(seed, "test", family, shots, i))
        tasks.append(t)
        pools.append(tk.validation_pool(t, cfg["adaptation"]["val_pool_size"], seed=derive_seed(seed, "val", family, shots, i)))
    return tasks, pools


def run_cell(params: MapperParams, backbone, tasks: Sequence, pools: Sequence, mode: str,
             acfg: ad.AdaptationConfig, track: bool = False) -> dict:
    """Per-episode correctness ``[E, Q]`` for one group of equal-shot episodes.

    Fine-tuning also returns the chosen steps and, if ``track``, the full
    adaptation record.
    """
    if mode == "icl":
        out, _ = ad.eval_icl(params, backbone, tasks)
        return {"correct": out.correct, "chosen": None, "adapt": None}
    if not tasks[0].support or acfg.max_steps == 0:
        out, _ = ad.eval_queries(params.stack(len(tasks)), backbone, tasks)
        return {"correct": out.correct, "chosen": np.zeros(len(tasks), dtype=np.int64), "adapt": None}
    res = ad.finetune_group(params, backbone, tasks, acfg, pools, track_queries=track)
    out, _ = ad.eval_queries(res.params, backbone, tasks, res.lora, acfg.target)
    return {"correct": out.correct, "chosen": res.chosen_step, "adapt": res}


def _records(method, seed, mode, family, shots, cell, extra=None) -> list[dict]:
    recs = []
    for i, row in enumerate(cell["correct"]):
        r = {"method": method, "seed": seed, "mode": mode, "family": family, "shots": shots, "episode": i,
             "correct": [bool(c) for c in row],
             "chosen_step": None if cell["chosen"] is None else int(cell["chosen"][i])}
        r.update(extra or {})
        recs.append(r)
    return recs


def evaluate(cfg: dict, backbone, params_by_seed: dict, method: str, families=None, shots=None, modes=None,
             progress: Callable | None = None) -> list[dict]:
    """Per-episode records for one method over families x shots x modes x seeds."""
    e = cfg["eval"]
    recs = []
    for seed in sorted(params_by_seed):
        params = params_by_seed[seed]
        for family in families or e["families"]:
            for k in shots or e["shots"]:
                tasks, pools = test_episodes(cfg, family, k, seed)
                for mode in modes or e["modes"]:
                    cell = run_cell(params, backbone, tasks, pools, mode, adaptation_config(cfg, method, mode))
                    recs += _records(method, seed, mode, family, k, cell)
                    if progress:
                        progress(method, seed, family, k, mode, float(np.mean(cell["correct"])))
    return recs


def query_lengths(tasks: Sequence) -> tuple[int, int]:
    """Longest question and answer (tokens) over an episode group."""
    ex = [x for t in tasks for x in list(t.support) + list(t.query)]
    return max(len(x.question) for x in ex), max(len(x.answer) for x in ex)


def cell_tflops(cfg: dict, family: str, shots: int, mode: str, steps: int) -> float:
    """Analytic per-query cost on a representative episode of the cell."""
    t = tk.gen_episode(family, shots, 1, seed=derive_seed(0, "flops", family, shots))
    q_len, a_len = query_lengths([t])
    return flops_count(backbone_config(cfg), mapper_config(cfg), mode, shots, steps if mode == "finetune" else 0,
                       a_len, q_len, n_patches=t.query[0].z_v.shape[0], n_support=len(t.support)).tflops


def summarize(records: Sequence[dict], ci: str = "wald", keys=("method", "mode", "family", "shots")) -> list[dict]:
    """Pooled accuracy and 95% half-width per key, in first-seen order."""
    groups: dict = {}
    for r in records:
        groups.setdefault(tuple(r[k] for k in keys), []).extend(r["correct"])
    rows = []
    for key, vals in groups.items():
        p, h = ad.binomial_ci(int(sum(vals)), len(vals), ci)
        rows.append({**dict(zip(keys, key)), "correct": int(sum(vals)), "total": len(vals), "accuracy": p, "ci95": h})
    return rows


def table_rows(cfg: dict, records: Sequence[dict]) -> list[dict]:
    rows = summarize(records, cfg["eval"]["ci"])
    steps = cfg["adaptation"]["max_steps"]
    for r in rows:
        r["entropy"] = None
        r["tflops"] = cell_tflops(cfg, r["family"], r["shots"], r["mode"], steps)
    return rows


def mean_across_shots(rows: Sequence[dict]) -> dict:
    """``{(method, mode, family): mean of per-shot accuracies}``."""
    acc: dict = {}
    for r in rows:
        acc.setdefault((r["method"], r["mode"], r["family"]), []).append(r["accuracy"])
    return {k: float(np.mean(v)) for k, v in acc.items()}


def format_grid(rows: Sequence[dict]) -> str:
    """Methods x families x shots, ``acc ± ci`` in points, plus the mean across shots."""
    shots = sorted({r["shots"] for r in rows})
    means = mean_across_shots(rows)
    head = f"{'method':<14}{'mode':<10}{'family':<20}" + "".join(f"{f'{k}-shot':>14}" for k in shots) + f"{'mean':>8}"
    lines = [head, "-" * len(head)]
    seen = []
    for r in rows:
        key = (r["method"], r["mode"], r["family"])
        if key not in seen:
            seen.append(key)
    for key in seen:
        cells = {r["shots"]: r for r in rows if (r["method"], r["mode"], r["family"]) == key}
        txt = "".join(f"{100 * cells[k]['accuracy']:>8.1f}±{100 * cells[k]['ci95']:<5.1f}" if k in cells else f"{'-':>14}"
                      for k in shots)
        lines.append(f"{key[0]:<14}{key[1]:<10}{key[2]:<20}{txt}{100 * means[key]:>8.1f}")
    return "\n".join(lines)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def csv_text(rows: Sequence[dict], columns: Sequence[str] = CSV_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(path, rows: Sequence[dict], columns: Sequence[str] = CSV_COLUMNS) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(rows, columns))
    return path


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


# --- analyses ---------------------------------------------------------------------------

def entropy_analysis(cfg: dict, backbone, params_by_seed: dict, method: str = "mapd", families=None) -> list[dict]:
    """Normalized attention entropy over soft-prompt positions per (mode, family, shots)."""
    an = cfg["analysis"]
    rows = []
    for family in families or cfg["eval"]["families"]:
        for mode in ("finetune", "icl"):
            for k in an["entropy_shots"]:
                if k == 0 and (mode == "icl" or family == "concept_binding"):
                    continue
                ents, correct = [], []
                for seed in sorted(params_by_seed):
                    params = params_by_seed[seed]
                    tasks, pools = test_episodes(cfg, family, k, seed, n=an["entropy_episodes"])
                    acfg = adaptation_config(cfg, method, mode)
                    if mode == "icl":
                        out, batch = ad.eval_icl(params, backbone, tasks, want_attention=True)
                    else:
                        adapted, lora = params.stack(len(tasks)), {}
                        if k and acfg.max_steps:
                            res = ad.finetune_group(params, backbone, tasks, acfg, pools)
                            adapted, lora = res.params, res.lora
                        out, batch = ad.eval_queries(adapted, backbone, tasks, lora, acfg.target, want_attention=True)
                    ents.append(ad.attention_entropy_from(out.attentions, batch))
                    correct.append(out.correct.reshape(-1))
                c = np.concatenate(correct)
                p, h = ad.binomial_ci(int(c.sum()), c.size, cfg["eval"]["ci"])
                rows.append({"method": method, "mode": mode, "family": family, "shots": k, "accuracy": p,
                             "ci95": h, "entropy": float(np.concatenate(ents).mean()), "tflops": None})
    return rows


def convergence_analysis(cfg: dict, backbone, params_by_seed: dict, method: str = "mapd", families=None,
                         shots: int | None = None, extended_steps: int | None = None) -> dict:
    """Query accuracy after every adaptation step of an extended run.

    Returns per-family curves (raw step-k parameters), the accuracy of
    validation selection restricted to the default budget and to the
    extended budget, and the steps chosen under the default budget.
    """
    an = cfg["analysis"]
    K = cfg["adaptation"]["max_steps"]
    Kx = extended_steps or an["extended_steps"]
    shots = shots or an["convergence_shots"]
    out = {}
    for family in families or cfg["eval"]["families"]:
        qc, vl = [], []
        for seed in sorted(params_by_seed):
            tasks, pools = test_episodes(cfg, family, shots, seed, n=an["convergence_episodes"])
            res = ad.finetune_group(params_by_seed[seed], backbone, tasks,
                                    adaptation_config(cfg, method, max_steps=Kx), pools, track_queries=True)
            qc.append(res.query_correct)
            vl.append(res.val_loss)
        q = np.concatenate(qc, axis=1)          # [Kx+1, E, Q]
        v = np.concatenate(vl, axis=1)          # [Kx+1, E]
        E = q.shape[1]
        pick = lambda upto: q[v[:upto + 1].argmin(0), np.arange(E)].mean()
        out[family] = {"curve": q.mean(axis=(1, 2)).tolist(), "selected_default": float(pick(K)),
                       "selected_extended": float(pick(Kx)), "chosen_default": v[:K + 1].argmin(0).tolist(),
                       "budget": K, "extended": Kx, "shots": shots, "queries": int(q[0].size)}
    return out


def flops_analysis(cfg: dict, backbone, params_by_seed: dict, method: str = "mapd", family: str = "operator_induction") -> dict:
    """Accuracy and analytic cost of every (mode, shots, steps) configuration, plus matched curves."""
    an = cfg["analysis"]
    ci = cfg["eval"]["ci"]
    steps_grid = sorted(an["flops_steps"])
    Kx = steps_grid[-1]
    by_cfg: dict = {}
    for seed in sorted(params_by_seed):
        params = params_by_seed[seed]
        for k in an["flops_shots"]:
            tasks, pools = test_episodes(cfg, family, k, seed, n=an["flops_episodes"])
            icl = run_cell(params, backbone, tasks, pools, "icl", adaptation_config(cfg, method, "icl"))
            by_cfg.setdefault(("icl", k, 0), []).append(icl["correct"].reshape(-1))
            res = ad.finetune_group(params, backbone, tasks, adaptation_config(cfg, method, max_steps=Kx), pools,
                                    track_queries=True)
            E = len(tasks)
            for s in steps_grid:
                chosen = res.val_loss[:s + 1].argmin(0)
                by_cfg.setdefault(("finetune", k, s), []).append(res.query_correct[chosen, np.arange(E)].reshape(-1))
    grid = []
    for (mode, k, s), vals in by_cfg.items():
        c = np.concatenate(vals)
        p, h = ad.binomial_ci(int(c.sum()), c.size, ci)
        tf = cell_tflops(cfg, family, k, mode, s)
        grid.append({"method": method, "mode": mode, "family": family, "shots": k, "steps": s, "accuracy": p,
                     "ci95": h, "entropy": None, "tflops": tf, "flops": tf * 1e12})
    budgets = np.geomspace(min(g["flops"] for g in grid), max(g["flops"] for g in grid), an["budget_points"])
    curves = flops_matched_sweep(grid, [float(b) for b in budgets])
    curve_rows = [{"mode": mode, "budget_tflops": pt.budget / 1e12, "accuracy": pt.accuracy, "shots": pt.shots,
                   "steps": pt.steps, "tflops": pt.flops / 1e12}
                  for mode, pts in sorted(curves.points.items()) for pt in pts]
    return {"grid": grid, "curves": curve_rows, "notes": curves.notes}


def perturb_analysis(cfg: dict, backbone, params: dict, methods: Sequence[str], family: str | None = None) -> list[dict]:
    """Fine-tuned accuracy under each support perturbation; ``params[(method, seed)]``."""
    an = cfg["analysis"]
    family = family or an["perturb_family"]
    rows = []
    for method in methods:
        seeds = sorted(s for (m, s) in params if m == method)
        for kind in an["perturbations"]:
            spec = tk.PerturbationSpec(kind, an["magnitude"])
            for k in an["perturb_shots"]:
                vals = []
                for seed in seeds:
                    tasks, pools = test_episodes(cfg, family, k, seed, n=an["perturb_episodes"])
                    tasks = [tk.perturb_support(t, spec, seed=derive_seed(seed, "perturb", kind, k, i))
                             for i, t in enumerate(tasks)]
                    cell = run_cell(params[(method, seed)], backbone, tasks, pools, "finetune",
                                    adaptation_config(cfg, method))
                    vals.append(cell["correct"].reshape(-1))
                c = np.concatenate(vals)
                p, h = ad.binomial_ci(int(c.sum()), c.size, cfg["eval"]["ci"])
                rows.append({"method": method, "perturbation": kind, "mode": "finetune", "family": family,
                             "shots": k, "correct": int(c.sum()), "total": int(c.size), "accuracy": p, "ci95": h,
                             "entropy": None, "tflops": None})
    clean = {(r["method"], r["shots"]): r["accuracy"] for r in rows if r["perturbation"] == "none"}
    for r in rows:
        r["drop"] = clean.get((r["method"], r["shots"]), r["accuracy"]) - r["accuracy"]
    return rows


def perturbation_drops(rows: Sequence[dict]) -> dict:
    """Mean accuracy drop over the non-trivial perturbations, per method."""
    out: dict = {}
    for r in rows:
        if r["perturbation"] != "none":
            out.setdefault(r["method"], []).append(r["drop"])
    return {m: float(np.mean(v)) for m, v in out.items()}


def selection_analysis(cfg: dict, backbone, params_by_seed: dict, method: str = "mapd") -> list[dict]:
    """Count induction with supports chosen per query by attribute similarity."""
    an = cfg["analysis"]
    enc = tk.default_encoder()
    rows = []
    for kind in an["selection"]:
        strategy = tk.SelectionStrategy(kind)
        for k in an["selection_shots"]:
            vals = []
            for seed in sorted(params_by_seed):
                rng = np.random.default_rng([derive_seed(seed, "selection-pool", k), 7])
                pool = [tk.make_example(s, tk.random_count_question(rng), enc)
                        for s in (tk.random_count_scene(rng, enc.n_patches) for _ in range(an["pool_size"]))]
                tasks, pools = [], []
                for i in range(an["selection_episodes"]):
                    base = tk.gen_episode("count_induction", 0, 1, seed=derive_seed(seed, "selection", k, i))
                    support = tk.select_support(pool, base.query[0], strategy, k, seed=derive_seed(seed, "pick", k, i))
                    t = tk.MetaTask(base.family, support, base.query, base.seed, base.rule)
                    tasks.append(t)
                    pools.append(tk.validation_pool(t, cfg["adaptation"]["val_pool_size"],
                                                    seed=derive_seed(seed, "selection-val", k, i)))
                cell = run_cell(params_by_seed[seed], backbone, tasks, pools, "finetune", adaptation_config(cfg, method))
                vals.append(cell["correct"].reshape(-1))
            c = np.concatenate(vals)
            p, h = ad.binomial_ci(int(c.sum()), c.size, cfg["eval"]["ci"])
            rows.append({"method": method, "selection": kind, "mode": "finetune", "family": "count_induction",
                         "shots": k, "accuracy": p, "ci95": h, "entropy": None, "tflops": None})
    return rows


def prompt_sweep(cfg: dict, backbone, cache: Path | None = None, method: str = "mapd", seeds=None,
                 log: Callable | None = None) -> list[dict]:
    """Align, train and fine-tune-evaluate one mapper per prompt count ``m``."""
    rows = []
    for m in cfg["analysis"]["prompt_grid"]:
        init = get_stage1(cfg, backbone, cache, m=m)
        params = {s: train_method(cfg, method, s, backbone, init, log)["params"] for s in seeds or cfg["seeds"]}
        recs = evaluate(cfg, backbone, params, method, modes=["finetune"])
        for r in summarize(recs, cfg["eval"]["ci"], keys=("shots",)):
            rows.append({"method": method, "m": m, "mode": "finetune", "family": "all", "shots": r["shots"],
                         "accuracy": r["accuracy"], "ci95": r["ci95"], "entropy": None, "tflops": None})
    return rows
