"""Time the five-method comparison at the default configuration.

Trains every method for every seed from the cached stage-1 mapper, runs the
few-shot evaluation in both modes, prints the accuracy grid and the
wall-clock split between training and evaluation.

    python scripts/five_method_budget.py [--methods mapd nometa_pd] [--json out.json]
"""

import argparse
import json
import time

from mapd_lab import config as C
from mapd_lab import experiments as X


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--methods", nargs="*")
    p.add_argument("--modes", nargs="*")
    p.add_argument("--json", help="write per-episode records here")
    args = p.parse_args()
    cfg = C.load(args.config) if args.config else C.resolve({})
    bb = X.get_backbone(cfg, log_every=500)
    init = X.get_stage1(cfg, bb)
    records, train_s, eval_s = [], 0.0, 0.0
    for method in args.methods or cfg["trainer"]["methods"]:
        t0 = time.time()
        params = {s: X.train_method(cfg, method, s, bb, init)["params"] for s in cfg["seeds"]}
        t1 = time.time()
        records += X.evaluate(cfg, bb, params, method, modes=args.modes)
        t2 = time.time()
        train_s += t1 - t0
        eval_s += t2 - t1
        print(f"{method}: train {t1 - t0:.0f}s, eval {t2 - t1:.0f}s", flush=True)
    print(X.format_grid(X.table_rows(cfg, records)))
    print(f"training {train_s / 60:.1f} min, evaluation {eval_s / 60:.1f} min, total {(train_s + eval_s) / 60:.1f} min")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(records, fh)


if __name__ == "__main__":
    main()
