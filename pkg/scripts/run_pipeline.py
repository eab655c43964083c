"""Run every stage of the lab on one configuration and report wall-clock time per stage.

    python scripts/run_pipeline.py --config configs/tiny.json --out runs/tiny
    python scripts/run_pipeline.py --out runs/default            # default configuration
"""

import argparse
import sys
import time

from mapd_lab import cli

STAGES = [["pretrain"], ["train"], ["eval"]] + [["analyze", "--kind", k] for k in cli.ANALYSES]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--skip", nargs="*", default=[], help="stage names to skip, e.g. prompt-sweep")
    args = p.parse_args()
    common = (["--config", args.config] if args.config else []) + ["--out", args.out]
    timings = []
    for stage in STAGES:
        name = stage[-1]
        if name in args.skip:
            continue
        t0 = time.time()
        code = cli.main(stage + common)
        timings.append((name, time.time() - t0))
        if code:
            print(f"stage {name} failed with exit code {code}", file=sys.stderr)
            return code
    for name, sec in timings:
        print(f"{name:<14}{sec / 60:8.1f} min")
    print(f"{'total':<14}{sum(s for _, s in timings) / 60:8.1f} min")
    return 0


if __name__ == "__main__":
    sys.exit(main())
