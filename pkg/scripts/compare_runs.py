"""Check that two run directories produced byte-identical CSV reports.

    python scripts/compare_runs.py runs/a runs/b
"""

import sys
from pathlib import Path


def main(a: str, b: str) -> int:
    a, b = Path(a), Path(b)
    names = sorted({p.name for p in (a / "reports").glob("*.csv")} | {p.name for p in (b / "reports").glob("*.csv")})
    bad = 0
    for name in names:
        pa, pb = a / "reports" / name, b / "reports" / name
        same = pa.exists() and pb.exists() and pa.read_bytes() == pb.read_bytes()
        bad += not same
        print(f"{'identical' if same else 'DIFFERENT':<10} {name}")
    return 1 if bad or not names else 0


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    sys.exit(main(*sys.argv[1:]))
