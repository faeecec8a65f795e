"""InfoComp ablation rows on the conflict suite, averaged over seeds.

    python3 scripts/ablation.py --seeds 0,1,2,3,4 --with-freeze-s
"""

import argparse

from promptcl.experiment import RunCache, ablation_table, format_table


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--suite", default="conflict5")
    ap.add_argument("--with-freeze-s", action="store_true")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = ablation_table(seeds, RunCache(progress=print), args.suite, include_freeze_s=args.with_freeze_s)
    print(format_table(rows))
    best = max(rows, key=lambda r: r.mean)
    print(f"best row: {best.name}")


if __name__ == "__main__":
    main()
