"""Desk-scale forgetting experiment.

shared_prompt vs InfoComp on the conflict suite, then InfoComp vs its
w/o S-Prompt ablation on the transfer suite.  Writes every run's report and
a summary JSON.

    python3 scripts/forgetting_experiment.py --seeds 0,1,2,3,4 --out runs/forgetting
"""

import argparse
import json
from pathlib import Path

from promptcl.experiment import RunCache, forgetting_experiment
from promptcl.report import write_run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--out", default="runs/forgetting")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    cache = RunCache(progress=print)
    res = forgetting_experiment(seeds, cache)
    out = Path(args.out)
    for (suite, seed, _), rep in cache.runs.items():
        write_run(rep, out / f"{suite}_{rep.variant}_seed{seed}")
    summary = res.summary()
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"shared_prompt peak {summary['shared_peak']:.3f} final {summary['shared_final']:.3f} "
          f"drop {summary['shared_drop']:.3f}")
    print(f"infocomp final {summary['infocomp_final']:.3f} gain over shared {summary['infocomp_gain']:.3f}")
    print(f"transfer: infocomp {summary['transfer_full']:.3f} w/o S {summary['transfer_no_s']:.3f} "
          f"margin {summary['transfer_margin']:.3f}")


if __name__ == "__main__":
    main()
