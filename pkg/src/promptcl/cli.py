"""Command-line entry points: run, ablate, gradcheck, report, pretrain, gen-data.

Configuration comes from a JSON file of TrainConfig fields, then
``PROMPTCL_*`` environment variables (``PROMPTCL_ENCODER__D_MODEL`` for
nested encoder fields), then command-line flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .continual import RunLog, run_sequence
from .data import SUITES, load_manifest, make_suite, write_manifest, export_jsonl
from .encoder import load_weights, save_weights
from .experiment import RunCache, ablation_table, format_table, pretrained_backbone
from .gradcheck import run_gradcheck
from .objectives import MODES
from .report import aggregate, load_reports, write_aggregate, write_run


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _sequence(order: str, cfg, seed: int):
    if order in SUITES:
        seq, _ = make_suite(order, seed=seed, vocab_size=cfg.encoder.vocab_size)
        return seq
    path = Path(order)
    if not path.exists():
        raise ConfigError(f"--order {order!r} is neither a suite ({', '.join(SUITES)}) nor a manifest file")
    return load_manifest(path, vocab_size=cfg.encoder.vocab_size, max_text_len=cfg.max_text_len,
                         val_per_class=10, seed=seed)


def _backbone(args, cfg, seed):
    if getattr(args, "backbone", None):
        weights, _ = load_weights(args.backbone)
        if weights.config != cfg.encoder:
            raise ConfigError(f"backbone {args.backbone} encoder config differs from the run config")
        return weights
    weights, _ = pretrained_backbone(cfg, seed)
    return weights


def cmd_run(args) -> int:
    cfg = load_config(args.config, seed=args.seed, mode=args.mode)
    seq = _sequence(args.order, cfg, cfg.seed)
    out = Path(args.out or f"runs/{seq.order_id}_{cfg.mode}_seed{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)
    log = RunLog(out / "log.jsonl", verbose=args.verbose)
    try:
        report = run_sequence(seq, cfg, weights=_backbone(args, cfg, cfg.seed), log=log,
                              checkpoint_dir=out / "checkpoints" if args.checkpoints else None)
    finally:
        log.close()
    write_run(report, out)
    print(f"{report.variant} {report.order_id} seed={report.seed} final_average={report.final_average:.4f} -> {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if args.order not in SUITES:
        raise ConfigError(f"ablate needs a synthetic suite, one of {', '.join(SUITES)}")
    cache = RunCache(base=cfg, progress=print if args.verbose else None)
    rows = ablation_table(args.seeds, cache, args.order, include_freeze_s=args.with_freeze_s)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "seed", "final_average"])
        for row in rows:
            for rep in row.reports:
                w.writerow([row.name, rep.seed, repr(rep.final_average)])
                write_run(rep, out / "runs" / f"{rep.variant}_seed{rep.seed}")
    table = format_table(rows)
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


def cmd_gradcheck(args) -> int:
    res = run_gradcheck(seeds=tuple(args.seeds), tol=args.tol)
    for line in res.lines():
        if args.verbose or line.startswith("FAIL") or line.startswith("     "):
            print(line)
    worst = max(c.max_rel_err for c in res.cases)
    n_fail = sum(not c.passed for c in res.cases)
    print(f"gradcheck: {len(res.cases)} cases, {n_fail} failed, max_rel_err={worst:.3e}, "
          f"tol={res.tol:g}, {res.seconds:.1f}s")
    return 0 if res.passed else 1


def cmd_report(args) -> int:
    agg = aggregate(load_reports(args.inp))
    write_aggregate(agg, args.out)
    for g in agg["groups"]:
        print(f"{g['order_id']:<12} {g['variant']:<32} n={g['n_runs']} mean={g['mean_final_average']:.4f}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config, seed=args.seed, warmup_steps=args.steps)
    log = RunLog()
    weights, hist = pretrained_backbone(cfg, cfg.seed, log=log)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_weights(out, weights, meta={"seed": cfg.seed, "warmup_steps": cfg.warmup_steps, **hist})
    for ev in log.events:
        print(f"step {ev['step']} mlm_loss {ev['value']:.4f}")
    print(f"backbone -> {out}")
    return 0


def cmd_gen_data(args) -> int:
    seq, _ = make_suite(args.suite, seed=args.seed, vocab_size=args.vocab_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for spec in seq.tasks:
        name = f"{spec.task_id}.jsonl"
        export_jsonl(spec, out / name)
        paths.append(name)
    write_manifest(seq, paths, out / "manifest.json")
    print(f"{len(paths)} tasks -> {out / 'manifest.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="promptcl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one task sequence and write report.json, summary.csv, curves.svg")
    r.add_argument("--config")
    r.add_argument("--seed", type=int)
    r.add_argument("--order", default="conflict5", help="suite name or sequence manifest path")
    r.add_argument("--mode", choices=MODES)
    r.add_argument("--backbone", help="pretrained backbone .npz from `pretrain`")
    r.add_argument("--out")
    r.add_argument("--checkpoints", action="store_true", help="save a checkpoint at every task boundary")
    r.add_argument("--verbose", action="store_true", help="log every optimisation step")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("ablate", help="InfoComp ablation rows over shared seeds")
    a.add_argument("--config")
    a.add_argument("--seeds", type=_seeds, default=[0, 1, 2])
    a.add_argument("--order", default="conflict5")
    a.add_argument("--out", default="runs/ablate")
    a.add_argument("--with-freeze-s", action="store_true", help="add the freeze_s_after_first row")
    a.add_argument("--verbose", action="store_true")
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference check of every primitive and loss")
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--seeds", type=_seeds, default=[0, 1, 2])
    g.add_argument("--verbose", action="store_true")
    g.set_defaults(func=cmd_gradcheck)

    rep = sub.add_parser("report", help="aggregate report.json files under a directory")
    rep.add_argument("--in", dest="inp", required=True)
    rep.add_argument("--out", required=True)
    rep.set_defaults(func=cmd_report)

    pt = sub.add_parser("pretrain", help="masked-token warmup of a backbone")
    pt.add_argument("--config")
    pt.add_argument("--steps", type=int)
    pt.add_argument("--seed", type=int)
    pt.add_argument("--out", default="backbone.npz")
    pt.set_defaults(func=cmd_pretrain)

    gd = sub.add_parser("gen-data", help="write a synthetic suite as JSON-lines files plus a manifest")
    gd.add_argument("--suite", choices=sorted(SUITES), default="conflict5")
    gd.add_argument("--seed", type=int, default=0)
    gd.add_argument("--vocab-size", type=int, default=4096)
    gd.add_argument("--out", required=True)
    gd.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"promptcl {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
