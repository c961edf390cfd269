"""Command-line entry point.

Subcommands: pretrain, run, ablate, probe, sensitivity, shift-bench,
gen-data, ingest-check. Exit code 0 on success, 2 on contract/parse
errors.
"""

from __future__ import annotations

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")  # timing comparability needs one thread

import argparse
import dataclasses
import json
import sys

from . import backbone as bb
from . import data as dt
from . import harness as hn
from .errors import MiniCilError
from .rng import RngState, derive_seed


def _add_common(parser):
    parser.add_argument("--config", help="json config file")
    parser.add_argument("--seed", help="comma-separated seed list, e.g. 0,1,2")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--mode", choices=["none", "ca", "ssca"])
    parser.add_argument("--pet", choices=["adapter", "ssf", "vpt-shallow", "vpt-deep",
                                          "none", "full"])


def _load_config(args) -> hn.ExperimentConfig:
    cfg = hn.load_config(args.config) if args.config else hn.ExperimentConfig()
    overrides = {}
    if args.seed:
        overrides["seeds"] = [int(s) for s in args.seed.split(",")]
    if args.out:
        overrides["out"] = args.out
    if args.mode:
        overrides["mode"] = args.mode
    if args.pet:
        overrides["pet"] = args.pet.replace("-", "_")
        overrides["pet_options"] = {}
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _out_dir(cfg, default="out"):
    return cfg.out if cfg.out else default


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    seed = cfg.seeds[0]
    generated = dt.generate_synthetic(cfg.data, cfg.data_seed)
    schedule = dataclasses.replace(cfg.schedule, lr0=cfg.pretrain_lr)
    result = bb.pretrain(cfg.backbone, generated.base, schedule,
                         RngState(derive_seed(seed, "pretrain")),
                         epochs=cfg.pretrain_epochs)
    out = _out_dir(cfg)
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "backbone.cilb")
    bb.save_weights(path, cfg.backbone, result.weights)
    print(f"base training accuracy: {result.train_accuracy:.4f}")
    print(f"weights written to {path}")
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    report = hn.run_experiment(cfg)
    out = _out_dir(cfg)
    hn.write_report(report, out)
    summary = report.summary()
    for res in report.results:
        print(f"seed {res.seed}: a_last={res.a_last:.4f} a_avg={res.a_avg:.4f}")
    print(f"mean a_avg={summary['a_avg_mean']:.4f} +/- {summary['a_avg_std']:.4f}  "
          f"mean a_last={summary['a_last_mean']:.4f} +/- {summary['a_last_std']:.4f}")
    print(f"report written to {out}/run_{cfg.run_id()}.jsonl")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    merged = hn.ablation_suite(cfg)
    out = _out_dir(cfg)
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "ablations.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(merged, fh, indent=2, sort_keys=True)
    for section, cells in merged.items():
        print(f"[{section}]")
        print(json.dumps(cells, indent=2, sort_keys=True))
    print(f"merged report written to {path}")
    return 0


def cmd_probe(args) -> int:
    cfg = _load_config(args)
    result = hn.regime_probe(cfg)
    out = _out_dir(cfg)
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "probe.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
    for regime, row in result.items():
        print(f"{regime}: probe accuracy {row['probe_mean']:.4f} +/- {row['probe_std']:.4f}")
    return 0


def cmd_sensitivity(args) -> int:
    cfg = _load_config(args)
    result = hn.sensitivity_report(cfg)
    out = _out_dir(cfg)
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "sensitivity.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
    for seed, row in result["seeds"].items():
        print(f"seed {seed}: most sensitive {row['most_sensitive']}, "
              f"consecutive cosine {['%.3f' % v for v in row['consecutive_cosine']]}")
    return 0


def cmd_shift_bench(args) -> int:
    cfg = _load_config(args)
    sizes = [(1000, 50, 10, 32), (5000, 100, 10, 64),
             (10000, 100, 20, 64), (20000, 200, 20, 64)]
    rows = hn.shift_bench(sizes, repeats=args.repeats)
    out = _out_dir(cfg)
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "shift_bench.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
    header = f"{'N':>7} {'C_old':>6} {'C_new':>6} {'d':>4} {'proto_s':>10} {'sample_s':>10} {'knn_s':>10} {'speedup':>8}"
    print(header)
    for r in rows:
        print(f"{r['n']:>7} {r['c_old']:>6} {r['c_new']:>6} {r['d']:>4} "
              f"{r['prototype_s']:>10.6f} {r['sample_s']:>10.6f} "
              f"{r['knearest_s']:>10.6f} {r['speedup']:>8.1f}")
    print(f"table written to {path}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    stream = hn.build_stream(cfg, cfg.seeds[0])
    out = _out_dir(cfg)
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "stream.csv")
    dt.export_stream(stream, path)
    counts = [len(s.train) for s in stream.sessions]
    print(f"{len(stream)} sessions, train counts {counts}")
    print(f"stream written to {path}")
    return 0


def cmd_ingest_check(args) -> int:
    if not args.path:
        print("ingest-check requires a file path", file=sys.stderr)
        return 2
    stream = dt.ingest_embeddings(args.path)
    dims = stream.sessions[0].train.x.shape[1]
    print(f"ok: {len(stream)} sessions, feature dim {dims}")
    for t, s in enumerate(stream.sessions, start=1):
        print(f"  session {t}: labels {list(s.labels)}, "
              f"{len(s.train)} train / {len(s.test)} test")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="minicil",
                                     description="desk-scale class-incremental learning")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in [("pretrain", cmd_pretrain), ("run", cmd_run), ("ablate", cmd_ablate),
                     ("probe", cmd_probe), ("sensitivity", cmd_sensitivity),
                     ("gen-data", cmd_gen_data)]:
        p = sub.add_parser(name)
        _add_common(p)
        p.set_defaults(fn=fn)
    p = sub.add_parser("shift-bench")
    _add_common(p)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(fn=cmd_shift_bench)
    p = sub.add_parser("ingest-check")
    _add_common(p)
    p.add_argument("path", nargs="?")
    p.set_defaults(fn=cmd_ingest_check)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except MiniCilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
