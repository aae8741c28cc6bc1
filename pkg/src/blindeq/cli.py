"""Command-line entry point: ``blindeq {sweep,tracking,screen,eye,validate}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness


def _load(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config, desk_scale=True if args.desk_scale else None)
    if args.seed is not None:
        cfg.seeds.master = args.seed
    return cfg


def _parse_point(text: str | None) -> dict:
    point = {}
    for part in filter(None, (text or "").split(",")):
        k, _, v = part.partition("=")
        point[k.strip()] = json.loads(v)
    return point


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="blindeq", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="YAML experiment config")
        sp.add_argument("-o", "--out", help="output directory (default: output.dir from the config)")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--desk-scale", action="store_true", help="symbol counts / 10, 5 seeds by default")
        sp.add_argument("--validate", action="store_true", help="validate the config and exit")

    sp = sub.add_parser("sweep", help="SER sweep over the config grid")
    common(sp)
    sp.add_argument("-j", "--threads", type=int, default=1, help="worker processes")
    sp = sub.add_parser("tracking", help="change-point tracking experiment (Wiener-Hammerstein)")
    common(sp)
    sp = sub.add_parser("screen", help="learning-rate screening at one grid point")
    common(sp)
    sp.add_argument("--point", help="grid point as name=value[,name=value]; default: first grid point")
    sp = sub.add_parser("eye", help="export noiseless IM/DD eye and MZM transfer data")
    common(sp)
    sp.add_argument("--point", help="channel overrides as name=value[,name=value]")
    sp.add_argument("--symbols", type=int, default=2000)
    sp = sub.add_parser("validate", help="validate a config and print its resolved form and hash")
    sp.add_argument("config")
    sp.add_argument("--desk-scale", action="store_true")

    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "validate":
            cfg = harness.load_config(args.config, desk_scale=True if args.desk_scale else None)
            print(json.dumps({"config_hash": harness.config_hash(cfg), "config": cfg.to_dict()}, indent=2))
            return 0
        cfg = _load(args)
        if args.validate:
            print(f"ok {harness.config_hash(cfg)}")
            return 0
        out = args.out or cfg.output.dir
        if args.command == "sweep":
            res = harness.run_sweep(cfg, out, threads=args.threads)
            sys.stdout.write(harness.format_rows(res["summary"], harness.SUMMARY_FIELDS))
        elif args.command == "tracking":
            res = harness.run_tracking(cfg, out)
            sys.stdout.write(harness.format_rows(res["summary"], harness.TRACKING_SUMMARY_FIELDS))
        elif args.command == "screen":
            point = _parse_point(args.point) if args.point else harness.grid_points(cfg)[0]
            res = harness.screen_lr(cfg, point, out_dir=out)
            print(json.dumps({"point": point, "best_lr": res["best"]}))
        elif args.command == "eye":
            harness.export_eye(cfg, out, n_sym=args.symbols, point=_parse_point(args.point))
            print(f"wrote {out}/eye.csv and {out}/mzm_transfer.csv")
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
