"""Command-line entry points: pretrain, adapt, ablate, oracle, sweep."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import yaml

from . import pipeline, segnet
from .evalkit import write_summary

BENCHMARKS = ("adapt", "ablate", "oracle", "sweep")


def _load_config(path) -> dict:
    if path is None:
        return {}
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return data


def _run_config(args, mode: str) -> pipeline.RunConfig:
    d = _load_config(args.config)
    d["mode"] = mode
    for key in ("seed", "frames", "J", "a", "K", "w", "tau", "lr", "steps_per_frame",
                "selector", "kitti_root", "epochs"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    if getattr(args, "dropout_p", None) is not None:
        d["dropout_p"] = args.dropout_p
    return pipeline.RunConfig.from_dict(d)


def _common(p: argparse.ArgumentParser, seed_required: bool):
    p.add_argument("--config", help="YAML run configuration; flags override its values")
    p.add_argument("--seed", type=int, required=seed_required)
    p.add_argument("--frames", type=int)
    p.add_argument("--J", type=int)
    p.add_argument("--a", type=float)
    p.add_argument("--dropout-p", dest="dropout_p", type=float)
    p.add_argument("--K", type=int)
    p.add_argument("--w", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--steps-per-frame", dest="steps_per_frame", type=int)
    p.add_argument("--kitti-root", dest="kitti_root")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sfouda", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a source model on generator source frames")
    _common(p, seed_required=False)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True, help="checkpoint path")

    p = sub.add_parser("adapt", help="online adaptation over a target stream")
    _common(p, seed_required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--selector", choices=pipeline.SELECTORS)

    p = sub.add_parser("ablate", help="one ablation mode (A, AT, ATP) of the adaptation loop")
    _common(p, seed_required=True)
    p.add_argument("--mode", required=True, choices=("A", "AT", "ATP"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("oracle", help="pseudo-label accuracy of the selection rules")
    _common(p, seed_required=True)
    p.add_argument("--selector", dest="oracle_selector", default="all",
                   choices=pipeline.SELECTORS + ("all",))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("sweep", help="adaptation runs over values of K or w")
    _common(p, seed_required=True)
    p.add_argument("--param", required=True, choices=("K", "w"))
    p.add_argument("--values", required=True, help="comma-separated list, e.g. 1,5,10")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out-dir", required=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except Exception as exc:  # report every failure as one parseable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc),
                          "command": args.command}), file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "pretrain":
        cfg = _run_config(args, "pretrain")
        model, held = pipeline.pretrain(cfg)
        segnet.save_checkpoint(model, args.out, extra={"holdout_miou": held, "seed": cfg.seed})
        print(json.dumps({"checkpoint": str(args.out), "holdout_miou": held}))
        return 0

    cfg = _run_config(args, cmd)
    model = segnet.load_checkpoint(args.ckpt)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if cmd in ("adapt", "ablate"):
        if cmd == "ablate":
            cfg = cfg.replace(ablation=pipeline.ABLATION_ALIASES[args.mode])
        res = pipeline.run_adaptation(cfg, model)
        pipeline.write_run_outputs(res, cfg, out)
        print(json.dumps({"mean_miou": res.mean_miou(), "mean_source_miou": res.mean_source_miou(),
                          "out_dir": str(out)}))
    elif cmd == "oracle":
        sels = pipeline.SELECTORS if args.oracle_selector == "all" else (args.oracle_selector,)
        table = pipeline.run_oracle_study(cfg, model, selectors=sels)
        summary = {s: {f"top{k}": v for k, v in row.items()} for s, row in table.items()}
        write_summary({"accuracy": summary, "config": cfg.to_dict()}, out / "oracle.json")
        print(json.dumps(summary))
    elif cmd == "sweep":
        values = [v for v in args.values.split(",") if v.strip()]
        rows = pipeline.run_sweep(cfg, model, args.param, [int(v) for v in values])
        with open(out / "sweep.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        print(json.dumps(rows))
    return 0


if __name__ == "__main__":
    sys.exit(main())
