#!/usr/bin/env python3
"""End-to-end desk experiment: validate the solver, calibrate baselines,
build the start-file pool, train a policy, evaluate it, and (when both
architectures have checkpoints) run the shuffle comparison.

Example:
    python scripts/run_pipeline.py --out runs --iterations 150 --actor gcnn \
        --grid 20 --n-env 8
"""

import argparse
import sys
import tempfile
from pathlib import Path

import yaml

from flowrl.cli import main as flowrl_main
from flowrl.trainer import latest_checkpoint
from flowrl.config import config_from_dict


def run(argv):
    print(f"$ flowrl {' '.join(argv)}", flush=True)
    rc = flowrl_main(argv)
    if rc != 0:
        sys.exit(rc)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs")
    ap.add_argument("--iterations", type=int, default=150)
    ap.add_argument("--actor", choices=("gcnn", "mlp", "both"),
                    default="gcnn")
    ap.add_argument("--grid", type=int, default=20,
                    help="grid resolution (cells per diameter)")
    ap.add_argument("--n-env", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=2)
    ap.add_argument("--skip-validation", action="store_true")
    args = ap.parse_args()

    kinds = ["gcnn", "mlp"] if args.actor == "both" else [args.actor]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpts = {}
    for kind in kinds:
        data = {
            "geometry": {"grid_resolution": args.grid},
            "ppo": {"n_env": args.n_env},
            "policy": {"kind": kind},
            "master_seed": args.seed,
        }
        cfg = config_from_dict(data)
        cfg_path = out / f"config_{kind}.yaml"
        with open(cfg_path, "w") as fh:
            yaml.safe_dump(data, fh)
        base = ["--config", str(cfg_path), "--out", str(out),
                "--workers", str(args.workers)]
        if not args.skip_validation and kind == kinds[0]:
            run(["validate-solver", *base])
        if kind == kinds[0]:
            run(["calibrate", *base])
            run(["make-startfiles", *base])
        run(["train", *base, "--iterations", str(args.iterations)])
        run(["evaluate", *base])
        ckpts[kind] = latest_checkpoint(out, cfg.config_hash())
    if len(ckpts) == 2:
        run(["shuffle-test", "--config", str(out / "config_gcnn.yaml"),
             "--out", str(out),
             "--gcnn-checkpoint", str(ckpts["gcnn"]),
             "--mlp-checkpoint", str(ckpts["mlp"])])


if __name__ == "__main__":
    main()
