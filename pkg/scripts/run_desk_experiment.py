#!/usr/bin/env python3
"""Desk-scale experiment: synthesize scenes, train, sample, evaluate, ablate.

Everything runs through the command-line interface, so a completed run leaves
the same artifact layout a manual session would: datasets, checkpoint, loss
curve, per-pair correspondences, metrics JSON/CSV, and sweep tables. Expect
roughly ten minutes at the default sizes on a laptop core.

Usage:
    python3 scripts/run_desk_experiment.py --out runs/desk [--quick]

--quick shrinks everything (pairs, epochs, points) to a smoke-test scale that
finishes in about a minute.
"""

import argparse
import json
import os
import sys

from matchdiff import cli


def sh(args: list[str]) -> None:
    print(f"+ matchdiff {' '.join(args)}", flush=True)
    rc = cli.main(args)
    if rc != 0:
        sys.exit(rc)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk", help="experiment directory")
    ap.add_argument("--quick", action="store_true", help="tiny smoke-test scale")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = args.out
    train_pairs, held_pairs = (20, 5) if args.quick else (500, 50)
    points = 32 if args.quick else 128
    config = {
        "schedule": {"T": 1000, "steps": 10},
        "denoiser": {"d_model": 66, "n_layers": 2, "procrustes_k": 32,
                     "sinkhorn_iters_inner": 10},
        "train": {
            "epochs": 2 if args.quick else 60,
            "batch_size": 2,
            "learning_rate": 2e-3,
            "seed": args.seed,
        },
    }
    if args.quick:
        config["denoiser"] = {"d_model": 12, "n_layers": 2, "procrustes_k": 8}

    os.makedirs(out, exist_ok=True)
    cfg_path = os.path.join(out, "config.json")
    with open(cfg_path, "w") as fh:
        json.dump(config, fh, indent=2)

    train_ds = os.path.join(out, "data_train")
    held_ds = os.path.join(out, "data_held")
    run_dir = os.path.join(out, "run")
    pred_dir = os.path.join(out, "pred")
    sh(["synth", "--out", train_ds, "--pairs", str(train_pairs), "--points", str(points),
        "--overlap", "0.8", "--noise", "0.005", "--seed", str(args.seed), "--force"])
    sh(["synth", "--out", held_ds, "--pairs", str(held_pairs), "--points", str(points),
        "--overlap", "0.8", "--noise", "0.005", "--seed", str(args.seed + 1_000_000),
        "--force"])
    sh(["train", "--data", train_ds, "--config", cfg_path, "--out", run_dir])
    ckpt = os.path.join(run_dir, "checkpoint.bin")
    sh(["sample", "--data", held_ds, "--ckpt", ckpt, "--out", pred_dir,
        "--config", cfg_path, "--steps", "10", "--eta", "0.0", "--seed", str(args.seed)])
    metrics_path = os.path.join(out, "metrics.json")
    sh(["eval", "--pred", pred_dir, "--data", held_ds, "--out", metrics_path])
    sh(["ablate", "--data", held_ds, "--ckpt", ckpt, "--out", out,
        "--config", cfg_path, "--sweep", "steps", "--seed", str(args.seed)])
    sh(["ablate", "--data", held_ds, "--ckpt", ckpt, "--out", out,
        "--config", cfg_path, "--sweep", "init", "--steps", "10", "--seed", str(args.seed)])

    with open(metrics_path) as fh:
        agg = json.load(fh)["aggregate"]
    print("\n== aggregate metrics ==")
    for key in sorted(agg):
        print(f"  {key:12s} {agg[key]:.4f}")
    print(f"\nArtifacts under {out}/: data_train, data_held, run, pred, "
          f"metrics.json, sweep_steps.csv, sweep_init.csv")


if __name__ == "__main__":
    main()
