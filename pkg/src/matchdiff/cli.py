"""Command-line interface: synth, train, sample, eval, ablate.

Conventions: progress goes to stderr, data only to files; every failure prints
a single line 'ERROR:<code>:<message>' to stderr and exits with that code
(2 config, 3 data, 4 numeric). Run directories get a run_manifest.json written
atomically at the end (config snapshot, seed, code version, timestamps,
output list). MATCHDIFF_THREADS controls how many scene pairs are processed
concurrently in sample/eval/ablate; outputs are ordered by pair index, so the
thread count never changes results.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import __version__, data, geometry, metrics, pipeline, tensor
from .config import RunConfig, load_run_config, run_config_from_dict, run_config_to_dict
from .denoiser import DenoiserConfig
from .errors import ConfigError, DataError, MatchDiffError
from .pipeline import SampleConfig
from .schedule import make_tau

logger = logging.getLogger("matchdiff")

STEP_SWEEP = (1, 2, 3, 10, 20, 50)
INIT_SWEEP = ("gaussian", "backbone")
ETA_SWEEP = (0.0, 0.5, 1.0)


def _thread_count() -> int:
    raw = os.environ.get("MATCHDIFF_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MATCHDIFF_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"MATCHDIFF_THREADS must be >= 1, got {n}")
    return n


def _map_indexed(fn, items):
    """Apply fn(idx, item) across items, optionally threaded; order preserved."""
    n = _thread_count()
    if n <= 1:
        return [fn(i, item) for i, item in enumerate(items)]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(lambda pair: fn(*pair), enumerate(items)))


def _write_atomic(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_run_manifest(out_dir: str, cfg_doc: dict, seed: int, outputs: list[str], started: float) -> None:
    manifest = {
        "config": cfg_doc,
        "seed": seed,
        "code_version": __version__,
        "started_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
        "finished_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "outputs": sorted(outputs),
    }
    _write_atomic(
        os.path.join(out_dir, "run_manifest.json"),
        json.dumps(manifest, indent=2, sort_keys=True) + "\n",
    )


def _write_matches_csv(path: str, matches: list[tuple[int, int, float]]) -> None:
    with open(path, "w") as fh:
        fh.write("i,j,score\n")
        for i, j, score in matches:
            fh.write(f"{i},{j},{float(score)!r}\n")


def _read_matches_csv(path: str) -> list[tuple[int, int, float]]:
    try:
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if not lines or lines[0] != "i,j,score":
        raise DataError(f"{path}: expected 'i,j,score' header")
    out = []
    for ln in lines[1:]:
        try:
            i, j, score = ln.split(",")
            out.append((int(i), int(j), float(score)))
        except ValueError as e:
            raise DataError(f"{path}: malformed row {ln!r}: {e}") from e
    return out


def _load_checkpoint_params(path: str, base: DenoiserConfig):
    """Checkpoint tensors as parameters, with the model shape inferred from
    them (d_model from the match head, n_layers from the layer prefixes)."""
    tensors = tensor.load_checkpoint(path)
    if "denoiser.match.wp" not in tensors:
        raise DataError(f"checkpoint {path} missing tensor 'denoiser.match.wp'")
    d = tensors["denoiser.match.wp"].shape[0]
    layers = {key.split(".")[1] for key in tensors if key.startswith("denoiser.layer")}
    den_cfg = replace(base, d_model=int(d), n_layers=len(layers))
    expected = set(pipeline.init_params(den_cfg, data.rng_for(0, 0)))
    missing = sorted(expected - set(tensors))
    extra = sorted(set(tensors) - expected)
    if missing or extra:
        raise DataError(f"checkpoint {path} tensor names mismatch: missing {missing}, extra {extra}")
    return {name: tensor.value(arr) for name, arr in tensors.items()}, den_cfg


def _sample_dataset(pairs, params, run_cfg: RunConfig, den_cfg: DenoiserConfig, sample_cfg: SampleConfig, seed: int):
    s = run_cfg.schedule.build()
    tau = make_tau(run_cfg.schedule.T, sample_cfg.steps, eta=sample_cfg.eta)

    def one(idx: int, pair):
        pp = pipeline.prepare_pair(pair, den_cfg, run_cfg.encoder)
        rng = data.rng_for(seed, stream=10_000 + idx)
        result = pipeline.reverse_sample(pp, params, s, tau, sample_cfg, den_cfg, rng)
        logger.info("sampled pair %d/%d", idx + 1, len(pairs))
        return pp, result

    return _map_indexed(one, pairs)


def cmd_synth(args) -> int:
    started = time.time()
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        raise DataError(f"output directory {args.out} is not empty (use --force to overwrite)")
    os.makedirs(args.out, exist_ok=True)
    pairs = []
    for i in range(args.pairs):
        pair_seed = args.seed * 1_000_003 + i
        if args.mode == "rigid":
            pair = data.gen_rigid_pair(args.points, args.overlap, args.noise, seed=pair_seed)
        else:
            pair = data.gen_deformable_pair(args.points, args.rbf, args.max_disp, seed=pair_seed)
        pairs.append(pair)
        if (i + 1) % 50 == 0 or i + 1 == args.pairs:
            logger.info("generated %d/%d pairs", i + 1, args.pairs)
    manifest_path = data.save_dataset(args.out, pairs, mode=args.mode, seed=args.seed)
    _write_run_manifest(
        args.out,
        {
            "pairs": args.pairs,
            "mode": args.mode,
            "points": args.points,
            "overlap": args.overlap,
            "noise": args.noise,
            "rbf": args.rbf,
            "max_disp": args.max_disp,
        },
        args.seed,
        [os.path.basename(manifest_path)],
        started,
    )
    return 0


def cmd_train(args) -> int:
    started = time.time()
    run_cfg = load_run_config(args.config) if args.config else RunConfig()
    _, pairs = data.load_dataset(args.data)
    if not pairs:
        raise DataError(f"dataset {args.data} has no pairs")
    os.makedirs(args.out, exist_ok=True)
    s = run_cfg.schedule.build()
    params = pipeline.init_params(run_cfg.denoiser, data.rng_for(run_cfg.train.seed, stream=3))
    curve = pipeline.train(pairs, params, s, run_cfg.train, run_cfg.denoiser, run_cfg.encoder)
    ckpt_path = os.path.join(args.out, "checkpoint.bin")
    tensor.save_checkpoint(ckpt_path, {name: p.data for name, p in params.items()})
    curve_buf = io.StringIO()
    writer = csv.writer(curve_buf, lineterminator="\n")
    writer.writerow(["step", "epoch", "l_simple", "l_m", "l_w", "total"])
    for row in curve:
        writer.writerow(
            [row["step"], row["epoch"]] + [repr(row[k]) for k in ("l_simple", "l_m", "l_w", "total")]
        )
    _write_atomic(os.path.join(args.out, "loss_curve.csv"), curve_buf.getvalue())
    _write_run_manifest(
        args.out,
        run_config_to_dict(run_cfg),
        run_cfg.train.seed,
        ["checkpoint.bin", "loss_curve.csv"],
        started,
    )
    return 0


def cmd_sample(args) -> int:
    started = time.time()
    run_cfg = load_run_config(args.config) if args.config else RunConfig()
    _, pairs = data.load_dataset(args.data)
    params, den_cfg = _load_checkpoint_params(args.ckpt, run_cfg.denoiser)
    sample_cfg = replace(
        run_cfg.sample, steps=args.steps, eta=args.eta, init_mode=args.init, formula=args.formula
    )
    os.makedirs(args.out, exist_ok=True)
    results = _sample_dataset(pairs, params, run_cfg, den_cfg, sample_cfg, args.seed)
    outputs = []
    transforms = []
    for idx, (pp, result) in enumerate(results):
        corr = f"corr_{idx:04d}.csv"
        _write_matches_csv(os.path.join(args.out, corr), result.matches)
        warped = f"warped_{idx:04d}.ply"
        data.write_ply(
            os.path.join(args.out, warped), geometry.rigid_warp(pp.p_coords, result.transform)
        )
        transforms.append(
            {
                "r": [[float(v) for v in row] for row in result.transform.r],
                "t": [float(v) for v in result.transform.t],
            }
        )
        outputs += [corr, warped]
    _write_atomic(
        os.path.join(args.out, "transforms.json"),
        json.dumps({"pairs": transforms}, indent=2, sort_keys=True) + "\n",
    )
    outputs.append("transforms.json")
    cfg_doc = run_config_to_dict(run_cfg)
    cfg_doc["sample"] = {
        "init_mode": sample_cfg.init_mode,
        "steps": sample_cfg.steps,
        "eta": sample_cfg.eta,
        "formula": sample_cfg.formula,
        "top_k": sample_cfg.top_k,
    }
    _write_run_manifest(args.out, cfg_doc, args.seed, outputs, started)
    return 0


def cmd_eval(args) -> int:
    _, pairs = data.load_dataset(args.data)
    transforms_path = os.path.join(args.pred, "transforms.json")
    try:
        with open(transforms_path) as fh:
            transforms_doc = json.load(fh)
    except OSError as e:
        raise DataError(f"cannot read {transforms_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"malformed {transforms_path}: {e}") from e
    entries = transforms_doc.get("pairs")
    if not isinstance(entries, list) or len(entries) != len(pairs):
        raise DataError(
            f"{transforms_path}: expected {len(pairs)} transforms, got "
            f"{len(entries) if isinstance(entries, list) else type(entries).__name__}"
        )

    def one(idx: int, pair):
        matches = _read_matches_csv(os.path.join(args.pred, f"corr_{idx:04d}.csv"))
        entry = entries[idx]
        transform = geometry.RigidTransform(
            r=np.asarray(entry["r"], dtype=np.float64), t=np.asarray(entry["t"], dtype=np.float64)
        )
        return metrics.evaluate_pair(pair, matches, transform)

    report = metrics.aggregate_report(_map_indexed(one, pairs))
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    _write_atomic(args.out, report.to_json())
    _write_atomic(os.path.splitext(args.out)[0] + ".csv", report.to_csv())
    logger.info("aggregate: %s", report.aggregate)
    return 0


def cmd_ablate(args) -> int:
    started = time.time()
    run_cfg = load_run_config(args.config) if args.config else RunConfig()
    _, pairs = data.load_dataset(args.data)
    params, den_cfg = _load_checkpoint_params(args.ckpt, run_cfg.denoiser)
    if args.sweep == "steps":
        values = STEP_SWEEP
        variants = [replace(run_cfg.sample, steps=v, eta=args.eta, init_mode=args.init) for v in values]
    elif args.sweep == "init":
        values = INIT_SWEEP
        variants = [replace(run_cfg.sample, init_mode=v, steps=args.steps, eta=args.eta) for v in values]
    else:
        values = ETA_SWEEP
        variants = [replace(run_cfg.sample, eta=v, steps=args.steps, init_mode=args.init) for v in values]
    os.makedirs(args.out, exist_ok=True)
    agg_fields = ["mean_ir", "fmr", "rr", "mean_nfmr", "epe", "acc_s", "acc_r", "outlier"]
    rows = []
    for value, variant in zip(values, variants):
        logger.info("sweep %s = %s", args.sweep, value)
        results = _sample_dataset(pairs, params, run_cfg, den_cfg, variant, args.seed)
        report = metrics.aggregate_report(
            [metrics.evaluate_pair(pairs[i], r.matches, r.transform) for i, (_, r) in enumerate(results)]
        )
        rows.append((value, report.aggregate))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([args.sweep] + agg_fields)
    for value, agg in rows:
        writer.writerow([value] + [repr(agg[f]) if f in agg else "" for f in agg_fields])
    sweep_file = f"sweep_{args.sweep}.csv"
    _write_atomic(os.path.join(args.out, sweep_file), buf.getvalue())
    _write_run_manifest(args.out, run_config_to_dict(run_cfg), args.seed, [sweep_file], started)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="matchdiff", description="diffusion-based point cloud matching"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, default=10)
    p.add_argument("--mode", choices=("rigid", "deform"), default="rigid")
    p.add_argument("--points", type=int, default=128)
    p.add_argument("--overlap", type=float, default=0.7)
    p.add_argument("--noise", type=float, default=0.005)
    p.add_argument("--rbf", type=int, default=4)
    p.add_argument("--max-disp", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="run reverse sampling with a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--init", choices=pipeline.INIT_MODES, default="gaussian")
    p.add_argument("--formula", choices=("standard", "paper_literal"), default="standard")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep a sampling knob and tabulate metrics")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--sweep", choices=("steps", "init", "eta"), required=True)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--init", choices=pipeline.INIT_MODES, default="gaussian")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2
    try:
        return args.func(args)
    except MatchDiffError as e:
        print(f"ERROR:{e.exit_code}:{e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
