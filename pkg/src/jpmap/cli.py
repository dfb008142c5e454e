"""Command line entry point: ``jpmap {train,restore,sweep,validate-a2,slice,replay}``.

Every command writes a ``config.json`` echo of its flags; ``jpmap replay`` feeds
it back to rerun the command exactly. Exit codes: 0 on success, 1 on format,
parameter or I/O errors, 2 on numeric failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .degradation import DEFAULT_PINV_EPS, DEFAULT_SIGMA, degradation_to_json
from .errors import JpmapError, NumericError
from .experiments import (make_degradation, restore_image, run_slice, run_sweep,
                          run_validation, slice_csv, write_restore)
from .mnist import load_split, select_test_images
from .solvers import GdConfig, SolverConfig, fmt
from .vae import (DESK_PROFILE, DESK_SUBSET, FULL_PROFILE, TrainConfig, init_vae, load_model,
                  model_hash, save_model, smoothed, train)

log = logging.getLogger("jpmap")

PROFILES = {"desk": (DESK_PROFILE, DESK_SUBSET), "paper": (FULL_PROFILE, None)}

# flags that only choose where outputs land; left out of the echo
OUTPUT_FLAGS = {"out", "verbose", "func"}


def _echo(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in OUTPUT_FLAGS}


def _write_echo(args, path: Path, derived: dict | None = None) -> dict:
    """Write the flag echo plus values derived from inputs (hashes, indices) to ``path``."""
    echo = _echo(args)
    if derived:
        echo["derived"] = derived
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(echo, indent=1, sort_keys=True) + "\n")
    return echo


def _csv_target(out: Path, default_name: str) -> Path:
    return out if out.suffix == ".csv" else out / default_name


def _solver_config(args) -> SolverConfig:
    return SolverConfig(n_min=args.n_min, n_max=args.n_max,
                        gd=GdConfig(lr=args.lr, max_iters=args.gd_iters, rel_tol=args.gd_tol),
                        pinv_eps=args.pinv_eps, z_init=args.z_init, seed=args.seed)


def _csgm_config(args) -> GdConfig:
    return GdConfig(lr=args.lr, max_iters=args.csgm_iters, rel_tol=args.gd_tol)


def _test_image(args):
    test = load_split("test", args.data_dir)
    idx, images = select_test_images(test, args.image + 1, args.seed)
    return int(idx[-1]), images[-1]


# ---------------------------------------------------------------- commands

def train_config_from_args(args) -> tuple[TrainConfig, int | None]:
    """Profile defaults overridden by any explicit flags; returns ``(config, subset)``."""
    cfg, subset = PROFILES[args.profile]
    cfg = replace(cfg, seed=args.seed)
    for flag, name in (("epochs", "epochs"), ("lr", "lr"), ("batch_size", "batch_size"),
                       ("halving", "lr_halving_period")):
        value = getattr(args, flag)
        if value is not None:
            cfg = replace(cfg, **{name: value})
    if args.subset is not None:
        subset = args.subset
    return cfg, subset


def cmd_train(args) -> None:
    cfg, subset = train_config_from_args(args)
    images = load_split("train", args.data_dir).images
    if subset is not None:
        images = images[:subset]
    out = Path(args.out)
    _write_echo(args, out / "config.json", {"train_config": asdict(cfg), "images": len(images)})
    model = init_vae(np.random.default_rng(args.seed))
    log.info("training on %d images with %s", len(images), cfg)
    model, curve = train(model, images, cfg)
    save_model(model, out / "model.txt")
    lines = ["epoch,loss,smoothed"]
    for e, (v, s) in enumerate(zip(curve, smoothed(curve)), start=1):
        lines.append(f"{e},{fmt(v)},{fmt(s)}")
    (out / "loss.csv").write_text("\n".join(lines) + "\n")
    print(f"model written to {out / 'model.txt'}")


def cmd_restore(args) -> None:
    vae = load_model(args.model)
    index, x = _test_image(args)
    deg = make_degradation(args.task, args.seed, args.sigma, args.known, args.known_fraction,
                           args.m)
    out = Path(args.out)
    echo = _write_echo(args, out / "config.json",
                       {"model_hash": model_hash(args.model), "test_index": index,
                        "degradation": json.loads(degradation_to_json(deg))})
    result = restore_image(vae, x, deg, args.seed + 1, args.solver, _solver_config(args),
                           args.lam, _csgm_config(args), args.restarts, args.seed)
    write_restore(result, out, echo, args.solver)
    print(" ".join(f"mse_{k}={v:.6g}" for k, v in result.mse.items()))


def cmd_sweep(args) -> None:
    vae = load_model(args.model)
    test = load_split("test", args.data_dir)
    m_list = [int(v) for v in args.m_list.split(",")]
    csv_path = _csv_target(Path(args.out), "sweep.csv")
    _write_echo(args, csv_path.with_name(csv_path.stem + ".config.json"),
                {"model_hash": model_hash(args.model)})
    report = run_sweep(vae, test, m_list, args.images, args.seed, args.task, args.sigma,
                       _solver_config(args), args.lam, _csgm_config(args), args.fair_restarts,
                       progress=lambda r: log.info("m=%d image=%d jpmap=%.5f csgm=%.5f",
                                                   r.m, r.index, r.mse_jpmap, r.mse_csgm))
    csv_path.write_text(report.to_csv())
    csv_path.with_name(csv_path.stem + ".timing.csv").write_text(report.timing_csv())
    for m, agg in report.aggregate().items():
        print(f"m={m}: mse_jpmap={agg['mse_jpmap']:.6g} mse_csgm={agg['mse_csgm']:.6g}")


def cmd_validate_a2(args) -> None:
    vae = load_model(args.model)
    index, x = _test_image(args)
    out = Path(args.out)
    _write_echo(args, out / "config.json",
                {"model_hash": model_hash(args.model), "test_index": index})
    kinds = ["gaussian", "encoder_posterior"] if args.init == "both" else [args.init]
    cfg = GdConfig(lr=args.lr, max_iters=args.iters, rel_tol=args.gd_tol)
    for kind in kinds:
        report = run_validation(vae, x, args.starts, kind, cfg, args.seed, args.reference)
        (out / f"energies_{kind}.csv").write_text(report.energies_csv())
        (out / f"distances_{kind}.csv").write_text(report.distances_csv())
        (out / f"summary_{kind}.csv").write_text(report.summary_csv())
        print(f"{kind}: success fraction {report.success_fraction:.3f}, "
              f"encoder start {'succeeds' if report.encoder_run.success else 'fails'}")


def cmd_slice(args) -> None:
    vae = load_model(args.model)
    index, x = _test_image(args)
    grid = run_slice(vae, x, args.seed, args.points)
    csv_path = _csv_target(Path(args.out), "slice.csv")
    _write_echo(args, csv_path.with_name(csv_path.stem + ".config.json"),
                {"model_hash": model_hash(args.model), "test_index": index})
    csv_path.write_text(slice_csv(grid))
    print(f"slice written to {csv_path}")


def cmd_replay(args) -> None:
    echo = json.loads(Path(args.config).read_text())
    argv = echo_to_argv(echo) + ["--out", args.out]
    replay_args = build_parser().parse_args(argv)
    replay_args.func(replay_args)


def echo_to_argv(echo: dict) -> list[str]:
    """Rebuild a command line from a ``config.json`` echo."""
    echo = dict(echo)
    echo.pop("derived", None)
    argv = [echo.pop("command")]
    for key, value in sorted(echo.items()):
        if value is None:
            continue
        argv += [f"--{key.replace('_', '-')}", str(value)]
    return argv


# ---------------------------------------------------------------- parser

def _add_data(p) -> None:
    p.add_argument("--data-dir", default=None,
                   help="directory with MNIST IDX files (default: $JPMAP_DATA_DIR or data/mnist)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory (or file for sweep/slice)")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_solver(p) -> None:
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
    p.add_argument("--n-min", type=int, default=5)
    p.add_argument("--n-max", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.01, help="Adam step for z-descent and CSGM")
    p.add_argument("--gd-iters", type=int, default=200)
    p.add_argument("--gd-tol", type=float, default=1e-6)
    p.add_argument("--pinv-eps", type=float, default=DEFAULT_PINV_EPS)
    p.add_argument("--z-init", choices=["zeros", "gaussian", "encoder"], default="encoder")
    p.add_argument("--lam", type=float, default=0.1, help="CSGM latent penalty weight")
    p.add_argument("--csgm-iters", type=int, default=1000)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jpmap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the VAE prior")
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--halving", type=int, help="halve the learning rate every N epochs")
    p.add_argument("--subset", type=int, help="train on the first N training images")
    _add_data(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("restore", help="degrade one test digit and restore it")
    p.add_argument("--model", required=True)
    p.add_argument("--task", choices=["inpainting", "cs", "denoise"], default="inpainting")
    p.add_argument("--known", type=int, default=100, help="known pixels for inpainting")
    p.add_argument("--known-fraction", type=float, help="overrides --known")
    p.add_argument("--m", type=int, default=100, help="measurements for compressed sensing")
    p.add_argument("--solver", choices=["alg1", "alg2", "alg3", "csgm"], default="alg3")
    p.add_argument("--image", type=int, default=0, help="position in the seeded test order")
    p.add_argument("--restarts", type=int, default=1, help="CSGM restarts")
    _add_solver(p)
    _add_data(p)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("sweep", help="JPMAP vs CSGM over a list of measurement counts")
    p.add_argument("--model", required=True)
    p.add_argument("--task", choices=["cs", "inpainting"], default="cs")
    p.add_argument("--m-list", default="25,50,100,200,400")
    p.add_argument("--images", type=int, default=20)
    p.add_argument("--fair-restarts", type=int, default=1, help="CSGM restarts per image")
    _add_solver(p)
    _add_data(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate-a2", help="multi-start z-minimization on one test digit")
    p.add_argument("--model", required=True)
    p.add_argument("--image", type=int, default=0)
    p.add_argument("--starts", type=int, default=50)
    p.add_argument("--init", choices=["gaussian", "encoder_posterior", "both"], default="both")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--gd-tol", type=float, default=1e-6)
    p.add_argument("--reference", choices=["best", "median"], default="best",
                   help="final energy that successful starts must match")
    _add_data(p)
    p.set_defaults(func=cmd_validate_a2)

    p = sub.add_parser("slice", help="decoder vs encoder coupling on a random 2-d latent slice")
    p.add_argument("--model", required=True)
    p.add_argument("--image", type=int, default=0)
    p.add_argument("--points", type=int, default=41)
    _add_data(p)
    p.set_defaults(func=cmd_slice)

    p = sub.add_parser("replay", help="rerun a command from its config.json echo")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except NumericError as exc:
        print(f"jpmap: numeric failure: {exc}", file=sys.stderr)
        return 2
    except (JpmapError, OSError, NotImplementedError) as exc:
        print(f"jpmap: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
