"""Command-line entry point: dataset builds, training runs, evaluation, grids.

Subcommands: build-data, train, eval, generate, swap, traverse.
Exit codes: 0 ok, 1 runtime failure, 2 usage/config error.
The dataset cache root resolves from the config, the CAGAN_DATA_ROOT
environment variable, or ./data-cache, in that order.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .config import (
    CACHE_ROOT_ENV,
    ConfigError,
    DATASETS,
    GRID_KINDS,
    RunConfig,
    load_run_config,
    save_run_config,
)
from .data import (
    CaDataset,
    IngestionError,
    build_cifar_mnist,
    build_dsprites_mnist,
    build_micro_ca_split,
    load_celeba_accessories,
    to_nchw_tensor,
)
from .evaluation import (
    EvaluationReport,
    encode_dataset,
    fvae_score,
    generation_grid,
    save_image_grid,
    separation_score,
    swap,
    tile_images,
    traversal_grid,
)
from .latent import BACKGROUND, TARGET, PriorConfig, sample_common
from .networks import load_checkpoint
from .training import train
from .data import to_nhwc_array


def _dataset_cache_dir(cfg: RunConfig, split: str) -> Path:
    return cfg.resolved_cache_root() / f"{cfg.dataset}-{split}-seed{cfg.data.seed}"


def build_dataset(cfg: RunConfig, split: str) -> CaDataset:
    """Invoke the matching builder with paths/checksums from the config."""
    d = cfg.data
    paths = d.paths
    checks = d.checksums or None

    def need(*keys: str) -> List[str]:
        missing = [k for k in keys if k not in paths]
        if missing:
            raise ConfigError(
                f"dataset {cfg.dataset!r} needs data.paths entries {missing} "
                f"(have {sorted(paths)})"
            )
        return [paths[k] for k in keys]

    if cfg.dataset == "micro":
        return build_micro_ca_split(d.seed, split, d.n_train if split == "train" else d.n_test)
    if cfg.dataset == "cifar_mnist":
        tag = "train" if split == "train" else "test"
        cifar, imgs, labels = need("cifar", f"mnist_{tag}_images", f"mnist_{tag}_labels")
        return build_cifar_mnist(d.seed, split, cifar, imgs, labels, expected_checksums=checks)
    if cfg.dataset == "dsprites_mnist":
        tag = "train" if split == "train" else "test"
        imgs, labels, sprites = need(f"mnist_{tag}_images", f"mnist_{tag}_labels", "dsprites")
        return build_dsprites_mnist(
            d.seed, split, imgs, labels, sprites,
            n_train=d.n_train, n_test=d.n_test, expected_checksums=checks,
        )
    if cfg.dataset == "celeba":
        (root,) = need("celeba_root")
        return load_celeba_accessories(root, split, expected_checksums=checks)
    raise ConfigError(f"unknown dataset {cfg.dataset!r}")


def ensure_dataset(cfg: RunConfig, split: str, rebuild: bool = False) -> CaDataset:
    """Load the cached build when present, otherwise build and cache it."""
    cache = _dataset_cache_dir(cfg, split)
    if cache.is_dir() and not rebuild:
        return CaDataset.load(cache)
    ds = build_dataset(cfg, split)
    ds.save(cache)
    return ds


def _load_config(args) -> RunConfig:
    cfg = load_run_config(getattr(args, "config", None), getattr(args, "set", None) or [])
    if getattr(args, "dataset", None):
        cfg = RunConfig.from_dict({**cfg.to_dict(), "dataset": args.dataset})
    if getattr(args, "seed", None) is not None:
        payload = cfg.to_dict()
        payload["data"]["seed"] = args.seed
        cfg = RunConfig.from_dict(payload)
    if getattr(args, "out_dir", None):
        cfg = RunConfig.from_dict({**cfg.to_dict(), "out_dir": args.out_dir})
    return cfg


# --- subcommands -----------------------------------------------------------------

def cmd_build_data(args) -> int:
    cfg = _load_config(args)
    if args.cache_dir:
        cfg = RunConfig.from_dict({**cfg.to_dict(), "cache_root": args.cache_dir})
    splits = ("train", "test") if args.split == "both" else (args.split,)
    parts = []
    for split in splits:
        ds = ensure_dataset(cfg, split, rebuild=args.rebuild)
        parts.append(f"{split}={len(ds)}")
        print(
            f"{cfg.dataset} {split}: {len(ds)} samples "
            f"({ds.n_background} background, {ds.n_target} target), "
            f"index sha256 {ds.index_checksum()}"
        )
        print(f"  cached at {_dataset_cache_dir(cfg, split)}")
    print(" ".join(parts))
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    dataset = ensure_dataset(cfg, "train")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_run_config(cfg, out_dir / "run_config.yaml")
    run_dir = train(
        cfg.train, dataset, out_dir, resume_from=args.resume, max_steps=args.max_steps
    )
    lines = (run_dir / "metrics.jsonl").read_text().splitlines()
    last = json.loads(lines[-1]) if lines else {}
    ckpts = sorted((run_dir / "checkpoints").iterdir())
    print("final losses: " + json.dumps({k: v for k, v in last.items() if k != "wall_time"}))
    print(f"checkpoint: {ckpts[-1]}")
    return 0


def _prior_for(bundle) -> PriorConfig:
    return PriorConfig(L=bundle.arch.L, M=bundle.arch.M)


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    bundle, meta = load_checkpoint(args.ckpt)
    dataset = ensure_dataset(cfg, args.split)
    out_dir = Path(args.out or (Path(args.ckpt) / "eval"))
    out_dir.mkdir(parents=True, exist_ok=True)

    table = encode_dataset(bundle, dataset)
    table.save(out_dir / "latents.tsv")
    acc_s = acc_z = None
    if len(np.unique(table.attributes[table.attributes >= 0])) >= 2:
        acc_s = separation_score(table, "s_hat", folds=cfg.eval.folds, seed=cfg.eval.seed)
        acc_z = separation_score(table, "z_hat", folds=cfg.eval.folds, seed=cfg.eval.seed)
    fvae = None
    if dataset.factors is not None:
        fvae = fvae_score(
            bundle,
            dataset,
            n_train_votes=cfg.eval.fvae_train_votes,
            n_eval_votes=cfg.eval.fvae_eval_votes,
            batch_per_vote=cfg.eval.fvae_batch_per_vote,
            seed=cfg.eval.seed,
        )

    grids = [g.strip() for g in args.grids.split(",") if g.strip()] if args.grids else list(cfg.eval.grids)
    for g in grids:
        if g not in GRID_KINDS:
            raise ConfigError(f"unknown grid kind {g!r}; expected one of {GRID_KINDS}")
    grid_paths: List[str] = []
    prior = _prior_for(bundle)
    if "recon" in grids or "swap" in grids:
        x_rows = dataset.domain_indices(BACKGROUND)
        y_rows = dataset.domain_indices(TARGET)
        if x_rows.size and y_rows.size:
            x = to_nchw_tensor(dataset.images_float(x_rows[:4]))
            y = to_nchw_tensor(dataset.images_float(y_rows[:4]))
            result = swap(bundle, x, y)
            if "recon" in grids:
                tiles = np.concatenate(
                    [to_nhwc_array(t) for t in (x, result.recon_x, y, result.recon_y)]
                )
                grid_paths.append(
                    save_image_grid(tile_images(tiles, 4, x.shape[0]), out_dir / "recon.png")
                )
            if "swap" in grids:
                tiles = np.concatenate(
                    [to_nhwc_array(t) for t in (x, result.swap_x, y, result.swap_y)]
                )
                grid_paths.append(
                    save_image_grid(tile_images(tiles, 4, x.shape[0]), out_dir / "swap.png")
                )
    if "traverse" in grids:
        dims = args.dim if args.dim else cfg.eval.traverse_dims
        rng = torch.Generator().manual_seed(cfg.eval.seed)
        z = sample_common(1, prior, rng)[0]
        for dim in dims:
            grid = traversal_grid(
                bundle, z, dim,
                lo=cfg.eval.traverse_lo, hi=cfg.eval.traverse_hi, steps=cfg.eval.traverse_steps,
            )
            grid_paths.append(save_image_grid(grid, out_dir / f"traverse-dim{dim}.png"))
    if "generate" in grids:
        grid = generation_grid(
            bundle, cfg.eval.grid_rows, cfg.eval.grid_cols, prior, seed=cfg.eval.seed
        )
        grid_paths.append(save_image_grid(grid, out_dir / "generate.png"))

    report = EvaluationReport(
        acc_s=acc_s, acc_z=acc_z, folds=cfg.eval.folds, fvae=fvae, grid_paths=grid_paths
    )
    report.save(out_dir / "report.json")
    print(json.dumps(report.to_dict(), indent=2))
    print(f"report: {out_dir / 'report.json'}")
    return 0


def cmd_generate(args) -> int:
    bundle, _ = load_checkpoint(args.ckpt)
    grid = generation_grid(bundle, args.rows, args.cols, _prior_for(bundle), seed=args.seed)
    save_image_grid(grid, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_swap(args) -> int:
    cfg = _load_config(args)
    bundle, _ = load_checkpoint(args.ckpt)
    dataset = ensure_dataset(cfg, args.split)
    x_rows = dataset.domain_indices(BACKGROUND)
    y_rows = dataset.domain_indices(TARGET)
    if x_rows.size == 0 or y_rows.size == 0:
        raise ConfigError("swap needs one sample from each domain in the dataset")
    x = to_nchw_tensor(dataset.images_float(x_rows[args.x_index : args.x_index + 1]))
    y = to_nchw_tensor(dataset.images_float(y_rows[args.y_index : args.y_index + 1]))
    result = swap(bundle, x, y)
    tiles = np.concatenate(
        [to_nhwc_array(t) for t in (x, result.recon_x, result.swap_x,
                                    y, result.recon_y, result.swap_y)]
    )
    save_image_grid(tile_images(tiles, 2, 3), args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_traverse(args) -> int:
    bundle, _ = load_checkpoint(args.ckpt)
    prior = _prior_for(bundle)
    rng = torch.Generator().manual_seed(args.seed)
    z = sample_common(1, prior, rng)[0]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for dim in args.dim or [0]:
        grid = traversal_grid(bundle, z, dim, lo=args.lo, hi=args.hi, steps=args.steps)
        path = save_image_grid(grid, out_dir / f"traverse-dim{dim}.png")
        print(f"wrote {path}")
    return 0


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cagan",
        description="Train and evaluate a contrastive-analysis GAN that splits "
        "latent factors into a common block and a target-only salient block.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True):
        if config:
            p.add_argument("--config", help="YAML run configuration")
            p.add_argument(
                "--set", action="append", metavar="KEY=VALUE",
                help="override one config key (dotted path), repeatable",
            )

    p = sub.add_parser("build-data", help="build and cache a dataset")
    p.add_argument("dataset", choices=DATASETS)
    add_common(p)
    p.add_argument("--seed", type=int, help="override data.seed")
    p.add_argument("--split", choices=["train", "test", "both"], default="both")
    p.add_argument("--out-dir", dest="cache_dir", help="cache root override")
    p.add_argument("--rebuild", action="store_true", help="ignore and overwrite the cache")
    p.set_defaults(func=cmd_build_data, out_dir=None)

    p = sub.add_parser("train", help="run the training loop from a config")
    add_common(p)
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.add_argument("--max-steps", type=int, help="stop after this many total steps")
    p.add_argument("--out-dir", help="override out_dir from the config")
    p.set_defaults(func=cmd_train, dataset=None, seed=None)

    p = sub.add_parser("eval", help="separation scores, vote metric and grids")
    add_common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--grids", help="comma list from: " + ",".join(GRID_KINDS))
    p.add_argument("--dim", type=int, action="append", help="traversal dimension, repeatable")
    p.add_argument("--out", help="output directory (default: <ckpt>/eval)")
    p.set_defaults(func=cmd_eval, dataset=None, seed=None, out_dir=None)

    p = sub.add_parser("generate", help="fixed-z generation grid PNG")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--rows", type=int, default=4)
    p.add_argument("--cols", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="generate.png")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("swap", help="reconstruction + salient-swap grid PNG")
    add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--x-index", type=int, default=0)
    p.add_argument("--y-index", type=int, default=0)
    p.add_argument("--out", default="swap.png")
    p.set_defaults(func=cmd_swap, dataset=None, seed=None, out_dir=None)

    p = sub.add_parser("traverse", help="single-dimension salient traversals")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dim", type=int, action="append")
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--lo", type=float, default=-1.5)
    p.add_argument("--hi", type=float, default=1.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_traverse)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (IngestionError, RuntimeError, OSError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
