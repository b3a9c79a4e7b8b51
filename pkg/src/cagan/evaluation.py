"""Quantitative protocols and qualitative emitters for a trained model.

Quantitative: encode a labeled test set with the Q heads (eval mode, noise
off), then (a) cross-validated logistic-regression accuracy predicting the
target attribute from the salient block (should be high) and from the common
block (should be near chance), and (b) a majority-vote disentanglement score
over the salient encoder for datasets with ground-truth generative factors.

Qualitative: reconstruction/swap pairs, single-dimension traversals and
fixed-z generation grids, emitted as PNG tiles.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch
from PIL import Image
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold

from .data import CaDataset, to_nchw_tensor, to_nhwc_array, float_to_u8
from .latent import TARGET, PriorConfig, sample_common, sample_salient
from .networks import ModelBundle, discriminate, generate

FVAE_TRAIN_VOTES = 800
FVAE_EVAL_VOTES = 200
FVAE_BATCH_PER_VOTE = 64
_STD_FLOOR = 1e-8


@dataclass
class LatentTable:
    """Eval-mode encodings of one dataset, one row per sample."""

    ids: List[str]
    z_hat: np.ndarray      # (N, L)
    s_hat: np.ndarray      # (N, M)
    domains: np.ndarray    # (N,) 0 background / 1 target
    attributes: np.ndarray  # (N,) int, -1 when absent

    def __len__(self) -> int:
        return len(self.ids)

    def save(self, path: str) -> None:
        L, M = self.z_hat.shape[1], self.s_hat.shape[1]
        header = ["sample_id", "domain", "attribute"]
        header += [f"z_{i}" for i in range(L)] + [f"s_{i}" for i in range(M)]
        lines = ["\t".join(header)]
        for i in range(len(self)):
            row = [self.ids[i], str(int(self.domains[i])), str(int(self.attributes[i]))]
            row += [f"{v:.8g}" for v in self.z_hat[i]] + [f"{v:.8g}" for v in self.s_hat[i]]
            lines.append("\t".join(row))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str) -> "LatentTable":
        lines = Path(path).read_text().splitlines()
        header = lines[0].split("\t")
        L = sum(1 for h in header if h.startswith("z_"))
        ids, domains, attributes, z, s = [], [], [], [], []
        for line in lines[1:]:
            parts = line.split("\t")
            ids.append(parts[0])
            domains.append(int(parts[1]))
            attributes.append(int(parts[2]))
            vals = [float(v) for v in parts[3:]]
            z.append(vals[:L])
            s.append(vals[L:])
        return cls(
            ids=ids,
            z_hat=np.array(z, dtype=np.float64),
            s_hat=np.array(s, dtype=np.float64),
            domains=np.array(domains),
            attributes=np.array(attributes, dtype=np.int64),
        )


@dataclass
class EvaluationReport:
    """Separation accuracies are None for datasets without attribute labels,
    the vote score is None for datasets without ground-truth factors."""

    acc_s: Optional[Tuple[float, float]]    # (mean, std) over folds
    acc_z: Optional[Tuple[float, float]]
    folds: int
    fvae: Optional[float] = None
    grid_paths: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        def pair(v):
            return (None, None) if v is None else v

        return {
            "acc_s_mean": pair(self.acc_s)[0],
            "acc_s_std": pair(self.acc_s)[1],
            "acc_z_mean": pair(self.acc_z)[0],
            "acc_z_std": pair(self.acc_z)[1],
            "folds": self.folds,
            "fvae": self.fvae,
            "grid_paths": self.grid_paths,
        }

    def save(self, path: str) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def encode_dataset(bundle: ModelBundle, dataset: CaDataset, batch_size: int = 256) -> LatentTable:
    """Deterministic eval-mode encodings of every sample in the dataset."""
    zs, ss = [], []
    for start in range(0, len(dataset), batch_size):
        block = dataset.images_float(np.arange(start, min(start + batch_size, len(dataset))))
        _, _, qz, qs = discriminate(bundle, to_nchw_tensor(block), mode="eval")
        zs.append(qz.numpy())
        ss.append(qs.numpy())
    return LatentTable(
        ids=list(dataset.ids),
        z_hat=np.concatenate(zs).astype(np.float64),
        s_hat=np.concatenate(ss).astype(np.float64),
        domains=dataset.domains.copy(),
        attributes=dataset.attributes.astype(np.int64),
    )


def separation_score(
    table: LatentTable,
    feature: str = "s_hat",
    folds: int = 5,
    seed: int = 0,
    l2_strength: float = 1.0,
    max_iter: int = 500,
) -> Tuple[float, float]:
    """Cross-validated attribute accuracy from one latent block.

    Logistic regression (lbfgs, fixed iteration budget, L2 penalty with the
    given strength) over stratified folds; returns (mean, std) of fold
    accuracies. Only rows carrying an attribute participate.
    """
    if feature not in ("s_hat", "z_hat"):
        raise ValueError(f"feature must be 's_hat' or 'z_hat', got {feature!r}")
    mask = table.attributes >= 0
    X = (table.s_hat if feature == "s_hat" else table.z_hat)[mask]
    y = table.attributes[mask]
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise ValueError("separation score undefined: the table carries a single class")
    if counts.min() < folds:
        raise ValueError(
            f"need at least {folds} samples per class for {folds}-fold CV, "
            f"smallest class has {counts.min()}"
        )
    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    accs = []
    for train_rows, test_rows in splitter.split(X, y):
        clf = LogisticRegression(C=1.0 / l2_strength, max_iter=max_iter, solver="lbfgs")
        clf.fit(X[train_rows], y[train_rows])
        accs.append(clf.score(X[test_rows], y[test_rows]))
    return float(np.mean(accs)), float(np.std(accs))


def _bundle_salient_encoder(bundle: ModelBundle, batch_size: int = 256) -> Callable:
    def encode(images: np.ndarray) -> np.ndarray:
        out = []
        for start in range(0, images.shape[0], batch_size):
            _, _, _, qs = discriminate(
                bundle, to_nchw_tensor(images[start : start + batch_size]), mode="eval"
            )
            out.append(qs.numpy())
        return np.concatenate(out)

    return encode


def fvae_score(
    bundle: ModelBundle,
    dataset: CaDataset,
    n_train_votes: int = FVAE_TRAIN_VOTES,
    n_eval_votes: int = FVAE_EVAL_VOTES,
    batch_per_vote: int = FVAE_BATCH_PER_VOTE,
    seed: int = 0,
) -> float:
    """Majority-vote disentanglement score of the salient encoder."""
    return fvae_score_from_encoder(
        _bundle_salient_encoder(bundle),
        dataset,
        n_train_votes=n_train_votes,
        n_eval_votes=n_eval_votes,
        batch_per_vote=batch_per_vote,
        seed=seed,
    )


def fvae_score_from_encoder(
    encode: Callable[[np.ndarray], np.ndarray],
    dataset: CaDataset,
    n_train_votes: int = FVAE_TRAIN_VOTES,
    n_eval_votes: int = FVAE_EVAL_VOTES,
    batch_per_vote: int = FVAE_BATCH_PER_VOTE,
    seed: int = 0,
) -> float:
    """Vote protocol: fix one factor, draw target images sharing that value,
    and record which (variance-normalized) encoder dimension varies least.
    A majority map from dimension to factor, fit on the training votes, is
    scored on held-out votes. Dimensions with (near) zero global variance are
    excluded; if none survive, votes fall back to uniform random guesses.
    """
    if dataset.factors is None:
        raise ValueError("the vote metric needs ground-truth factors on the dataset")
    target_rows = dataset.domain_indices(TARGET)
    if target_rows.size == 0:
        raise ValueError("the vote metric needs target-domain samples")
    factors = dataset.factors[target_rows]
    n_factors = factors.shape[1]
    s_all = np.asarray(encode(dataset.images_float(target_rows)), dtype=np.float64)
    global_std = s_all.std(axis=0)
    valid = global_std > _STD_FLOOR
    if not valid.all():
        warnings.warn(
            f"excluding {int((~valid).sum())} salient dimension(s) with zero variance "
            f"from the vote metric",
            RuntimeWarning,
        )
    rng = np.random.default_rng(seed)
    valid_idx = np.nonzero(valid)[0]

    def one_vote() -> Tuple[Optional[int], int]:
        f = int(rng.integers(0, n_factors))
        anchor = int(rng.integers(0, factors.shape[0]))
        value = factors[anchor, f]
        pool = np.nonzero(factors[:, f] == value)[0]
        rows = rng.choice(pool, size=batch_per_vote, replace=pool.size < batch_per_vote)
        if valid_idx.size == 0:
            return None, f
        batch = s_all[rows][:, valid_idx] / global_std[valid_idx]
        d = int(valid_idx[int(np.argmin(batch.var(axis=0)))])
        return d, f

    counts = np.zeros((s_all.shape[1], n_factors), dtype=np.int64)
    for _ in range(n_train_votes):
        d, f = one_vote()
        if d is not None:
            counts[d, f] += 1
    dim_to_factor = counts.argmax(axis=1)

    hits = 0
    for _ in range(n_eval_votes):
        d, f = one_vote()
        pred = int(rng.integers(0, n_factors)) if d is None else int(dim_to_factor[d])
        hits += pred == f
    return hits / n_eval_votes


# --- qualitative emitters -------------------------------------------------------

@dataclass
class SwapResult:
    """Reconstructions and salient-swapped regenerations of one (x, y) pair."""

    recon_x: torch.Tensor   # G(z_hat_x, 0)
    recon_y: torch.Tensor   # G(z_hat_y, s_hat_y)
    swap_x: torch.Tensor    # G(z_hat_x, s_hat_y)
    swap_y: torch.Tensor    # G(z_hat_y, s_hat_x)


def swap(bundle: ModelBundle, x_real: torch.Tensor, y_real: torch.Tensor) -> SwapResult:
    """Exchange the estimated salient codes of two image batches and regenerate.

    Background reconstructions use s = 0, matching the domain convention.
    """
    _, _, z_x, s_x = discriminate(bundle, x_real, mode="eval")
    _, _, z_y, s_y = discriminate(bundle, y_real, mode="eval")
    zeros = torch.zeros_like(s_x)
    return SwapResult(
        recon_x=generate(bundle, z_x, zeros),
        recon_y=generate(bundle, z_y, s_y),
        swap_x=generate(bundle, z_x, s_y),
        swap_y=generate(bundle, z_y, s_x),
    )


def traversal_grid(
    bundle: ModelBundle,
    z: torch.Tensor,
    dim: int,
    lo: float = -1.5,
    hi: float = 1.5,
    steps: int = 8,
) -> np.ndarray:
    """Row of images sweeping one salient coordinate over [lo, hi], all other
    salient coordinates zero and the common code fixed."""
    arch = bundle.arch
    if not 0 <= dim < arch.M:
        raise IndexError(f"salient dimension {dim} out of range [0, {arch.M})")
    if z.ndim != 1 or z.shape[0] != arch.L:
        raise ValueError(f"z must be a length-{arch.L} vector")
    sweep = torch.linspace(lo, hi, steps)
    s = torch.zeros(steps, arch.M)
    s[:, dim] = sweep
    images = generate(bundle, z.unsqueeze(0).expand(steps, -1), s)
    return tile_images(to_nhwc_array(images), rows=1, cols=steps)


def generation_grid(
    bundle: ModelBundle, rows: int, cols: int, prior: PriorConfig, seed: int = 0
) -> np.ndarray:
    """rows x cols tiles; each row shares one common code, column 0 is the
    background rendering (s = 0), remaining columns draw fresh salient codes."""
    rng = torch.Generator().manual_seed(seed)
    tiles = []
    for _ in range(rows):
        z = sample_common(1, prior, rng).expand(cols, -1)
        s = torch.zeros(cols, prior.M)
        if cols > 1:
            s[1:] = sample_salient(cols - 1, TARGET, prior, rng)
        tiles.append(to_nhwc_array(generate(bundle, z, s)))
    return tile_images(np.concatenate(tiles), rows=rows, cols=cols)


def tile_images(images: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """(rows*cols, H, W, C) float array to one (rows*H, cols*W, C) grid."""
    n, h, w, c = images.shape
    if n != rows * cols:
        raise ValueError(f"expected {rows * cols} tiles, got {n}")
    grid = images.reshape(rows, cols, h, w, c).transpose(0, 2, 1, 3, 4)
    return grid.reshape(rows * h, cols * w, c)


def save_image_grid(grid: np.ndarray, path: str) -> str:
    """Write a [-1, 1] float (H, W, C) grid as a PNG file."""
    u8 = float_to_u8(grid)
    if u8.shape[-1] == 1:
        img = Image.fromarray(u8[..., 0], mode="L")
    else:
        img = Image.fromarray(u8, mode="RGB")
    img.save(path, format="PNG")
    return str(path)
