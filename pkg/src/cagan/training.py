"""Alternating optimization of the discriminator, generator/encoder and CR head.

Update routing per step: the discriminator side (trunk + D/C heads) minimizes
the adversarial and real-image classification terms; the generator/encoder
side then minimizes adversarial + classification (gradients into G only) and
code-recovery + image-reconstruction (gradients into G, the shared trunk and
the Q heads); finally the CR step, when enabled, minimizes the shared-index
cross entropy into H and G. The trunk never receives a sign-flipped
adversarial gradient.

Determinism: all latent and noise draws of a step come from one generator
seeded by (run seed, step index), so a resumed run replays the exact stream
of an uninterrupted one.
"""

from __future__ import annotations

import json
import os
import shutil
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, Iterator, Optional, Tuple

import numpy as np
import torch

from . import losses as L
from .data import CaDataset, to_nchw_tensor
from .latent import BACKGROUND, TARGET, PriorConfig, sample_common, sample_cr_batch, sample_salient
from .losses import LossWeights
from .networks import ArchitectureConfig, ModelBundle, build_models, load_checkpoint, save_checkpoint

def _f(t: torch.Tensor) -> float:
    return float(t.detach())


class TrainingDivergedError(RuntimeError):
    """Raised when a loss turns non-finite; carries a diagnostic dump."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message + "\n" + json.dumps(diagnostics, indent=2, default=str))
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run needs; defaults follow the 64x64 benchmark settings."""

    weights: LossWeights = field(default_factory=LossWeights)
    prior: PriorConfig = field(default_factory=PriorConfig)
    arch: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    lr_cr: float = 2e-4
    loops_g: int = 1
    loops_d: int = 1
    loops_cr: int = 1
    batch_size: int = 128
    epochs: int = 500
    seed: int = 0
    checkpoint_every: int = 1000
    optimizer: str = "adam"
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999

    def __post_init__(self):
        if self.prior.L != self.arch.L or self.prior.M != self.arch.M:
            raise ValueError("prior and architecture disagree on the latent sizes L/M")
        for name in ("loops_g", "loops_d", "loops_cr", "batch_size", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        for name in ("lr_g", "lr_d", "lr_cr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        d["prior"] = self.prior.to_dict()
        d["arch"] = self.arch.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights.from_dict(d["weights"])
        d["prior"] = PriorConfig.from_dict(d["prior"])
        d["arch"] = ArchitectureConfig.from_dict(d["arch"])
        return cls(**d)

    @classmethod
    def for_dataset(cls, name: str, **overrides) -> "TrainConfig":
        """Published per-dataset settings: learning rates, loop counts, batch size."""
        presets = {
            "celeba": dict(lr_g=2e-4, lr_d=2e-4, lr_cr=2e-4, loops_g=1, batch_size=128),
            "cifar_mnist": dict(lr_g=2e-4, lr_d=2e-4, lr_cr=2e-4, loops_g=1, batch_size=128),
            "dsprites_mnist": dict(lr_g=5e-5, lr_d=5e-5, lr_cr=5e-5, loops_g=2, batch_size=128),
            "brats128": dict(lr_g=1e-4, lr_d=1e-4, lr_cr=1e-4, loops_g=1, batch_size=32),
            "micro": dict(lr_g=2e-4, lr_d=2e-4, lr_cr=2e-4, loops_g=1, batch_size=64, epochs=10),
        }
        if name not in presets:
            raise ValueError(f"unknown dataset preset {name!r}; known: {sorted(presets)}")
        merged = {**presets[name], **overrides}
        return cls(**merged)


@dataclass
class TrainState:
    bundle: ModelBundle
    opt_d: torch.optim.Adam
    opt_g: torch.optim.Adam
    opt_q: torch.optim.Adam
    opt_cr: Optional[torch.optim.Adam]
    step: int = 0
    epoch: int = 0


def _step_generator(seed: int, step: int) -> torch.Generator:
    mixed = (seed * 1_000_003 + step * 2_654_435_761 + 12_345) % (2**63 - 1)
    return torch.Generator().manual_seed(mixed)


def init_train_state(cfg: TrainConfig) -> TrainState:
    bundle = build_models(cfg.arch, seed=cfg.seed)
    opt_d, opt_g, opt_q, opt_cr = _make_optimizers(bundle, cfg)
    return TrainState(bundle=bundle, opt_d=opt_d, opt_g=opt_g, opt_q=opt_q, opt_cr=opt_cr)


def _zero_all(state: TrainState) -> None:
    for opt in (state.opt_d, state.opt_g, state.opt_q, state.opt_cr):
        if opt is not None:
            opt.zero_grad(set_to_none=True)


def _grad_norms(state: TrainState) -> Dict[str, float]:
    norms = {}
    groups = {
        "generator": state.bundle.generator_parameters(),
        "trunk": state.bundle.trunk_parameters(),
        "q_heads": state.bundle.q_head_parameters(),
    }
    for name, params in groups.items():
        total = 0.0
        for p in params:
            if p.grad is not None:
                total += float(p.grad.detach().pow(2).sum())
        norms[name] = total ** 0.5
    return norms


def _guard_finite(state: TrainState, record: Dict[str, float]) -> None:
    bad = [k for k, v in record.items() if not np.isfinite(v)]
    if bad:
        raise TrainingDivergedError(
            f"non-finite loss component(s) {bad} at step {state.step}",
            {"step": state.step, "components": record, "grad_norms": _grad_norms(state)},
        )


def train_step(
    state: TrainState,
    batch_x: torch.Tensor,
    batch_y: torch.Tensor,
    cfg: TrainConfig,
) -> Dict[str, float]:
    """One alternating update on a paired (background, target) real batch.

    Returns the metrics record with every loss component of the step.
    """
    if batch_x.shape != batch_y.shape:
        raise ValueError("background and target batches must have equal shapes")
    w = cfg.weights
    bundle = state.bundle
    gen = bundle.generator
    disc = bundle.discriminator
    rng = _step_generator(cfg.seed, state.step)
    batch = batch_x.shape[0]
    record: Dict[str, float] = {}

    gen.train()
    disc.train()
    disc.noise_source.generator = rng

    g_params = list(bundle.generator_parameters())
    q_side_params = (
        g_params + list(bundle.trunk_parameters()) + list(bundle.q_head_parameters())
    )

    reals = torch.cat([batch_x, batch_y])

    def draw_codes():
        # independent draws for the two domains; background salient code is 0
        z_x = sample_common(batch, cfg.prior, rng)
        s_x = sample_salient(batch, BACKGROUND, cfg.prior, rng)
        z_y = sample_common(batch, cfg.prior, rng)
        s_y = sample_salient(batch, TARGET, cfg.prior, rng)
        return torch.cat([z_x, z_y]), torch.cat([s_x, s_y]), z_x, z_y, s_y

    try:
        # --- discriminator side -------------------------------------------
        for _ in range(cfg.loops_d):
            _zero_all(state)
            with torch.no_grad():
                z, s, *_ = draw_codes()
                fakes = gen(z, s)
            d_real, c_real, _, _ = disc(reals)
            d_fake, _, _, _ = disc(fakes)
            d_real_x, d_real_y = d_real.split(batch)
            c_real_x, c_real_y = c_real.split(batch)
            d_fake_x, d_fake_y = d_fake.split(batch)
            adv_d = L.adv_loss_discriminator(d_real_x, d_fake_x, d_real_y, d_fake_y, w)
            class_d = L.class_loss_discriminator(c_real_x, c_real_y, w)
            total_d = L.total_discriminator_objective(
                L.DiscriminatorLossParts(adv=adv_d, classify=class_d)
            )
            total_d.backward()
            state.opt_d.step()
            record.update(
                adv_d=_f(adv_d), class_d=_f(class_d), total_d=_f(total_d)
            )
            _guard_finite(state, record)

        # --- generator / encoder side -------------------------------------
        for _ in range(cfg.loops_g):
            _zero_all(state)
            z, s, z_x, z_y, s_y = draw_codes()
            fakes = gen(z, s)
            d_fake, c_fake, qz_fake, qs_fake = disc(fakes)
            d_fake_x, d_fake_y = d_fake.split(batch)
            c_fake_x, c_fake_y = c_fake.split(batch)
            qz_fake_x, qz_fake_y = qz_fake.split(batch)
            qs_fake_x, qs_fake_y = qs_fake.split(batch)
            _, _, qz_real, qs_real = disc(reals)
            qs_real_x = qs_real[:batch]
            # background images reconstruct with s = 0 by the domain convention
            s_rec = torch.cat([torch.zeros_like(qs_real[:batch]), qs_real[batch:]])
            recs = gen(qz_real, s_rec)
            x_rec, y_rec = recs.split(batch)

            adv_g = L.adv_loss_generator(d_fake_x, d_fake_y, w)
            class_g = L.class_loss_generator(c_fake_x, c_fake_y, w)
            info = L.info_loss(
                qz_fake_x, z_x, qs_fake_x, qz_fake_y, z_y, qs_fake_y, s_y, qs_real_x, w
            )
            image = L.image_reconstruction_loss(batch_x, x_rec, batch_y, y_rec, w)
            # adversarial/classification gradients reach G only; the recovery
            # terms also update the shared trunk and Q heads
            (adv_g + class_g).backward(inputs=g_params, retain_graph=True)
            (info + image).backward(inputs=q_side_params)
            state.opt_g.step()
            state.opt_q.step()
            total_g = _f(adv_g) + _f(class_g) + _f(info) + _f(image)
            record.update(
                adv_g=_f(adv_g), class_g=_f(class_g),
                info=_f(info), image=_f(image), total_g=total_g,
            )
            _guard_finite(state, record)

        # --- contrastive regularizer ---------------------------------------
        if bundle.cr_head is not None:
            cr_head = bundle.cr_head
            cr_head.train()
            cr_head.noise_source.generator = rng
            cr_params = list(bundle.cr_parameters())
            base_total_g = record["total_g"]
            try:
                for _ in range(cfg.loops_cr):
                    _zero_all(state)
                    z, s1, s2, k = sample_cr_batch(batch, cfg.prior, rng)
                    pair_a = gen(z, s1)
                    pair_b = gen(z, s2)
                    logits = cr_head(torch.cat([pair_a, pair_b], dim=1))
                    cr = w.w_cr * L.cr_loss(logits, k)
                    cr.backward(inputs=cr_params + g_params)
                    state.opt_cr.step()
                    record.update(cr=_f(cr), total_g=base_total_g + _f(cr))
                    _guard_finite(state, record)
            finally:
                cr_head.noise_source.generator = None
        else:
            record.setdefault("cr", 0.0)
    finally:
        disc.noise_source.generator = None

    _zero_all(state)
    state.step += 1
    return record


def _epoch_batches(
    n_bg: int, n_tg: int, batch_size: int, seed: int, epoch: int
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Paired index batches; the smaller domain is cycled with fresh shuffles
    so one epoch covers the larger domain once (remainder dropped)."""
    steps = max(n_bg, n_tg) // batch_size

    def stream(n: int, tag: int) -> Iterator[int]:
        wrap = 0
        while True:
            order = np.random.default_rng((seed, epoch, tag, wrap)).permutation(n)
            yield from order
            wrap += 1

    bg, tg = stream(n_bg, 0), stream(n_tg, 1)
    for _ in range(steps):
        yield (
            np.fromiter(bg, dtype=np.int64, count=batch_size),
            np.fromiter(tg, dtype=np.int64, count=batch_size),
        )


def steps_per_epoch(dataset: CaDataset, batch_size: int) -> int:
    return max(dataset.n_background, dataset.n_target) // batch_size


_STATE_BLOB = "train_state.pt"


def _save_train_checkpoint(directory: Path, state: TrainState, cfg: TrainConfig) -> None:
    tmp = directory.with_name(directory.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    extra = {
        _STATE_BLOB: {
            "opt_d": state.opt_d.state_dict(),
            "opt_g": state.opt_g.state_dict(),
            "opt_q": state.opt_q.state_dict(),
            "opt_cr": None if state.opt_cr is None else state.opt_cr.state_dict(),
            "step": state.step,
            "epoch": state.epoch,
        }
    }
    save_checkpoint(tmp, state.bundle, step=state.step, seed=cfg.seed, epoch=state.epoch, extra_blobs=extra)
    if directory.exists():
        shutil.rmtree(directory)
    os.rename(tmp, directory)


def _make_optimizers(
    bundle: ModelBundle, cfg: TrainConfig
) -> Tuple[torch.optim.Adam, torch.optim.Adam, torch.optim.Adam, Optional[torch.optim.Adam]]:
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    d_params = (
        list(bundle.trunk_parameters())
        + list(bundle.d_head_parameters())
        + list(bundle.c_head_parameters())
    )
    q_params = list(bundle.trunk_parameters()) + list(bundle.q_head_parameters())
    opt_d = torch.optim.Adam(d_params, lr=cfg.lr_d, betas=betas)
    opt_g = torch.optim.Adam(bundle.generator_parameters(), lr=cfg.lr_g, betas=betas)
    opt_q = torch.optim.Adam(q_params, lr=cfg.lr_g, betas=betas)
    opt_cr = None
    if cfg.arch.cr_enabled:
        cr_params = list(bundle.cr_parameters()) + list(bundle.generator_parameters())
        opt_cr = torch.optim.Adam(cr_params, lr=cfg.lr_cr, betas=betas)
    return opt_d, opt_g, opt_q, opt_cr


def load_train_state(checkpoint_dir: str | os.PathLike, cfg: TrainConfig) -> TrainState:
    """Rebuild a full training state (networks + optimizer moments) from disk."""
    bundle, _ = load_checkpoint(checkpoint_dir, expected_arch=cfg.arch)
    opt_d, opt_g, opt_q, opt_cr = _make_optimizers(bundle, cfg)
    state = TrainState(bundle=bundle, opt_d=opt_d, opt_g=opt_g, opt_q=opt_q, opt_cr=opt_cr)
    blob = torch.load(Path(checkpoint_dir) / _STATE_BLOB, weights_only=False)
    state.opt_d.load_state_dict(blob["opt_d"])
    state.opt_g.load_state_dict(blob["opt_g"])
    state.opt_q.load_state_dict(blob["opt_q"])
    if state.opt_cr is not None and blob["opt_cr"] is not None:
        state.opt_cr.load_state_dict(blob["opt_cr"])
    state.step = int(blob["step"])
    state.epoch = int(blob["epoch"])
    return state


def train(
    cfg: TrainConfig,
    dataset: CaDataset,
    run_dir: str | os.PathLike,
    resume_from: Optional[str | os.PathLike] = None,
    max_steps: Optional[int] = None,
) -> Path:
    """Run the epoch loop, writing a manifest, metrics stream and checkpoints.

    `max_steps` caps the total step counter (useful for CI budgets); training
    otherwise runs for cfg.epochs epochs. Returns the run directory.
    """
    if dataset.n_background == 0 or dataset.n_target == 0:
        raise ValueError("training needs samples from both domains")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))

    state = load_train_state(resume_from, cfg) if resume_from else init_train_state(cfg)
    bg_idx_all = dataset.domain_indices(BACKGROUND)
    tg_idx_all = dataset.domain_indices(TARGET)
    per_epoch = steps_per_epoch(dataset, cfg.batch_size)
    if per_epoch == 0:
        raise ValueError("batch_size larger than the bigger domain; no steps to run")

    metrics_path = run_dir / "metrics.jsonl"
    ckpt_root = run_dir / "checkpoints"
    ckpt_root.mkdir(exist_ok=True)

    def checkpoint() -> Path:
        path = ckpt_root / f"step-{state.step:08d}"
        _save_train_checkpoint(path, state, cfg)
        return path

    done = False
    with open(metrics_path, "a") as metrics_file:
        for epoch in range(state.epoch, cfg.epochs):
            state.epoch = epoch
            skip = state.step - epoch * per_epoch  # mid-epoch resume offset
            for i, (bg_rows, tg_rows) in enumerate(
                _epoch_batches(len(bg_idx_all), len(tg_idx_all), cfg.batch_size, cfg.seed, epoch)
            ):
                if i < skip:
                    continue
                batch_x = to_nchw_tensor(dataset.images_float(bg_idx_all[bg_rows]))
                batch_y = to_nchw_tensor(dataset.images_float(tg_idx_all[tg_rows]))
                t0 = time.monotonic()
                record = train_step(state, batch_x, batch_y, cfg)
                record = {"step": state.step, "epoch": epoch, **record,
                          "wall_time": time.monotonic() - t0}
                metrics_file.write(json.dumps(record) + "\n")
                metrics_file.flush()
                if cfg.checkpoint_every > 0 and state.step % cfg.checkpoint_every == 0:
                    checkpoint()
                if max_steps is not None and state.step >= max_steps:
                    done = True
                    break
            if done:
                break
            state.epoch = epoch + 1
    checkpoint()
    return run_dir
