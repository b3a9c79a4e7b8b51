"""Network builders for the generator, shared-trunk discriminator and CR head.

Three resolutions are supported:

* 64x64: transposed-conv generator and a 4-stage stride-2 conv trunk with
  batch norm; additive Gaussian noise in front of every discriminator layer
  (train mode only). Heads are 4x4 convs collapsing the 4x4 feature map.
* 128x128: spectral norm replaces batch norm in the trunk, heads are fully
  connected with a width-128 intermediate layer, and the generator uses
  upsample + 3x3 conv stages with one self-attention block. Spatial trace of
  the generator: 4 -> 8 -> 16 -> 32 -> (attention) -> 64 -> 64 -> 128 -> 128.
* 32x32: a reduced variant of the 64 stack (one stage fewer, half the
  channel widths) used by the CI-scale synthetic dataset.

The discriminator trunk is shared by four heads: D (real/fake probability),
C (domain probability), Q_z (common-code estimate, L values) and Q_s
(salient-code estimate, M values). Q heads are linear: their raw outputs are
the location parameters of the factorized auxiliary distribution, so the
matching losses are plain L1 distances.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict
from typing import Iterator, Optional, Tuple

import torch
from torch import nn
from torch.nn.utils import spectral_norm

SUPPORTED_SIZES = (32, 64, 128)


@dataclass(frozen=True)
class ArchitectureConfig:
    """Resolution, channel count, latent sizes and regularizer switches."""

    image_size: int = 64
    channels: int = 3
    L: int = 64
    M: int = 64
    noise_std: float = 0.2
    lrelu_slope: float = 0.2
    use_spectral_norm: Optional[bool] = None
    use_self_attention: Optional[bool] = None
    cr_enabled: bool = False

    def __post_init__(self):
        if self.image_size not in SUPPORTED_SIZES:
            raise ValueError(f"image_size must be one of {SUPPORTED_SIZES}, got {self.image_size}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if self.image_size == 128 and self.channels != 1:
            raise ValueError("the 128x128 variant is single-channel only")
        if self.L < 1 or self.M < 1:
            raise ValueError("L and M must be positive")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        if not 0.0 < self.lrelu_slope < 1.0:
            raise ValueError(f"lrelu_slope must be in (0, 1), got {self.lrelu_slope}")
        wants = self.image_size == 128
        for name in ("use_spectral_norm", "use_self_attention"):
            value = getattr(self, name)
            if value is None:
                object.__setattr__(self, name, wants)
            elif value != wants:
                raise ValueError(
                    f"{name}={value} contradicts image_size={self.image_size} "
                    f"(spectral norm and self-attention belong to the 128 variant)"
                )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        return cls(**d)


class _NoiseSource:
    """Shared holder so every noise layer of one network draws from one generator."""

    __slots__ = ("generator",)

    def __init__(self):
        self.generator: Optional[torch.Generator] = None


class GaussianNoise(nn.Module):
    """Adds zero-mean Gaussian noise to its input in train mode only."""

    def __init__(self, std: float, source: _NoiseSource):
        super().__init__()
        self.std = std
        self._source = source

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.training or self.std == 0.0:
            return x
        noise = torch.randn(
            x.shape, generator=self._source.generator, dtype=x.dtype, device=x.device
        )
        return x + noise * self.std

    def extra_repr(self) -> str:
        return f"std={self.std}"


class SelfAttention(nn.Module):
    """Query/key/value 1x1-conv attention with a residual gate initialized to 0."""

    def __init__(self, channels: int):
        super().__init__()
        inner = max(channels // 8, 1)
        self.query = nn.Conv2d(channels, inner, 1)
        self.key = nn.Conv2d(channels, inner, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.gate = nn.Parameter(torch.zeros(()))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q = self.query(x).flatten(2)          # (b, c', hw)
        k = self.key(x).flatten(2)
        v = self.value(x).flatten(2)          # (b, c, hw)
        attn = torch.bmm(q.transpose(1, 2), k)  # (b, hw, hw)
        attn = torch.softmax(attn, dim=-1)
        out = torch.bmm(v, attn.transpose(1, 2)).view(b, c, h, w)
        return x + self.gate * out


# (trunk channel widths, generator channel widths) per resolution; the
# generator list is read output-to-input of the final stage. The 32 variant
# is deliberately narrow so CI-scale training fits a CPU budget.
_TRUNK_WIDTHS = {32: (32, 64, 128), 64: (64, 128, 256, 512), 128: (64, 128, 256, 512, 512)}
_GEN_WIDTHS = {32: (128, 64, 32), 64: (512, 256, 128, 64)}


class Generator(nn.Module):
    """Maps a concatenated (z, s) code to an image in [-1, 1]."""

    def __init__(self, arch: ArchitectureConfig):
        super().__init__()
        self.arch = arch
        in_dim = arch.L + arch.M
        if arch.image_size == 128:
            self.stem = nn.Linear(in_dim, 512 * 4 * 4)
            up = lambda: nn.Upsample(scale_factor=2, mode="nearest")
            block = lambda cin, cout: [nn.Conv2d(cin, cout, 3, 1, 1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]
            self.body = nn.Sequential(
                up(), *block(512, 1024),          # 8
                up(), *block(1024, 512),          # 16
                up(), *block(512, 256),           # 32
                SelfAttention(256),
                up(), *block(256, 256),           # 64
                *block(256, 128),                 # 64, no upsample
                up(), *block(128, 64),            # 128
                nn.Conv2d(64, arch.channels, 3, 1, 1),
                nn.Tanh(),
            )
        else:
            widths = _GEN_WIDTHS[arch.image_size]
            layers = [
                nn.ConvTranspose2d(in_dim, widths[0], 4, 1, 0),
                nn.BatchNorm2d(widths[0]),
                nn.ReLU(inplace=True),
            ]
            for cin, cout in zip(widths, widths[1:]):
                layers += [
                    nn.ConvTranspose2d(cin, cout, 4, 2, 1),
                    nn.BatchNorm2d(cout),
                    nn.ReLU(inplace=True),
                ]
            layers += [nn.ConvTranspose2d(widths[-1], arch.channels, 4, 2, 1), nn.Tanh()]
            self.stem = None
            self.body = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        code = torch.cat([z, s], dim=1)
        if self.stem is not None:
            h = self.stem(code).view(code.shape[0], 512, 4, 4)
        else:
            h = code.view(code.shape[0], -1, 1, 1)
        return self.body(h)


def _conv_block(
    cin: int, cout: int, arch: ArchitectureConfig, source: _NoiseSource, batchnorm: bool
) -> list:
    conv = nn.Conv2d(cin, cout, 4, 2, 1)
    if arch.use_spectral_norm:
        conv = spectral_norm(conv)
    layers = [GaussianNoise(arch.noise_std, source), conv]
    if batchnorm and not arch.use_spectral_norm:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.LeakyReLU(arch.lrelu_slope, inplace=True))
    return layers


def _build_trunk(
    arch: ArchitectureConfig, in_channels: int, source: _NoiseSource
) -> Tuple[nn.Sequential, int]:
    """Stride-2 conv stack taking image_size down to a 4x4 feature map."""
    widths = _TRUNK_WIDTHS[arch.image_size]
    layers: list = []
    cin = in_channels
    for i, cout in enumerate(widths):
        layers += _conv_block(cin, cout, arch, source, batchnorm=i > 0)
        cin = cout
    return nn.Sequential(*layers), cin


class _ConvHead(nn.Module):
    """4x4 conv collapsing the 4x4 trunk map to `out_dim` values per image."""

    def __init__(self, feat: int, out_dim: int, arch: ArchitectureConfig, source: _NoiseSource):
        super().__init__()
        self.net = nn.Sequential(GaussianNoise(arch.noise_std, source), nn.Conv2d(feat, out_dim, 4, 1, 0))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.net(h).flatten(1)


class _FcHead(nn.Module):
    """Flattened fully connected head, optionally with a width-128 hidden layer."""

    def __init__(
        self,
        feat: int,
        out_dim: int,
        arch: ArchitectureConfig,
        source: _NoiseSource,
        hidden: bool,
    ):
        super().__init__()
        layers: list = [nn.Flatten(), GaussianNoise(arch.noise_std, source)]
        if hidden:
            layers += [
                spectral_norm(nn.Linear(feat, 128)),
                nn.LeakyReLU(arch.lrelu_slope, inplace=True),
                GaussianNoise(arch.noise_std, source),
                spectral_norm(nn.Linear(128, out_dim)),
            ]
        else:
            layers.append(nn.Linear(feat, out_dim))
        self.net = nn.Sequential(*layers)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.net(h)


def _make_heads(arch: ArchitectureConfig, feat: int, source: _NoiseSource) -> nn.ModuleDict:
    if arch.image_size == 128:
        flat = feat * 4 * 4
        return nn.ModuleDict(
            {
                "d": _FcHead(flat, 1, arch, source, hidden=False),
                "c": _FcHead(flat, 1, arch, source, hidden=False),
                "qz": _FcHead(flat, arch.L, arch, source, hidden=True),
                "qs": _FcHead(flat, arch.M, arch, source, hidden=True),
            }
        )
    return nn.ModuleDict(
        {
            "d": _ConvHead(feat, 1, arch, source),
            "c": _ConvHead(feat, 1, arch, source),
            "qz": _ConvHead(feat, arch.L, arch, source),
            "qs": _ConvHead(feat, arch.M, arch, source),
        }
    )


class Discriminator(nn.Module):
    """Shared trunk with D/C/Q_z/Q_s heads."""

    def __init__(self, arch: ArchitectureConfig):
        super().__init__()
        self.arch = arch
        self.noise_source = _NoiseSource()
        self.trunk, feat = _build_trunk(arch, arch.channels, self.noise_source)
        self.heads = _make_heads(arch, feat, self.noise_source)

    def forward(
        self, images: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        h = self.trunk(images)
        d = torch.sigmoid(self.heads["d"](h)).squeeze(1)
        c = torch.sigmoid(self.heads["c"](h)).squeeze(1)
        qz = self.heads["qz"](h)
        qs = self.heads["qs"](h)
        return d, c, qz, qs


class CRHead(nn.Module):
    """Shared-coordinate classifier: same layout as the Q_s path, input is two
    images concatenated channel-wise, output is one logit per salient dim."""

    def __init__(self, arch: ArchitectureConfig):
        super().__init__()
        self.arch = arch
        self.noise_source = _NoiseSource()
        self.trunk, feat = _build_trunk(arch, 2 * arch.channels, self.noise_source)
        if arch.image_size == 128:
            self.head = _FcHead(feat * 4 * 4, arch.M, arch, self.noise_source, hidden=True)
        else:
            self.head = _ConvHead(feat, arch.M, arch, self.noise_source)

    def forward(self, pair: torch.Tensor) -> torch.Tensor:
        return self.head(self.trunk(pair))


@dataclass
class ModelBundle:
    """Generator, discriminator (with heads) and optional CR head plus their config."""

    generator: Generator
    discriminator: Discriminator
    cr_head: Optional[CRHead]
    arch: ArchitectureConfig

    # --- parameter groups used by the update routing -------------------------
    def generator_parameters(self) -> Iterator[nn.Parameter]:
        return self.generator.parameters()

    def trunk_parameters(self) -> Iterator[nn.Parameter]:
        return self.discriminator.trunk.parameters()

    def d_head_parameters(self) -> Iterator[nn.Parameter]:
        return self.discriminator.heads["d"].parameters()

    def c_head_parameters(self) -> Iterator[nn.Parameter]:
        return self.discriminator.heads["c"].parameters()

    def q_head_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.discriminator.heads["qz"].parameters()
        yield from self.discriminator.heads["qs"].parameters()

    def cr_parameters(self) -> Iterator[nn.Parameter]:
        if self.cr_head is None:
            return iter(())
        return self.cr_head.parameters()

    def modules(self) -> Iterator[nn.Module]:
        yield self.generator
        yield self.discriminator
        if self.cr_head is not None:
            yield self.cr_head

    def eval(self) -> "ModelBundle":
        for m in self.modules():
            m.eval()
        return self

    def double(self) -> "ModelBundle":
        for m in self.modules():
            m.double()
        return self


def _init_weights(module: nn.Module, gen: torch.Generator) -> None:
    # DCGAN-style init: N(0, 0.02) conv/deconv/linear weights, zero biases,
    # batch-norm scale 1 / offset 0. Attention gates stay at 0.
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            weight = getattr(m, "weight_orig", m.weight)
            with torch.no_grad():
                weight.copy_(torch.randn(weight.shape, generator=gen) * 0.02)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
    _settle_spectral_norm(module)


def _settle_spectral_norm(root: nn.Module, iters: int = 30) -> None:
    # the power-iteration vector stored at wrap time belongs to the pre-init
    # weights; iterate it against the fresh ones so the estimated top singular
    # value (and hence the normalized gain) is accurate from step zero
    for m in root.modules():
        if not hasattr(m, "weight_orig"):
            continue
        probe = (
            torch.zeros(1, m.in_channels, 8, 8)
            if isinstance(m, nn.Conv2d)
            else torch.zeros(1, m.in_features)
        )
        m.train()
        with torch.no_grad():
            for _ in range(iters):
                m(probe)
        m.eval()


def build_models(arch: ArchitectureConfig, seed: int = 0) -> ModelBundle:
    """Construct and deterministically initialize all networks for `arch`."""
    # spectral-norm wrappers draw their power-iteration vector from the global
    # RNG at construction time; pin it so rebuilds are bit-identical
    torch.manual_seed(seed)
    gen = Generator(arch)
    disc = Discriminator(arch)
    cr = CRHead(arch) if arch.cr_enabled else None
    init_gen = torch.Generator().manual_seed(seed)
    _init_weights(gen, init_gen)
    _init_weights(disc, init_gen)
    if cr is not None:
        _init_weights(cr, init_gen)
    bundle = ModelBundle(generator=gen, discriminator=disc, cr_head=cr, arch=arch)
    bundle.eval()
    return bundle


def _check_code_shapes(bundle: ModelBundle, z: torch.Tensor, s: torch.Tensor) -> None:
    arch = bundle.arch
    if z.ndim != 2 or z.shape[1] != arch.L:
        raise ValueError(f"z must be (batch, {arch.L}), got {tuple(z.shape)}")
    if s.ndim != 2 or s.shape[1] != arch.M:
        raise ValueError(f"s must be (batch, {arch.M}), got {tuple(s.shape)}")
    if z.shape[0] != s.shape[0]:
        raise ValueError("z and s must have the same batch size")


def _check_image_shapes(bundle: ModelBundle, images: torch.Tensor) -> None:
    arch = bundle.arch
    expect = (arch.channels, arch.image_size, arch.image_size)
    if images.ndim != 4 or tuple(images.shape[1:]) != expect:
        raise ValueError(f"images must be (batch, {expect[0]}, {expect[1]}, {expect[2]}), got {tuple(images.shape)}")


def generate(bundle: ModelBundle, z: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """Deterministic eval-mode image synthesis; output in [-1, 1], NCHW."""
    _check_code_shapes(bundle, z, s)
    bundle.generator.eval()
    with torch.no_grad():
        return bundle.generator(z, s)


def discriminate(
    bundle: ModelBundle,
    images: torch.Tensor,
    mode: str = "eval",
    rng: Optional[torch.Generator] = None,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Run the trunk and all four heads. mode='train' activates the layer noise
    (drawn from `rng` when given); mode='eval' is deterministic."""
    _check_image_shapes(bundle, images)
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    disc = bundle.discriminator
    disc.train(mode == "train")
    disc.noise_source.generator = rng
    try:
        if mode == "eval":
            with torch.no_grad():
                return disc(images)
        return disc(images)
    finally:
        disc.noise_source.generator = None


def cr_predict(
    bundle: ModelBundle,
    image_a: torch.Tensor,
    image_b: torch.Tensor,
    mode: str = "eval",
    rng: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Logits (batch, M) over the salient coordinate shared by the two images."""
    if bundle.cr_head is None:
        raise RuntimeError("this bundle was built without the contrastive-regularizer head")
    _check_image_shapes(bundle, image_a)
    _check_image_shapes(bundle, image_b)
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    head = bundle.cr_head
    head.train(mode == "train")
    head.noise_source.generator = rng
    try:
        pair = torch.cat([image_a, image_b], dim=1)
        if mode == "eval":
            with torch.no_grad():
                return head(pair)
        return head(pair)
    finally:
        head.noise_source.generator = None


# --- checkpoints -------------------------------------------------------------

METADATA_FILE = "metadata.json"
_BLOBS = {"generator": "generator.pt", "discriminator": "discriminator.pt", "cr_head": "cr_head.pt"}


def save_checkpoint(
    directory: str | os.PathLike,
    bundle: ModelBundle,
    step: int,
    seed: int,
    epoch: int = 0,
    extra_blobs: Optional[dict] = None,
) -> None:
    """Write one binary blob per network plus a JSON metadata file."""
    os.makedirs(directory, exist_ok=True)
    torch.save(bundle.generator.state_dict(), os.path.join(directory, _BLOBS["generator"]))
    torch.save(bundle.discriminator.state_dict(), os.path.join(directory, _BLOBS["discriminator"]))
    if bundle.cr_head is not None:
        torch.save(bundle.cr_head.state_dict(), os.path.join(directory, _BLOBS["cr_head"]))
    if extra_blobs:
        for name, payload in extra_blobs.items():
            torch.save(payload, os.path.join(directory, name))
    meta = {"architecture": bundle.arch.to_dict(), "step": step, "epoch": epoch, "seed": seed}
    with open(os.path.join(directory, METADATA_FILE), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def load_checkpoint(
    directory: str | os.PathLike, expected_arch: Optional[ArchitectureConfig] = None
) -> Tuple[ModelBundle, dict]:
    """Rebuild a bundle from a checkpoint directory. Raises on missing files or
    when the stored architecture contradicts `expected_arch`."""
    meta_path = os.path.join(directory, METADATA_FILE)
    if not os.path.isfile(meta_path):
        raise FileNotFoundError(f"no checkpoint metadata at {meta_path}")
    with open(meta_path) as f:
        meta = json.load(f)
    arch = ArchitectureConfig.from_dict(meta["architecture"])
    if expected_arch is not None and arch != expected_arch:
        raise ValueError(
            f"architecture mismatch: checkpoint holds {arch.to_dict()}, "
            f"caller expected {expected_arch.to_dict()}"
        )
    bundle = build_models(arch, seed=int(meta.get("seed", 0)))
    bundle.generator.load_state_dict(
        torch.load(os.path.join(directory, _BLOBS["generator"]), weights_only=True)
    )
    bundle.discriminator.load_state_dict(
        torch.load(os.path.join(directory, _BLOBS["discriminator"]), weights_only=True)
    )
    if bundle.cr_head is not None:
        cr_path = os.path.join(directory, _BLOBS["cr_head"])
        if not os.path.isfile(cr_path):
            raise FileNotFoundError(f"checkpoint is missing the CR head blob: {cr_path}")
        bundle.cr_head.load_state_dict(torch.load(cr_path, weights_only=True))
    bundle.eval()
    return bundle, meta
