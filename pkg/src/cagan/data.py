"""Dataset builders for the background/target image collections.

Four builders are provided: two composited benchmarks (CIFAR-10 with MNIST
digits overlaid, a 2x2 MNIST digit grid with a dSprites sprite on top), a
filtered CelebA accessories split, and a synthetic 32x32 micro dataset for
CI-scale training runs.

All builders are deterministic functions of (seed, split, source bytes).
Images are stored internally as uint8 and exposed as float32 in [-1, 1],
channel-last. Built datasets can be cached to a directory holding the raw
pixel blob, a TSV index keyed by sample id, and a JSON manifest.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import os
import pickle
import struct
import tarfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from .latent import BACKGROUND, TARGET

DSPRITES_FACTOR_NAMES = ("shape", "scale", "pos_x", "pos_y", "orientation")

MICRO_IMAGE_SIZE = 32
MICRO_SQUARE = 8
MICRO_SQUARE_VALUE = 0.95
MICRO_NOISE_AMPLITUDE = 0.3
MICRO_BRIGHTNESS_THRESHOLD = 0.6

CELEBA_TRAIN_BACKGROUND = 10_000
CELEBA_TRAIN_PER_CLASS = 5_000
CELEBA_TEST_PER_CLASS = 5_000
CELEBA_CROP = 140

CIFAR_MNIST_TRAIN_PER_DOMAIN = 25_000
CIFAR_MNIST_TEST_PER_DIGIT = 1_000


class IngestionError(RuntimeError):
    """Raised when a source archive is missing, malformed or fails its checksum."""


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest_source(path: str | os.PathLike) -> str:
    """Digest of a source file, or of a directory's (name, digest) listing."""
    if os.path.isdir(path):
        h = hashlib.sha256()
        for fp in sorted(Path(path).rglob("*")):
            if fp.is_file():
                h.update(f"{fp.relative_to(path)}:{sha256_file(fp)}\n".encode())
        return h.hexdigest()
    return sha256_file(path)


def _verify_sources(
    paths: Dict[str, str | os.PathLike], expected: Optional[Dict[str, str]]
) -> Dict[str, str]:
    """Check existence and (when expected digests are given) sha256 of sources.

    Returns the computed digests so builders can record them as provenance.
    """
    digests: Dict[str, str] = {}
    problems = []
    for name, path in paths.items():
        if not os.path.exists(path):
            problems.append(f"{name}: missing file {path}")
            continue
        digest = _digest_source(path)
        digests[name] = digest
        if expected and name in expected and expected[name] != digest:
            problems.append(f"{name}: checksum mismatch, expected {expected[name]}, got {digest}")
    if problems:
        raise IngestionError("source ingestion failed:\n  " + "\n  ".join(problems))
    return digests


# --- pixel conventions --------------------------------------------------------

def float_to_u8(images: np.ndarray) -> np.ndarray:
    """[-1, 1] floats to uint8."""
    return np.clip(np.rint((images + 1.0) * 127.5), 0, 255).astype(np.uint8)


def u8_to_float(images: np.ndarray) -> np.ndarray:
    """uint8 to float32 in [-1, 1]."""
    return images.astype(np.float32) / 127.5 - 1.0


def to_nchw_tensor(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, C) float array to an NCHW float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).float()


def to_nhwc_array(images: torch.Tensor) -> np.ndarray:
    """NCHW tensor back to a channel-last float32 array."""
    return images.detach().cpu().numpy().transpose(0, 2, 3, 1).astype(np.float32)


# --- container ----------------------------------------------------------------

@dataclass
class CaSample:
    """One labeled image: pixels in [-1, 1], domain flag, optional labels."""

    image: np.ndarray
    domain: str
    attribute: Optional[int]
    factors: Optional[np.ndarray]
    sample_id: str


class CaDataset:
    """Immutable columnar collection of CaSamples for one split."""

    def __init__(
        self,
        images_u8: np.ndarray,
        domains: np.ndarray,
        attributes: np.ndarray,
        factors: Optional[np.ndarray],
        ids: Sequence[str],
        split: str,
        provenance: dict,
    ):
        if images_u8.ndim != 4 or images_u8.dtype != np.uint8:
            raise ValueError("images must be a uint8 (N, H, W, C) array")
        n = images_u8.shape[0]
        if not (len(domains) == len(attributes) == len(ids) == n):
            raise ValueError("column lengths disagree with the image count")
        if factors is not None and len(factors) != n:
            raise ValueError("factors length disagrees with the image count")
        if len(set(ids)) != n:
            raise ValueError("sample ids must be unique")
        self.images_u8 = images_u8
        self.domains = domains.astype(np.uint8)          # 0 background, 1 target
        self.attributes = attributes.astype(np.int16)    # -1 means absent
        self.factors = None if factors is None else factors.astype(np.float32)
        self.ids = list(ids)
        self.split = split
        self.provenance = dict(provenance)

    def __len__(self) -> int:
        return self.images_u8.shape[0]

    def __getitem__(self, i: int) -> CaSample:
        att = int(self.attributes[i])
        return CaSample(
            image=u8_to_float(self.images_u8[i]),
            domain=TARGET if self.domains[i] else BACKGROUND,
            attribute=None if att < 0 else att,
            factors=None if self.factors is None else self.factors[i].copy(),
            sample_id=self.ids[i],
        )

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images_u8.shape[1:])  # type: ignore[return-value]

    def domain_indices(self, domain: str) -> np.ndarray:
        want = 1 if domain == TARGET else 0
        return np.nonzero(self.domains == want)[0]

    @property
    def n_background(self) -> int:
        return int((self.domains == 0).sum())

    @property
    def n_target(self) -> int:
        return int((self.domains == 1).sum())

    def images_float(self, indices: Optional[np.ndarray] = None) -> np.ndarray:
        block = self.images_u8 if indices is None else self.images_u8[indices]
        return u8_to_float(block)

    # --- cache ------------------------------------------------------------

    def _index_text(self) -> str:
        lines = ["sample_id\tdomain\tattribute\tfactors"]
        for i, sid in enumerate(self.ids):
            fac = ""
            if self.factors is not None:
                fac = ",".join(f"{v:.8g}" for v in self.factors[i])
            lines.append(f"{sid}\t{int(self.domains[i])}\t{int(self.attributes[i])}\t{fac}")
        return "\n".join(lines) + "\n"

    def index_checksum(self) -> str:
        return hashlib.sha256(self._index_text().encode()).hexdigest()

    def save(self, directory: str | os.PathLike) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.save(directory / "data.npy", self.images_u8)
        (directory / "index.tsv").write_text(self._index_text())
        manifest = {
            "split": self.split,
            "provenance": self.provenance,
            "count": len(self),
            "n_background": self.n_background,
            "n_target": self.n_target,
            "image_shape": list(self.image_shape),
            "index_sha256": self.index_checksum(),
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "CaDataset":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        images = np.load(directory / "data.npy")
        ids, domains, attributes, factors = [], [], [], []
        lines = (directory / "index.tsv").read_text().splitlines()
        for line in lines[1:]:
            sid, dom, att, fac = line.split("\t")
            ids.append(sid)
            domains.append(int(dom))
            attributes.append(int(att))
            factors.append([float(v) for v in fac.split(",")] if fac else None)
        width = next((len(f) for f in factors if f is not None), 0)
        fac_arr = (
            np.array([f if f is not None else [0.0] * width for f in factors], dtype=np.float32)
            if width
            else None
        )
        ds = cls(
            images_u8=images,
            domains=np.array(domains),
            attributes=np.array(attributes),
            factors=fac_arr,
            ids=ids,
            split=manifest["split"],
            provenance=manifest["provenance"],
        )
        if len(ds) != manifest["count"]:
            raise IngestionError(
                f"cache corrupt: manifest declares {manifest['count']} samples, found {len(ds)}"
            )
        return ds


# --- source readers -------------------------------------------------------------

def _read_maybe_gzip(path: str | os.PathLike) -> bytes:
    with open(path, "rb") as f:
        head = f.read(2)
        f.seek(0)
        if head == b"\x1f\x8b":
            return gzip.decompress(f.read())
        return f.read()


def read_mnist_images(path: str | os.PathLike) -> np.ndarray:
    """Parse an idx3-ubyte image file (optionally gzipped) to (N, 28, 28) uint8."""
    raw = _read_maybe_gzip(path)
    magic, count, rows, cols = struct.unpack(">iiii", raw[:16])
    if magic != 2051:
        raise IngestionError(f"{path}: bad idx image magic {magic}")
    data = np.frombuffer(raw, dtype=np.uint8, offset=16)
    if data.size != count * rows * cols:
        raise IngestionError(f"{path}: truncated idx image file")
    return data.reshape(count, rows, cols)


def read_mnist_labels(path: str | os.PathLike) -> np.ndarray:
    raw = _read_maybe_gzip(path)
    magic, count = struct.unpack(">ii", raw[:8])
    if magic != 2049:
        raise IngestionError(f"{path}: bad idx label magic {magic}")
    data = np.frombuffer(raw, dtype=np.uint8, offset=8)
    if data.size != count:
        raise IngestionError(f"{path}: truncated idx label file")
    return data


_CIFAR_TRAIN_BATCHES = [f"data_batch_{i}" for i in range(1, 6)]


def _cifar_batch_arrays(payload: bytes) -> Tuple[np.ndarray, np.ndarray]:
    d = pickle.loads(payload, encoding="bytes")
    data = np.asarray(d[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    labels = np.asarray(d[b"labels"], dtype=np.int16)
    return data, labels


def load_cifar10(path: str | os.PathLike, split: str) -> Tuple[np.ndarray, np.ndarray]:
    """Load the python-pickle CIFAR-10 distribution from a batches directory or
    the tar.gz archive. Returns ((N, 32, 32, 3) uint8, (N,) int16 labels)."""
    names = _CIFAR_TRAIN_BATCHES if split == "train" else ["test_batch"]
    blocks = []
    if os.path.isdir(path):
        for name in names:
            fp = Path(path) / name
            if not fp.is_file():
                raise IngestionError(f"CIFAR-10 batch missing: {fp}")
            blocks.append(_cifar_batch_arrays(fp.read_bytes()))
    else:
        try:
            with tarfile.open(path, "r:*") as tar:
                members = {os.path.basename(m.name): m for m in tar.getmembers() if m.isfile()}
                for name in names:
                    if name not in members:
                        raise IngestionError(f"CIFAR-10 batch missing from archive: {name}")
                    blocks.append(_cifar_batch_arrays(tar.extractfile(members[name]).read()))
        except tarfile.TarError as e:
            raise IngestionError(f"cannot read CIFAR-10 archive {path}: {e}") from e
    images = np.concatenate([b[0] for b in blocks])
    labels = np.concatenate([b[1] for b in blocks])
    return images, labels


def load_dsprites(path: str | os.PathLike) -> Tuple[np.ndarray, np.ndarray]:
    """Load the sprites archive: binary (N, 64, 64) masks and the 5 generative
    factors per sprite ordered (shape, scale, pos_x, pos_y, orientation)."""
    try:
        with np.load(path, allow_pickle=False) as z:
            imgs = np.asarray(z["imgs"], dtype=np.uint8)
            latents = np.asarray(z["latents_values"], dtype=np.float32)
    except Exception as e:
        raise IngestionError(f"cannot read sprites archive {path}: {e}") from e
    if latents.shape[1] != 6:
        raise IngestionError(f"sprites archive {path}: expected 6 latent columns")
    # source order is (color, shape, scale, orientation, pos_x, pos_y)
    factors = latents[:, [1, 2, 4, 5, 3]]
    return imgs, factors


def _read_celeba_attributes(attr_path: str | os.PathLike) -> list:
    """Parse the attribute list into (image_name, has_glasses, has_hat) rows."""
    lines = Path(attr_path).read_text().splitlines()
    if len(lines) < 3:
        raise IngestionError(f"attribute file too short: {attr_path}")
    names = lines[1].split()
    try:
        i_glasses = names.index("Eyeglasses")
        i_hat = names.index("Wearing_Hat")
    except ValueError as e:
        raise IngestionError(f"{attr_path}: missing Eyeglasses/Wearing_Hat columns") from e
    rows = []
    for line in lines[2:]:
        parts = line.split()
        if len(parts) != len(names) + 1:
            continue
        rows.append((parts[0], parts[1 + i_glasses] == "1", parts[1 + i_hat] == "1"))
    return rows


# --- compositing helpers --------------------------------------------------------

def _resize_u8(image: np.ndarray, size: int) -> np.ndarray:
    return np.asarray(Image.fromarray(image).resize((size, size), Image.BILINEAR))


def _overlay_digit(canvas: np.ndarray, digit: np.ndarray, top: int, left: int) -> None:
    """Alpha-blend a white digit onto a uint8 canvas in place."""
    h, w = digit.shape
    alpha = digit.astype(np.float32) / 255.0
    if canvas.ndim == 3:
        alpha = alpha[..., None]
    region = canvas[top : top + h, left : left + w].astype(np.float32)
    blended = (1.0 - alpha) * region + alpha * 255.0
    canvas[top : top + h, left : left + w] = np.rint(blended).astype(np.uint8)


# --- builders --------------------------------------------------------------------

def build_cifar_mnist(
    seed: int,
    split: str,
    cifar_path: str | os.PathLike,
    mnist_images_path: str | os.PathLike,
    mnist_labels_path: str | os.PathLike,
    expected_checksums: Optional[Dict[str, str]] = None,
) -> CaDataset:
    """Background: plain CIFAR-10 resized to 64x64. Target: the same with one
    MNIST digit (scaled to 32x32) alpha-blended at a random position.

    Train: 25k background + 25k target. Test: 10k target, exactly 1000 per
    digit class; the digit class is the sample attribute.
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    digests = _verify_sources(
        {
            "cifar": cifar_path,
            "mnist_images": mnist_images_path,
            "mnist_labels": mnist_labels_path,
        },
        expected_checksums,
    )
    rng = np.random.default_rng(seed if split == "train" else seed + 1)
    cifar_images, _ = load_cifar10(cifar_path, split)
    digits = read_mnist_images(mnist_images_path)
    digit_labels = read_mnist_labels(mnist_labels_path)
    by_class = [np.nonzero(digit_labels == c)[0] for c in range(10)]
    for c, idx in enumerate(by_class):
        if idx.size == 0:
            raise IngestionError(f"MNIST source has no instances of digit {c}")

    def make_target(base64: np.ndarray, digit_idx: int) -> np.ndarray:
        digit = _resize_u8(digits[digit_idx], 32)
        top = int(rng.integers(0, 64 - 32 + 1))
        left = int(rng.integers(0, 64 - 32 + 1))
        out = base64.copy()
        _overlay_digit(out, digit, top, left)
        return out

    images, domains, attributes, ids = [], [], [], []
    if split == "train":
        if cifar_images.shape[0] < 2 * CIFAR_MNIST_TRAIN_PER_DOMAIN:
            raise IngestionError(
                f"CIFAR train source has {cifar_images.shape[0]} images, "
                f"need {2 * CIFAR_MNIST_TRAIN_PER_DOMAIN}"
            )
        order = rng.permutation(cifar_images.shape[0])
        bg_idx = order[:CIFAR_MNIST_TRAIN_PER_DOMAIN]
        tg_idx = order[CIFAR_MNIST_TRAIN_PER_DOMAIN : 2 * CIFAR_MNIST_TRAIN_PER_DOMAIN]
        for i in bg_idx:
            images.append(_resize_u8(cifar_images[i], 64))
            domains.append(0)
            attributes.append(-1)
            ids.append(f"train-bg-{i:05d}")
        for i in tg_idx:
            base = _resize_u8(cifar_images[i], 64)
            cls = int(rng.integers(0, 10))
            inst = int(rng.choice(by_class[cls]))
            images.append(make_target(base, inst))
            domains.append(1)
            attributes.append(cls)
            ids.append(f"train-tg-{i:05d}")
    else:
        n_test = 10 * CIFAR_MNIST_TEST_PER_DIGIT
        if cifar_images.shape[0] < n_test:
            raise IngestionError(
                f"CIFAR test source has {cifar_images.shape[0]} images, need {n_test}"
            )
        classes = np.repeat(np.arange(10), CIFAR_MNIST_TEST_PER_DIGIT)
        rng.shuffle(classes)
        for i in range(n_test):
            base = _resize_u8(cifar_images[i], 64)
            cls = int(classes[i])
            inst = int(rng.choice(by_class[cls]))
            images.append(make_target(base, inst))
            domains.append(1)
            attributes.append(cls)
            ids.append(f"test-tg-{i:05d}")

    return CaDataset(
        images_u8=np.stack(images),
        domains=np.array(domains),
        attributes=np.array(attributes),
        factors=None,
        ids=ids,
        split=split,
        provenance={"builder": "cifar_mnist", "seed": seed, "source_checksums": digests},
    )


_DSPRITES_GRID_DIGITS = (1, 2, 3, 4)
_DSPRITES_GRID_OFFSETS = ((2, 2), (2, 34), (34, 2), (34, 34))


def build_dsprites_mnist(
    seed: int,
    split: str,
    mnist_images_path: str | os.PathLike,
    mnist_labels_path: str | os.PathLike,
    dsprites_path: str | os.PathLike,
    n_train: int = 50_000,
    n_test: int = 10_000,
    expected_checksums: Optional[Dict[str, str]] = None,
) -> CaDataset:
    """Background: a fixed 2x2 grid of the digits 1-4 (instances resampled per
    image). Target: the same grid with one sprite composited opaquely on top;
    the sprite's 5 generative factors label the sample.
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    digests = _verify_sources(
        {
            "mnist_images": mnist_images_path,
            "mnist_labels": mnist_labels_path,
            "dsprites": dsprites_path,
        },
        expected_checksums,
    )
    rng = np.random.default_rng(seed if split == "train" else seed + 1)
    digits = read_mnist_images(mnist_images_path)
    digit_labels = read_mnist_labels(mnist_labels_path)
    by_class = {c: np.nonzero(digit_labels == c)[0] for c in _DSPRITES_GRID_DIGITS}
    for c, idx in by_class.items():
        if idx.size == 0:
            raise IngestionError(f"MNIST source has no instances of digit {c}")
    sprites, sprite_factors = load_dsprites(dsprites_path)

    def make_background() -> np.ndarray:
        canvas = np.zeros((64, 64), dtype=np.uint8)
        for digit, (top, left) in zip(_DSPRITES_GRID_DIGITS, _DSPRITES_GRID_OFFSETS):
            inst = int(rng.choice(by_class[digit]))
            _overlay_digit(canvas, digits[inst], top, left)
        return canvas

    total = n_train if split == "train" else n_test
    n_bg = total // 2
    images, domains, attributes, factors, ids = [], [], [], [], []
    for i in range(n_bg):
        images.append(make_background())
        domains.append(0)
        attributes.append(-1)
        factors.append(np.zeros(5, dtype=np.float32))
        ids.append(f"{split}-bg-{i:06d}")
    for i in range(total - n_bg):
        canvas = make_background()
        sp = int(rng.integers(0, sprites.shape[0]))
        # opaque union: sprite pixels overwrite whatever the digits drew
        canvas = np.maximum(canvas, sprites[sp] * np.uint8(255))
        images.append(canvas)
        domains.append(1)
        attributes.append(-1)
        factors.append(sprite_factors[sp])
        ids.append(f"{split}-tg-{i:06d}")

    return CaDataset(
        images_u8=np.stack(images)[..., None],
        domains=np.array(domains),
        attributes=np.array(attributes),
        factors=np.stack(factors),
        ids=ids,
        split=split,
        provenance={"builder": "dsprites_mnist", "seed": seed, "source_checksums": digests},
    )


def load_celeba_accessories(
    root_path: str | os.PathLike,
    split: str,
    expected_checksums: Optional[Dict[str, str]] = None,
) -> CaDataset:
    """Filter CelebA into faces without accessories (background) vs faces with
    glasses or a hat (target, attribute 0=glasses / 1=hat).

    Selection is by ascending image id: train takes the first 10k background,
    5k glasses and 5k hat; test takes the next 5k glasses and 5k hat.
    Faces wearing both accessories are ambiguous and excluded.
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    root = Path(root_path)
    attr_path = root / "list_attr_celeba.txt"
    img_dir = root / "img_align_celeba"
    if not attr_path.is_file() or not img_dir.is_dir():
        raise IngestionError(
            f"CelebA root {root} must contain list_attr_celeba.txt and img_align_celeba/"
        )
    digests = _verify_sources({"list_attr_celeba.txt": attr_path}, expected_checksums)

    rows = sorted(_read_celeba_attributes(attr_path))
    background = [r[0] for r in rows if not r[1] and not r[2]]
    glasses = [r[0] for r in rows if r[1] and not r[2]]
    hats = [r[0] for r in rows if r[2] and not r[1]]

    need = {
        "background": CELEBA_TRAIN_BACKGROUND if split == "train" else 0,
        "glasses": CELEBA_TRAIN_PER_CLASS + CELEBA_TEST_PER_CLASS,
        "hat": CELEBA_TRAIN_PER_CLASS + CELEBA_TEST_PER_CLASS,
    }
    pools = {"background": background, "glasses": glasses, "hat": hats}
    shortfalls = [
        f"{k}: have {len(pools[k])}, need {v}" for k, v in need.items() if len(pools[k]) < v
    ]
    if shortfalls:
        raise IngestionError("insufficient CelebA images after filtering:\n  " + "\n  ".join(shortfalls))

    if split == "train":
        selection = (
            [(name, 0, -1) for name in background[:CELEBA_TRAIN_BACKGROUND]]
            + [(name, 1, 0) for name in glasses[:CELEBA_TRAIN_PER_CLASS]]
            + [(name, 1, 1) for name in hats[:CELEBA_TRAIN_PER_CLASS]]
        )
    else:
        g0, h0 = CELEBA_TRAIN_PER_CLASS, CELEBA_TRAIN_PER_CLASS
        selection = [(name, 1, 0) for name in glasses[g0 : g0 + CELEBA_TEST_PER_CLASS]] + [
            (name, 1, 1) for name in hats[h0 : h0 + CELEBA_TEST_PER_CLASS]
        ]

    images, domains, attributes, ids = [], [], [], []
    for name, dom, att in selection:
        fp = img_dir / name
        if not fp.is_file():
            raise IngestionError(f"CelebA image listed but missing on disk: {fp}")
        with Image.open(fp) as im:
            im = im.convert("RGB")
            w, h = im.size
            left = (w - CELEBA_CROP) // 2
            top = (h - CELEBA_CROP) // 2
            im = im.crop((left, top, left + CELEBA_CROP, top + CELEBA_CROP))
            im = im.resize((64, 64), Image.BILINEAR)
            images.append(np.asarray(im, dtype=np.uint8))
        domains.append(dom)
        attributes.append(att)
        ids.append(Path(name).stem)

    return CaDataset(
        images_u8=np.stack(images),
        domains=np.array(domains),
        attributes=np.array(attributes),
        factors=None,
        ids=ids,
        split=split,
        provenance={"builder": "celeba_accessories", "source_checksums": digests},
    )


def build_micro_ca(
    seed: int, n_train: int = 4096, n_test: int = 1024
) -> Tuple[CaDataset, CaDataset]:
    """Synthetic CI-scale dataset: 32x32x1 low-amplitude noise canvases, target
    samples additionally carry a bright 8x8 square whose quadrant (0..3,
    uniform) is the attribute. Returns (train, test) with exactly the
    requested counts, each balanced between domains.
    """
    return (
        build_micro_ca_split(seed, "train", n_train),
        build_micro_ca_split(seed, "test", n_test),
    )


def build_micro_ca_split(seed: int, split: str, count: int) -> CaDataset:
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    if count < 2:
        raise ValueError("count must be >= 2 (one sample per domain)")
    rng = np.random.default_rng(seed if split == "train" else seed + 1)
    size, sq = MICRO_IMAGE_SIZE, MICRO_SQUARE
    half = size // 2
    n_bg = count // 2
    n_tg = count - n_bg

    def canvas() -> np.ndarray:
        return rng.uniform(-MICRO_NOISE_AMPLITUDE, MICRO_NOISE_AMPLITUDE, (size, size)).astype(
            np.float32
        )

    images, domains, attributes, ids = [], [], [], []
    for i in range(n_bg):
        images.append(canvas())
        domains.append(0)
        attributes.append(-1)
        ids.append(f"{split}-bg-{i:06d}")
    quadrant_origin = {0: (0, 0), 1: (0, half), 2: (half, 0), 3: (half, half)}
    for i in range(n_tg):
        img = canvas()
        quadrant = int(rng.integers(0, 4))
        oy, ox = quadrant_origin[quadrant]
        top = oy + int(rng.integers(0, half - sq + 1))
        left = ox + int(rng.integers(0, half - sq + 1))
        img[top : top + sq, left : left + sq] = MICRO_SQUARE_VALUE
        images.append(img)
        domains.append(1)
        attributes.append(quadrant)
        ids.append(f"{split}-tg-{i:06d}")

    return CaDataset(
        images_u8=float_to_u8(np.stack(images)[..., None]),
        domains=np.array(domains),
        attributes=np.array(attributes),
        factors=None,
        ids=ids,
        split=split,
        provenance={"builder": "micro_ca", "seed": seed},
    )
