"""Multi-domain datasets: ColoredMNIST-style environments and a two-feature toy.

Digits come either from MNIST IDX files or from :func:`procedural_digits`, a
stroke-based surrogate that needs no download.  Every generator is a pure
function of ``(seed, domain_id)``.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

RDMD_MAGIC = b"RDMD"
RDMD_VERSION = 1
_RDMD_HEADER = struct.Struct("<4sIIII")


class IDXError(ValueError):
    pass


class WrongMagicError(IDXError):
    pass


class TruncatedIDXError(IDXError):
    pass


class CountMismatchError(IDXError):
    pass


class ContainerError(ValueError):
    pass


@dataclass(frozen=True)
class EnvironmentSpec:
    agreement: float
    label_noise: float = 0.25
    n: int | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("agreement", "label_noise"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.n is not None and self.n < 1:
            raise ValueError(f"sample count must be >= 1, got {self.n}")


@dataclass
class DigitSet:
    images: np.ndarray  # (n, 28, 28) in [0, 1]
    labels: np.ndarray  # (n,) digits 0-9

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "DigitSet":
        return DigitSet(self.images[index], self.labels[index])


@dataclass
class DomainDataset:
    domain_id: int
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int = 2
    agreement: float | None = None
    label_noise: float | None = None
    name: str = ""

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels):
            raise ValueError(
                f"inputs {self.inputs.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) < 1:
            raise ValueError("a domain needs at least one sample")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if np.isnan(self.inputs).any():
            raise ValueError("inputs contain NaN")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, index, name: str | None = None) -> "DomainDataset":
        return replace(self, inputs=self.inputs[index], labels=self.labels[index],
                       name=self.name if name is None else name)


@dataclass
class DomainBatch:
    domain_id: int
    inputs: np.ndarray
    labels: np.ndarray
    indices: np.ndarray = field(repr=False, default=None)

    def __len__(self) -> int:
        return len(self.labels)


# --- IDX ------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw: bytes, magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedIDXError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise WrongMagicError(f"{path}: wrong magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = found & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedIDXError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise TruncatedIDXError(f"{path}: expected {size} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> DigitSet:
    """Read an MNIST image/label IDX pair (optionally gzipped)."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if len(images) != len(labels):
        raise CountMismatchError(
            f"count mismatch: {len(images)} images vs {len(labels)} labels")
    return DigitSet(images.astype(np.float64) / 255.0, labels.astype(np.int64))


def write_idx(images_path, labels_path, digits: DigitSet) -> None:
    """Write a DigitSet back out as IDX (used by tests and fixtures)."""
    imgs = np.clip(np.rint(digits.images * 255), 0, 255).astype(np.uint8)
    n, h, w = imgs.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + imgs.tobytes())
    Path(labels_path).write_bytes(
        struct.pack(">II", IDX_LABELS_MAGIC, n) + digits.labels.astype(np.uint8).tobytes())


# --- procedural digits ----------------------------------------------------

# Seven-segment style layout on the unit square (x right, y down).
_P = {
    "tl": (0.32, 0.22), "tr": (0.68, 0.22),
    "ml": (0.32, 0.50), "mr": (0.68, 0.50),
    "bl": (0.32, 0.78), "br": (0.68, 0.78),
    "tc": (0.52, 0.20), "bc": (0.46, 0.80),
}
_SEG = {
    "a": ("tl", "tr"), "b": ("tr", "mr"), "c": ("mr", "br"), "d": ("bl", "br"),
    "e": ("ml", "bl"), "f": ("tl", "ml"), "g": ("ml", "mr"),
    "i": ("tc", "bc"), "z": ("tr", "bc"),
}
_DIGIT_SEGMENTS = {
    0: "abcdef", 1: "i", 2: "abged", 3: "abgcd", 4: "fgbc",
    5: "afgcd", 6: "afgedc", 7: "az", 8: "abcdefg", 9: "abcdfg",
}


def _render(strokes: np.ndarray, thickness: np.ndarray, size: int = 28) -> np.ndarray:
    """Rasterise line segments; strokes is (B, S, 2, 2) in pixel coordinates."""
    yy, xx = np.mgrid[0:size, 0:size]
    grid = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float64) + 0.5
    p0 = strokes[:, :, None, 0, :]
    d = strokes[:, :, None, 1, :] - p0
    rel = grid[None, None] - p0
    t = np.clip((rel * d).sum(-1) / np.maximum((d * d).sum(-1), 1e-9), 0.0, 1.0)
    dist = np.linalg.norm(rel - t[..., None] * d, axis=-1).min(axis=1)
    img = np.clip(1.0 - (dist - thickness[:, None]) / 1.2, 0.0, 1.0)
    return img.reshape(-1, size, size)


def procedural_digits(n: int, seed: int = 0, size: int = 28) -> DigitSet:
    """Stroke-drawn digits 0-9 with random jitter, affine warp and blur."""
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng([seed, 0xD161])
    labels = rng.integers(0, 10, size=n)
    images = np.zeros((n, size, size))
    for digit, segs in _DIGIT_SEGMENTS.items():
        idx = np.flatnonzero(labels == digit)
        if idx.size == 0:
            continue
        b = idx.size
        base = np.array([[_P[a], _P[z]] for a, z in (_SEG[s] for s in segs)])  # (S, 2, 2)
        pts = base[None] + rng.normal(0.0, 0.035, size=(b,) + base.shape)
        angle = rng.uniform(-0.25, 0.25, size=b)
        scale = rng.uniform(0.85, 1.15, size=(b, 2))
        shear = rng.uniform(-0.2, 0.2, size=b)
        cos, sin = np.cos(angle), np.sin(angle)
        mat = np.stack([np.stack([cos, -sin + shear], -1), np.stack([sin, cos], -1)], -2)
        mat = mat * scale[:, None, :]
        centred = pts - 0.5
        warped = np.einsum("bij,bsej->bsei", mat, centred) + 0.5
        shift = rng.uniform(-0.07, 0.07, size=(b, 1, 1, 2))
        strokes = (warped + shift) * size
        thickness = rng.uniform(0.8, 2.0, size=b)
        imgs = np.concatenate([_render(strokes[i:i + 512], thickness[i:i + 512], size)
                               for i in range(0, b, 512)])
        imgs = gaussian_filter(imgs, sigma=(0, 0.6, 0.6))
        imgs += rng.normal(0.0, 0.05, size=imgs.shape)
        images[idx] = np.clip(imgs, 0.0, 1.0)
    return DigitSet(images, labels.astype(np.int64))


# --- environments ---------------------------------------------------------


def _env_rng(spec: EnvironmentSpec, domain_id: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, domain_id])


def downsample(images: np.ndarray) -> np.ndarray:
    """2x average pooling of (n, H, W) images."""
    n, h, w = images.shape
    return images[:, : h - h % 2, : w - w % 2].reshape(n, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def make_colored_env(digits: DigitSet, spec: EnvironmentSpec, domain_id: int = 0,
                     name: str = "") -> DomainDataset:
    """Binary colored-digit environment.

    Label is ``digit >= 5``, flipped with probability ``label_noise``; the
    digit is drawn into channel ``color`` (0 = red, 1 = green), where color
    equals the final label with probability ``agreement``.  Output features
    are the two 14x14 planes flattened (392 values).
    """
    if len(digits) == 0:
        raise ValueError("make_colored_env: no digits")
    rng = _env_rng(spec, domain_id)
    n = len(digits) if spec.n is None else spec.n
    if n == len(digits):
        idx = np.arange(n)
    else:
        idx = rng.choice(len(digits), size=n, replace=n > len(digits))
    chosen = digits.subset(idx)
    labels = (chosen.labels >= 5).astype(np.int64)
    labels ^= (rng.random(n) < spec.label_noise).astype(np.int64)
    colors = labels ^ (rng.random(n) >= spec.agreement).astype(np.int64)
    small = downsample(chosen.images)
    x = np.zeros((n, 2) + small.shape[1:])
    x[np.arange(n), colors] = small
    return DomainDataset(domain_id, x.reshape(n, -1), labels, 2,
                         spec.agreement, spec.label_noise, name or f"env{domain_id}")


def make_two_feature_env(spec: EnvironmentSpec, domain_id: int = 0,
                         name: str = "") -> DomainDataset:
    """Two ±1 features: one agrees with the label 75% of the time everywhere,
    the other with probability ``spec.agreement``.  ``label_noise`` is unused.
    """
    rng = _env_rng(spec, domain_id)
    n = 1000 if spec.n is None else spec.n
    labels = rng.integers(0, 2, size=n)
    sign = 2.0 * labels - 1.0
    invariant = np.where(rng.random(n) < 0.75, sign, -sign)
    spurious = np.where(rng.random(n) < spec.agreement, sign, -sign)
    x = np.stack([invariant, spurious], axis=1) + rng.uniform(-0.1, 0.1, size=(n, 2))
    return DomainDataset(domain_id, x, labels, 2, spec.agreement, spec.label_noise,
                         name or f"env{domain_id}")


def split_dataset(ds: DomainDataset, val_fraction: float, seed: int = 0):
    """Deterministic (train, val) split of one domain."""
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must be in [0, 1)")
    n_val = int(round(len(ds) * val_fraction))
    if n_val == 0:
        return ds, None
    perm = np.random.default_rng([seed, ds.domain_id, 0x5A1]).permutation(len(ds))
    val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    return ds.subset(train_idx, ds.name + ":train"), ds.subset(val_idx, ds.name + ":val")


def sample_domain_batches(datasets: Sequence[DomainDataset], batch_size: int,
                          rng: np.random.Generator, replace: bool = True) -> list[DomainBatch]:
    """One equally sized batch per domain, in domain order."""
    batches = []
    for ds in datasets:
        if len(ds) == 0:
            raise ValueError(f"domain {ds.domain_id} is empty")
        if not replace and batch_size > len(ds):
            raise ValueError(
                f"batch size {batch_size} exceeds domain {ds.domain_id} size {len(ds)}")
        if replace:
            idx = rng.integers(0, len(ds), size=batch_size)
        else:
            idx = rng.permutation(len(ds))[:batch_size]
        batches.append(DomainBatch(ds.domain_id, ds.inputs[idx], ds.labels[idx], idx))
    return batches


# --- RDMD container -------------------------------------------------------


def write_rdmd(path, ds: DomainDataset) -> None:
    n, d = ds.inputs.shape
    with open(path, "wb") as f:
        f.write(_RDMD_HEADER.pack(RDMD_MAGIC, RDMD_VERSION, n, d, ds.num_classes))
        f.write(ds.inputs.astype("<f8").tobytes())
        f.write(ds.labels.astype("<u4").tobytes())


def read_rdmd(path, domain_id: int = 0, name: str = "") -> DomainDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _RDMD_HEADER.size:
        raise ContainerError(f"{path}: truncated header")
    magic, version, n, d, c = _RDMD_HEADER.unpack_from(raw)
    if magic != RDMD_MAGIC:
        raise ContainerError(f"{path}: wrong magic {magic!r}")
    if version != RDMD_VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    expected = _RDMD_HEADER.size + 8 * n * d + 4 * n
    if len(raw) != expected:
        raise ContainerError(f"{path}: expected {expected} bytes, found {len(raw)}")
    off = _RDMD_HEADER.size
    x = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off).reshape(n, d)
    y = np.frombuffer(raw, dtype="<u4", count=n, offset=off + 8 * n * d)
    return DomainDataset(domain_id, x.astype(np.float64), y.astype(np.int64), c,
                         name=name or Path(path).stem)
