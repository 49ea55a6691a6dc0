"""Two-domain datasets: synthetic factorized vectors and PGM (P5) image folders."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class PGMError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticFactorizedSpec:
    """Shared content block followed by one style block per domain.

    Domain A rows are ``[c, s_A, 0]`` and domain B rows ``[c, 0, s_B]``.
    """

    content_dim: int = 2
    style_dim: int = 1
    content_bounds: tuple[float, float] = (-1.0, 1.0)
    style_bounds_a: tuple[float, float] = (-1.0, 1.0)
    style_bounds_b: tuple[float, float] = (-1.0, 1.0)
    n_samples: int = 10_000
    seed: int = 0

    @property
    def dim(self) -> int:
        return self.content_dim + 2 * self.style_dim

    def content_index(self) -> np.ndarray:
        return np.arange(self.content_dim)

    def style_index(self, domain: str) -> np.ndarray:
        start = self.content_dim + (0 if domain == "A" else self.style_dim)
        return np.arange(start, start + self.style_dim)

    def compose(self, domain: str, content: np.ndarray, style: np.ndarray) -> np.ndarray:
        """Assemble domain rows from factor arrays."""
        n = content.shape[0]
        x = np.zeros((n, self.dim))
        x[:, : self.content_dim] = content
        x[:, self.style_index(domain)] = style
        return x

    def sample_style(self, domain: str, n: int, rng: np.random.Generator) -> np.ndarray:
        lo, hi = self.style_bounds_a if domain == "A" else self.style_bounds_b
        return rng.uniform(lo, hi, size=(n, self.style_dim))


@dataclass(frozen=True)
class Dataset:
    domain: str
    samples: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        x = self.samples
        if x.ndim != 2:
            raise ValueError(f"samples must be 2-d, got shape {x.shape}")
        if not np.isfinite(x).all() or x.min(initial=0.0) < -1.0 or x.max(initial=0.0) > 1.0:
            raise ValueError("samples must be finite and inside [-1, 1]")
        for k, v in self.metadata.items():
            if isinstance(v, np.ndarray) and v.shape[0] != x.shape[0]:
                raise ValueError(f"metadata {k!r} has {v.shape[0]} rows for {x.shape[0]} samples")
        x.setflags(write=False)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


def generate_synthetic(spec: SyntheticFactorizedSpec) -> tuple[Dataset, Dataset]:
    if spec.content_dim < 1 or spec.style_dim < 0 or spec.n_samples < 1:
        raise ValueError(f"invalid synthetic dims: {spec}")
    for lo, hi in (spec.content_bounds, spec.style_bounds_a, spec.style_bounds_b):
        if not -1.0 <= lo <= hi <= 1.0:
            raise ValueError(f"bounds ({lo}, {hi}) must lie inside [-1, 1]")
    rng = np.random.default_rng(spec.seed)
    out = []
    for domain in ("A", "B"):
        content = rng.uniform(*spec.content_bounds, size=(spec.n_samples, spec.content_dim))
        style = spec.sample_style(domain, spec.n_samples, rng)
        meta = {"content": content, "style": style, "spec": spec}
        out.append(Dataset(domain, spec.compose(domain, content, style), meta))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# PGM

def _read_header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    i = 0
    n = len(buf)
    while len(tokens) < count:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i < n and buf[i:i + 1] == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not buf[i:i + 1].isspace() and buf[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise PGMError("truncated header")
        tokens.append(buf[start:i])
    # exactly one whitespace byte separates the header from the raster
    if i >= n or not buf[i:i + 1].isspace():
        raise PGMError("missing whitespace after header")
    return tokens, i + 1


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary (P5) PGM with maxval 255 as a uint8 array of shape (H, W)."""
    buf = Path(path).read_bytes()
    tokens, offset = _read_header_tokens(buf, 4)
    if tokens[0] != b"P5":
        raise PGMError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PGMError(f"{path}: malformed header") from exc
    if width < 1 or height < 1:
        raise PGMError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise PGMError(f"{path}: maxval {maxval} unsupported (need 255)")
    raster = buf[offset:offset + width * height]
    if len(raster) != width * height:
        raise PGMError(f"{path}: expected {width * height} pixel bytes, got {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width)


def write_pgm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise PGMError("write_pgm expects a 2-d uint8 array")
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(pixels).tobytes())


def to_unit_range(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64) / 127.5 - 1.0


def to_pixels(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_unit_range`, rounding to the nearest of 256 levels."""
    return np.clip(np.rint((np.asarray(x) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def load_pgm_dataset(path: str | os.PathLike, domain: str = "A") -> Dataset:
    """Flatten every ``*.pgm`` in a directory (sorted by name) into one row each."""
    files = sorted(Path(path).glob("*.pgm"))
    if not files:
        raise PGMError(f"no .pgm files in {path}")
    images = [read_pgm(f) for f in files]
    shape = images[0].shape
    for f, img in zip(files, images):
        if img.shape != shape:
            raise PGMError(f"{f}: size {img.shape[::-1]} differs from {shape[::-1]}")
    x = np.stack([to_unit_range(img).reshape(-1) for img in images])
    return Dataset(domain, x, {"image_shape": shape, "files": [f.name for f in files]})


# ---------------------------------------------------------------------------
# batching

@dataclass
class DomainBatch:
    batch_a: np.ndarray
    batch_b: np.ndarray
    noise_z: np.ndarray

    @property
    def size(self) -> int:
        return self.batch_a.shape[0]


def next_batch(datasets: tuple[Dataset, Dataset], k: int, rng: np.random.Generator, n_z: int) -> DomainBatch:
    """Independent draws (without replacement) from each domain plus N(0, I) noise."""
    a, b = datasets
    if k < 1 or k > len(a) or k > len(b):
        raise ValueError(f"batch size {k} exceeds dataset sizes ({len(a)}, {len(b)})")
    ia = rng.choice(len(a), size=k, replace=False)
    ib = rng.choice(len(b), size=k, replace=False)
    noise = rng.standard_normal((k, n_z))
    return DomainBatch(a.samples[ia], b.samples[ib], noise)
