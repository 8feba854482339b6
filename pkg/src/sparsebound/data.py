"""Datasets: IDX files, a seeded synthetic generator, binary subsets and patch norms.

Label convention: of the two classes in a binary dataset, the smaller class id
maps to +1 and one-hot ``[1, 0]``; the other maps to -1 and ``[0, 1]``.

Dataset directory layout::

    images.idx3     uint8 images, (m, h, w) or (m, c, h, w)
    labels.idx1     uint8 class index, 0 for the +1 class and 1 for the -1 class
    manifest.json   image shape, provenance and file checksums
"""
from __future__ import annotations

import gzip
import hashlib
import json
import struct
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .arch import ArchGraph

IDX_UBYTE = 0x08
MAX_IDX_ELEMENTS = 1 << 31


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxDimensionError(IdxFormatError):
    pass


# -- IDX --------------------------------------------------------------------


def parse_idx(buf: bytes, scale: bool = True) -> np.ndarray:
    """Decode an unsigned-byte IDX stream.

    Rank-1 streams (magic 0x00000801) are labels and come back as int64.
    Higher ranks (0x00000803 for images) come back as float64 in [0, 1] when
    ``scale`` is set, else as uint8.
    """
    buf = bytes(buf)
    if len(buf) < 4:
        raise IdxTruncatedError(f"stream of {len(buf)} bytes is shorter than the magic")
    zero, dtype, ndim = struct.unpack(">HBB", buf[:4])
    if zero != 0 or dtype != IDX_UBYTE or not 1 <= ndim <= 4:
        raise IdxMagicError(f"unsupported IDX magic 0x{buf[:4].hex()}")
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise IdxTruncatedError("stream ends inside the dimension header")
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    n = 1
    for d in dims:
        n *= d
    if n > MAX_IDX_ELEMENTS:
        raise IdxDimensionError(f"dimensions {dims} exceed {MAX_IDX_ELEMENTS} elements")
    if len(buf) - head < n:
        raise IdxTruncatedError(f"payload has {len(buf) - head} of {n} bytes")
    if len(buf) - head > n:
        raise IdxDimensionError(
            f"payload has {len(buf) - head - n} bytes beyond dimensions {dims}"
        )
    raw = np.frombuffer(buf, dtype=np.uint8, count=n, offset=head).reshape(dims)
    if ndim == 1:
        return raw.astype(np.int64)
    if scale:
        return raw / 255.0
    return raw.copy()


def _to_bytes(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype.kind == "f":
        if not np.isfinite(a).all() or a.min(initial=0) < 0 or a.max(initial=0) > 1:
            raise IdxFormatError("float pixels must lie in [0, 1]")
        q = np.rint(a * 255.0)
        if not np.array_equal(q / 255.0, a):
            raise IdxFormatError("float pixels are not multiples of 1/255")
        return q.astype(np.uint8)
    if a.min(initial=0) < 0 or a.max(initial=0) > 255:
        raise IdxFormatError("integer values must lie in [0, 255]")
    return a.astype(np.uint8)


def write_idx(a) -> bytes:
    """Encode an array as an unsigned-byte IDX stream (inverse of :func:`parse_idx`)."""
    a = np.asarray(a)
    if not 1 <= a.ndim <= 4:
        raise IdxDimensionError("IDX rank must be between 1 and 4")
    b = _to_bytes(a)
    return struct.pack(f">HBB{a.ndim}I", 0, IDX_UBYTE, a.ndim, *a.shape) + b.tobytes()


def read_idx_file(path, scale: bool = True) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return parse_idx(raw, scale)


# -- datasets ---------------------------------------------------------------


@dataclass
class Dataset:
    images: np.ndarray  # (m, c_0, d_0)
    labels: np.ndarray  # +1 / -1
    image_shape: tuple[int, int, int]  # (c, h, w)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64).ravel()
        c, h, w = self.image_shape
        if self.images.ndim != 3 or self.images.shape[1:] != (c, h * w):
            raise ValueError(f"images {self.images.shape} do not match shape {self.image_shape}")
        if self.images.shape[0] < 1 or self.labels.size != self.images.shape[0]:
            raise ValueError("need m >= 1 images with one label each")
        if not np.isin(self.labels, (-1.0, 1.0)).all():
            raise ValueError("labels must be +1 or -1")
        if not np.isfinite(self.images).all():
            raise ValueError("images contain NaN or Inf")

    @property
    def m(self) -> int:
        return self.images.shape[0]

    @property
    def onehot(self) -> np.ndarray:
        pos = self.labels > 0
        return np.stack([pos, ~pos], axis=1).astype(np.float64)

    @property
    def patch_map(self) -> np.ndarray:
        """(d_0, 2) array of the (row, col) pixel feeding each input neuron."""
        _, h, w = self.image_shape
        r, c = np.divmod(np.arange(h * w), w)
        return np.stack([r, c], axis=1)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.image_shape, dict(self.provenance))


def _as_nchw(images: np.ndarray) -> np.ndarray:
    if images.ndim == 3:
        return images[:, None]
    if images.ndim == 4:
        return images
    raise ValueError("images must be (n, h, w) or (n, c, h, w)")


def from_images(images, labels, provenance: Optional[dict] = None) -> Dataset:
    """Build a Dataset from (n, h, w) or (n, c, h, w) images and +-1 labels."""
    x = _as_nchw(np.asarray(images, dtype=np.float64))
    n, c, h, w = x.shape
    return Dataset(x.reshape(n, c, h * w), labels, (c, h, w), provenance or {})


def synth_dataset(
    seed: int,
    m: int,
    image_shape: tuple[int, int, int] = (1, 16, 16),
    period: tuple[float, float] = (4.0, 8.0),
    amplitude: float = 1.0,
    noise: float = 0.3,
    duty: float = 0.5,
) -> Dataset:
    """Two classes of oriented stripes under pixel noise.

    Class +1 has bright horizontal bands on a dark background and class -1
    vertical ones; each image draws a period in ``period`` and a uniformly
    random phase, and ``duty`` is the bright fraction of a period.  Averaged
    over phases both classes have the same mean image, so the classes are not
    linearly separable in expectation.  Pixels are quantized to multiples of 1/255 so the data
    survives an IDX round trip unchanged.  Classes alternate, so the counts
    differ by at most one.
    """
    if m < 2:
        raise ValueError("need m >= 2")
    rng = np.random.default_rng(seed)
    c, h, w = image_shape
    labels = np.where(np.arange(m) % 2 == 0, 1.0, -1.0)
    per = rng.uniform(*period, size=m)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=m)
    rows = np.arange(h)[None, :, None]
    cols = np.arange(w)[None, None, :]
    coord = np.where(labels[:, None, None] > 0, rows + 0 * cols, cols + 0 * rows)
    frac = np.mod(coord / per[:, None, None] + phase[:, None, None] / (2.0 * np.pi), 1.0)
    bands = (frac < duty).astype(np.float64)
    x = amplitude * bands[:, None] + noise * rng.standard_normal((m, c, h, w))
    x = np.rint(np.clip(x, 0.0, 1.0) * 255.0) / 255.0
    prov = {
        "source": "synthetic",
        "seed": int(seed),
        "period": list(period),
        "amplitude": amplitude,
        "noise": noise,
        "duty": duty,
    }
    return from_images(x, labels, prov)


def binary_subset(images, class_labels, class_a, class_b, m: int, seed: int, source: str = "") -> Dataset:
    """Seeded, balanced m-sample subset of two classes.

    The smaller class id becomes +1; the +1 class gets the extra sample when m
    is odd.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    if class_a == class_b:
        raise ValueError("the two classes must differ")
    pos_cls, neg_cls = sorted((class_a, class_b))
    y = np.asarray(class_labels)
    pos = np.flatnonzero(y == pos_cls)
    neg = np.flatnonzero(y == neg_cls)
    n_pos, n_neg = (m + 1) // 2, m // 2
    if len(pos) < n_pos or len(neg) < n_neg:
        raise ValueError(
            f"need {n_pos}/{n_neg} samples of classes {pos_cls}/{neg_cls}, "
            f"have {len(pos)}/{len(neg)}"
        )
    rng = np.random.default_rng(seed)
    pick = np.concatenate([rng.choice(pos, n_pos, replace=False), rng.choice(neg, n_neg, replace=False)])
    pick = pick[rng.permutation(m)]
    labels = np.where(y[pick] == pos_cls, 1.0, -1.0)
    prov = {"source": source or "array", "seed": int(seed), "classes": [int(pos_cls), int(neg_cls)]}
    return from_images(np.asarray(images)[pick], labels, prov)


def extract_patches(data, g: ArchGraph) -> np.ndarray:
    """sum_i ||z^0_j(x_i)||^2 for each of the d_0 input neurons of ``g``."""
    x = np.asarray(getattr(data, "images", data), dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != (g.channels[0], g.widths[0]):
        raise ValueError(
            f"data of shape {x.shape} does not feed an input layer with "
            f"(c_0, d_0) = {(g.channels[0], g.widths[0])}"
        )
    return np.einsum("icj,icj->j", x, x)


# -- directories ------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_dataset(ds: Dataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    c, h, w = ds.image_shape
    imgs = ds.images.reshape(ds.m, c, h, w)
    if c == 1:
        imgs = imgs[:, 0]
    (d / "images.idx3").write_bytes(write_idx(imgs))
    (d / "labels.idx1").write_bytes(write_idx((ds.labels < 0).astype(np.uint8)))
    manifest = {
        "m": ds.m,
        "image_shape": list(ds.image_shape),
        "label_encoding": {"0": 1, "1": -1},
        "provenance": ds.provenance,
        "sha256": {n: _sha256(d / n) for n in ("images.idx3", "labels.idx1")},
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    for name, digest in manifest.get("sha256", {}).items():
        if _sha256(d / name) != digest:
            raise IdxFormatError(f"{name} does not match its manifest checksum")
    imgs = parse_idx((d / "images.idx3").read_bytes())
    idx = parse_idx((d / "labels.idx1").read_bytes())
    labels = np.where(idx == 0, 1.0, -1.0)
    ds = from_images(imgs, labels, manifest.get("provenance", {}))
    if list(ds.image_shape) != list(manifest["image_shape"]):
        raise IdxDimensionError("image shape disagrees with the manifest")
    return ds


# -- MNIST-style files --------------------------------------------------------

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def load_idx_pair(directory, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Images (n, h, w) in [0, 1] and integer class labels from an MNIST-style directory."""
    d = Path(directory)
    x = read_idx_file(_find(d, MNIST_FILES[f"{split}_images"]))
    y = read_idx_file(_find(d, MNIST_FILES[f"{split}_labels"]))
    if len(x) != len(y):
        raise IdxDimensionError(f"{len(x)} images vs {len(y)} labels")
    return x, y


def read_checksums(path) -> dict[str, str]:
    """Parse ``sha256sum``-style lines: ``<hex digest>  <file name>``."""
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        digest, name = line.split(None, 1)
        out[name.lstrip("*").strip()] = digest.lower()
    return out


def fetch_idx_files(base_url: str, dest, checksums: dict[str, str]) -> list[Path]:
    """Download the four gzipped IDX files and verify each against ``checksums``.

    ``checksums`` maps file names (``train-images-idx3-ubyte.gz`` etc.) to
    SHA-256 digests.  A file whose digest does not match is deleted.
    """
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    out = []
    for stem in MNIST_FILES.values():
        name = stem + ".gz"
        if name not in checksums:
            raise ValueError(f"no checksum given for {name}")
        target = dest / name
        if not target.exists():
            with urllib.request.urlopen(base_url.rstrip("/") + "/" + name) as r:
                target.write_bytes(r.read())
        if _sha256(target) != checksums[name]:
            target.unlink()
            raise IdxFormatError(f"{name}: SHA-256 mismatch")
        out.append(target)
    return out
