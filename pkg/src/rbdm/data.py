"""Paired Mueller / stain data: synthetic generator, MPT1 tensor files and
the manifest-driven loader for real datasets.

MPT1 layout (all little-endian)::

    b"MPT1" | u32 ndim | ndim x u32 dims | prod(dims) x float32 (row-major)

Manifest layout: UTF-8 text, a header of ``key=value`` lines followed by one
``split<TAB>mm_path<TAB>target_path`` record per line. Paths are relative to
the manifest's directory unless absolute.
"""
import functools
import os
import struct
import warnings
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from rbdm.errors import ConfigError, DataError, FormatError

MAGIC = b"MPT1"
MANIFEST_VERSION = 1
MUELLER_CHANNELS = 16
STAIN_CHANNELS = 3
MIN_SYNTHETIC_SIZE = 32
RANGE_SLACK = 1e-3
ROUNDING_SLACK = 1e-6  # float rounding of exact min/max affine maps
SPLITS = ("train", "test")


# ------------------------------------------------------------------ MPT1
def encode_tensor(arr):
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise DataError("refusing to write non-finite values")
    head = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(buf, offset=0):
    """Parse one MPT1 record starting at ``offset``; returns (array, end_offset)."""
    if len(buf) - offset < 8:
        raise FormatError(f"truncated header at byte offset {offset}: need 8 bytes, "
                          f"have {len(buf) - offset}")
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[offset:offset + 4])!r} at byte offset {offset}, "
                          f"expected {MAGIC!r}")
    (ndim,) = struct.unpack_from("<I", buf, offset + 4)
    pos = offset + 8
    if len(buf) - pos < 4 * ndim:
        raise FormatError(f"truncated dimension list at byte offset {pos}: expected {4 * ndim} "
                          f"bytes, have {len(buf) - pos}")
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    need = 4 * count
    have = len(buf) - pos
    if have < need:
        raise FormatError(f"truncated payload at byte offset {pos}: expected {need} bytes, "
                          f"found {have}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims)
    return arr.astype(np.float32), pos + need


def write_tensor(path, arr):
    with open(path, "wb") as fh:
        fh.write(encode_tensor(arr))


def read_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} unexpected trailing bytes at byte offset {end}")
    return arr


# ------------------------------------------------------------ synthetic data
_PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))


@functools.lru_cache(maxsize=None)
def _mixing():
    # fixed for all time: changing this seed changes every synthetic dataset
    rng = np.random.default_rng(0x4D505444)
    linear = rng.normal(0.0, 0.6, size=(MUELLER_CHANNELS - 1, 4))
    quad = rng.normal(0.0, 0.25, size=(MUELLER_CHANNELS - 1, len(_PAIRS)))
    quad[:6] = 0.0  # channels 1..6 stay pointwise invertible in the latents
    stain = rng.normal(0.0, 0.7, size=(STAIN_CHANNELS, 4))
    stain_bias = np.array([0.35, -0.25, 0.2])
    return linear, quad, stain, stain_bias


def _binomial_kernel(taps=9):
    k = np.array([1.0])
    for _ in range(taps - 1):
        k = np.convolve(k, [1.0, 1.0])
    return k / k.sum()


def generate_synthetic_pair(seed, height, width):
    """Deterministic (MuellerPatch, StainPatch) pair.

    Four latent fields of smoothed Gaussian noise drive both modalities:
    Mueller channels 1..15 are tanh of fixed linear (+ quadratic for 7..15)
    mixtures, channel 0 is the m00-normalised constant 1, and the stain
    image is tanh of three fixed linear mixtures.
    """
    if height < MIN_SYNTHETIC_SIZE or width < MIN_SYNTHETIC_SIZE:
        raise ConfigError(f"synthetic patches must be at least {MIN_SYNTHETIC_SIZE}x"
                          f"{MIN_SYNTHETIC_SIZE}, got {height}x{width}")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((4, height, width))
    kern = _binomial_kernel()
    for _ in range(2):
        z = ndimage.correlate1d(z, kern, axis=1, mode="reflect")
        z = ndimage.correlate1d(z, kern, axis=2, mode="reflect")
    z = z - z.mean(axis=(1, 2), keepdims=True)
    z = z / z.std(axis=(1, 2), keepdims=True)

    linear, quad, stain, stain_bias = _mixing()
    prods = np.stack([z[i] * z[j] for i, j in _PAIRS])
    pre = np.tensordot(linear, z, axes=1) + np.tensordot(quad, prods, axes=1)
    mm = np.empty((MUELLER_CHANNELS, height, width))
    mm[0] = 1.0
    mm[1:] = np.tanh(pre)
    rgb = np.tanh(np.tensordot(stain, z, axes=1) + stain_bias[:, None, None])
    return mm.astype(np.float32), rgb.astype(np.float32)


def pair_seed(seed, index):
    """Per-pair 64-bit seed derived from a dataset seed."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, np.uint64)[0])


# ------------------------------------------------------------------ manifest
@dataclass
class DatasetManifest:
    records: List[Tuple[str, str, str]]
    modality: str = "HE"
    version: int = MANIFEST_VERSION
    mm_offset: np.ndarray = field(default_factory=lambda: np.zeros(MUELLER_CHANNELS))
    mm_scale: np.ndarray = field(default_factory=lambda: np.ones(MUELLER_CHANNELS))
    mm_shift: np.ndarray = field(default_factory=lambda: np.zeros(MUELLER_CHANNELS))
    target_offset: np.ndarray = field(default_factory=lambda: np.zeros(STAIN_CHANNELS))
    target_scale: np.ndarray = field(default_factory=lambda: np.ones(STAIN_CHANNELS))
    target_shift: np.ndarray = field(default_factory=lambda: np.zeros(STAIN_CHANNELS))
    image_size: Optional[int] = None
    root: str = "."

    _VECTORS = {"mm_offset": MUELLER_CHANNELS, "mm_scale": MUELLER_CHANNELS,
                "mm_shift": MUELLER_CHANNELS, "target_offset": STAIN_CHANNELS,
                "target_scale": STAIN_CHANNELS, "target_shift": STAIN_CHANNELS}

    def __post_init__(self):
        for key, n in self._VECTORS.items():
            v = np.asarray(getattr(self, key), dtype=np.float64).reshape(-1)
            if v.size == 1:
                v = np.repeat(v, n)
            if v.size != n:
                raise ConfigError(f"manifest {key} needs {n} values, got {v.size}")
            setattr(self, key, v)
        for key in ("mm_scale", "target_scale"):
            if np.any(getattr(self, key) == 0):
                raise ConfigError(f"manifest {key} contains a zero")
        for split, _, _ in self.records:
            if split not in SPLITS:
                raise ConfigError(f"unknown split tag {split!r}")

    def __len__(self):
        return len(self.records)

    def resolve(self, path):
        return path if os.path.isabs(path) else os.path.join(self.root, path)

    def subset(self, split):
        return replace(self, records=[r for r in self.records if r[0] == split])


def _fmt_vec(v):
    return ",".join(repr(float(x)) for x in v)


def write_manifest(manifest, path):
    lines = [f"version={manifest.version}", f"modality={manifest.modality}"]
    for key in DatasetManifest._VECTORS:
        lines.append(f"{key}={_fmt_vec(getattr(manifest, key))}")
    if manifest.image_size is not None:
        lines.append(f"image_size={manifest.image_size}")
    for split, mm, tgt in manifest.records:
        lines.append(f"{split}\t{mm}\t{tgt}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path, check_files=True):
    header = {}
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if "\t" in line:
                parts = line.split("\t")
                if len(parts) != 3:
                    raise DataError(f"{path}:{lineno}: expected split, mm_path, target_path")
                records.append(tuple(parts))
                continue
            if records:
                raise DataError(f"{path}:{lineno}: header line after records")
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            header[key] = value
    kwargs = {"records": records, "root": os.path.dirname(os.path.abspath(path))}
    for key, value in header.items():
        if key == "version":
            kwargs["version"] = int(value)
            if kwargs["version"] != MANIFEST_VERSION:
                raise DataError(f"{path}: unsupported manifest version {value}")
        elif key == "modality":
            kwargs["modality"] = value
        elif key == "image_size":
            kwargs["image_size"] = int(value)
        elif key in DatasetManifest._VECTORS:
            kwargs[key] = [float(x) for x in value.split(",")]
        else:
            raise DataError(f"{path}: unknown manifest key {key!r}")
    manifest = DatasetManifest(**kwargs)
    if check_files:
        for _, mm, tgt in manifest.records:
            for p in (mm, tgt):
                if not os.path.exists(manifest.resolve(p)):
                    raise DataError(f"manifest references missing file {manifest.resolve(p)}")
    return manifest


def split_manifest(manifest, train_fraction, seed):
    """Deterministic shuffled split into (train, test) manifests."""
    if not 0 < train_fraction < 1:
        raise ConfigError(f"train fraction must lie in (0, 1), got {train_fraction}")
    n = len(manifest.records)
    if n == 0:
        raise DataError("cannot split an empty manifest")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_fraction * n))
    train_idx = sorted(order[:n_train])
    test_idx = sorted(order[n_train:])
    train = [("train",) + tuple(manifest.records[i][1:]) for i in train_idx]
    test = [("test",) + tuple(manifest.records[i][1:]) for i in test_idx]
    return replace(manifest, records=train), replace(manifest, records=test)


# ------------------------------------------------------------------ loading
def resize_bilinear(arr, height, width):
    """Bilinear resize of a C x H x W array with pixel-area alignment."""
    c, h, w = arr.shape
    if (h, w) == (height, width):
        return arr
    return ndimage.zoom(arr, (1, height / h, width / w), order=1, mode="nearest",
                        grid_mode=True).astype(np.float32)


def _normalize(arr, offset, scale, shift):
    return ((arr - offset[:, None, None]) / scale[:, None, None] + shift[:, None, None])


def _check_range(arr, what):
    lo, hi = float(arr.min()), float(arr.max())
    excess = max(-1.0 - lo, hi - 1.0, 0.0)
    if excess == 0:
        return arr
    if excess <= ROUNDING_SLACK:
        return np.clip(arr, -1.0, 1.0)
    if excess <= RANGE_SLACK:
        warnings.warn(f"{what} exceeds [-1, 1] by {excess:.2e}; clamped")
        return np.clip(arr, -1.0, 1.0)
    raise DataError(f"{what} range [{lo:.4f}, {hi:.4f}] leaves [-1, 1] after normalization")


def load_and_normalize(manifest, index, size=None):
    """Read pair ``index``, apply the per-channel affine normalization and
    resize to ``size`` (or the manifest's image_size)."""
    if not 0 <= index < len(manifest.records):
        raise DataError(f"index {index} out of range for {len(manifest.records)} records")
    _, mm_path, tgt_path = manifest.records[index]
    out = []
    for path, channels, prefix in ((mm_path, MUELLER_CHANNELS, "mm"),
                                   (tgt_path, STAIN_CHANNELS, "target")):
        full = manifest.resolve(path)
        if not os.path.exists(full):
            raise DataError(f"missing file {full}")
        arr = read_tensor(full).astype(np.float64)
        if arr.ndim != 3 or arr.shape[0] != channels:
            raise DataError(f"{full}: expected {channels} x H x W, got {arr.shape}")
        arr = _normalize(arr, getattr(manifest, f"{prefix}_offset"),
                         getattr(manifest, f"{prefix}_scale"),
                         getattr(manifest, f"{prefix}_shift"))
        size = size or manifest.image_size
        if size:
            arr = resize_bilinear(arr, size, size)
        out.append(_check_range(arr, full).astype(np.float32))
    return out[0], out[1]


class ManifestDataset:
    """Indexable (mueller, stain) pairs of one split, normalised on access."""

    def __init__(self, manifest, split=None, size=None):
        self.manifest = manifest.subset(split) if split else manifest
        self.size = size

    def __len__(self):
        return len(self.manifest.records)

    def __getitem__(self, i):
        return load_and_normalize(self.manifest, i, self.size)


class ArrayDataset:
    """In-memory pairs: ``mm`` is N x 16 x H x W, ``targets`` N x 3 x H x W."""

    def __init__(self, mm, targets):
        if len(mm) != len(targets):
            raise DataError(f"{len(mm)} Mueller patches vs {len(targets)} targets")
        self.mm = np.asarray(mm, dtype=np.float32)
        self.targets = np.asarray(targets, dtype=np.float32)

    def __len__(self):
        return len(self.mm)

    def __getitem__(self, i):
        return self.mm[i], self.targets[i]


def synthetic_dataset(count, size, seed):
    pairs = [generate_synthetic_pair(pair_seed(seed, i), size, size) for i in range(count)]
    return ArrayDataset(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]))


def generate_dataset(out_dir, count, size, seed, train_fraction=0.7, modality="HE"):
    """Write ``count`` synthetic pairs as MPT1 files plus a split manifest.
    Returns the manifest path."""
    os.makedirs(os.path.join(out_dir, "mm"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "target"), exist_ok=True)
    records = []
    for i in range(count):
        mm, rgb = generate_synthetic_pair(pair_seed(seed, i), size, size)
        mm_rel = os.path.join("mm", f"{i:05d}.mpt")
        tgt_rel = os.path.join("target", f"{i:05d}.mpt")
        write_tensor(os.path.join(out_dir, mm_rel), mm)
        write_tensor(os.path.join(out_dir, tgt_rel), rgb)
        records.append(("train", mm_rel, tgt_rel))
    manifest = DatasetManifest(records=records, modality=modality, image_size=size,
                               root=os.path.abspath(out_dir))
    train, test = split_manifest(manifest, train_fraction, seed)
    merged = replace(manifest, records=train.records + test.records)
    path = os.path.join(out_dir, "manifest.txt")
    write_manifest(merged, path)
    return path
