"""Datasets, splits and the attribution-cache container."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CompatibilityError, ConfigError, DataError, FormatError
from .numerics import make_rng

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class LabeledDataset:
    images: np.ndarray  # (n, c, h, w) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int
    split: str = "train"
    ids: np.ndarray | None = None  # stable sample ids, defaults to arange(n)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels) or len(self.ids) != len(self.labels):
            raise DataError(f"images {self.images.shape} / labels {self.labels.shape} / ids mismatch")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx, split: str | None = None) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes,
                              split or self.split, self.ids[idx])

    def channel_mean(self) -> np.ndarray:
        return self.images.mean(axis=(0, 2, 3))

    def channel_range(self) -> tuple[np.ndarray, np.ndarray]:
        return self.images.min(axis=(0, 2, 3)), self.images.max(axis=(0, 2, 3))


# -- CIFAR-10 -----------------------------------------------------------------


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise FormatError(f"missing CIFAR-10 batch {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    whole = len(raw) // CIFAR_RECORD * CIFAR_RECORD
    if whole != len(raw):
        raise FormatError(
            f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}; "
            f"truncated record starts at byte offset {whole}"
        )
    records = raw.reshape(-1, CIFAR_RECORD)
    return records[:, 1:].reshape(-1, 3, 32, 32), records[:, 0].astype(np.int64)


def load_cifar10_binary(directory) -> tuple[LabeledDataset, LabeledDataset]:
    """Read the standard binary batches (1 label byte + 3072 channel-major bytes)."""
    directory = Path(directory)
    parts = [_read_cifar_file(directory / name) for name in CIFAR_TRAIN_FILES]
    test_x, test_y = _read_cifar_file(directory / CIFAR_TEST_FILE)
    train_x = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    for y in (train_y, test_y):
        if y.size and y.max() >= 10:
            raise FormatError(f"{directory}: label byte {y.max()} outside 0..9")
    scale = np.float32(255)
    return (
        LabeledDataset(train_x.astype(np.float32) / scale, train_y, 10, "train"),
        LabeledDataset(test_x.astype(np.float32) / scale, test_y, 10, "test"),
    )


# -- synthetic watermark task -------------------------------------------------


@dataclass
class SyntheticWatermarkConfig:
    """Two classes that differ only in a small patch ("watermark").

    Class 0 carries a checkerboard patch at ``positions[0]``, class 1 a
    hollow square at ``positions[1]``. Everything else is i.i.d. uniform
    noise of width ``noise`` around mid-grey. ``contrast`` blends the patch
    over the background.
    """

    image_size: int = 32
    channels: int = 3
    patch_size: int = 6
    positions: tuple[tuple[int, int], ...] = ((9, 9), (17, 17))
    noise: float = 0.6
    contrast: float = 0.5
    n_train: int = 512
    n_test: int = 256
    seed: int = 0
    num_classes: int = field(default=2, init=False)

    def validate(self) -> None:
        if len(self.positions) != self.num_classes:
            raise ConfigError("need one patch position per class")
        for r, c in self.positions:
            if r < 0 or c < 0 or r + self.patch_size > self.image_size or c + self.patch_size > self.image_size:
                raise ConfigError(f"patch at ({r}, {c}) overflows a {self.image_size}px image")
        if not 0 <= self.noise <= 1 or not 0 <= self.contrast <= 1:
            raise ConfigError("noise and contrast must lie in [0, 1]")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("sample counts must be positive")


def watermark_patterns(patch_size: int) -> np.ndarray:
    """(2, p, p) patterns in [0, 1]."""
    ii, jj = np.indices((patch_size, patch_size))
    checker = ((ii + jj) % 2).astype(np.float32)
    ring = ((ii == 0) | (jj == 0) | (ii == patch_size - 1) | (jj == patch_size - 1)).astype(np.float32)
    return np.stack([checker, ring])


def _make_split(cfg: SyntheticWatermarkConfig, n: int, rng, split: str) -> LabeledDataset:
    s, p = cfg.image_size, cfg.patch_size
    labels = np.arange(n) % cfg.num_classes
    labels = labels[rng.permutation(n)]
    images = 0.5 + cfg.noise * (rng.random((n, cfg.channels, s, s)) - 0.5)
    patterns = watermark_patterns(p)
    for k, (r, c) in enumerate(cfg.positions):
        sel = labels == k
        region = images[sel, :, r:r + p, c:c + p]
        images[sel, :, r:r + p, c:c + p] = (1 - cfg.contrast) * region + cfg.contrast * patterns[k]
    return LabeledDataset(images.astype(np.float32), labels, cfg.num_classes, split)


def generate_synthetic(cfg: SyntheticWatermarkConfig) -> tuple[LabeledDataset, LabeledDataset]:
    cfg.validate()
    rng = make_rng(cfg.seed)
    train = _make_split(cfg, cfg.n_train, rng, "train")
    test = _make_split(cfg, cfg.n_test, rng, "test")
    return train, test


# -- splitting ----------------------------------------------------------------


def split_train_val(ds: LabeledDataset, fraction: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified, seeded split; per-class validation counts use largest remainders."""
    if not 0 < fraction < 1:
        raise ConfigError(f"validation fraction must be in (0, 1), got {fraction}")
    n = len(ds)
    n_val = int(round(n * fraction))
    if n_val == 0 or n_val == n:
        raise ConfigError(f"fraction {fraction} of {n} samples leaves an empty split")
    counts = np.bincount(ds.labels, minlength=ds.num_classes)
    exact = counts * n_val / n
    quota = np.floor(exact).astype(int)
    order = sorted(range(ds.num_classes), key=lambda k: (-(exact[k] - quota[k]), k))
    for k in order[: n_val - quota.sum()]:
        quota[k] += 1
    rng = make_rng(seed)
    perm = rng.permutation(n)
    val_idx = []
    for k in range(ds.num_classes):
        members = perm[ds.labels[perm] == k]
        val_idx.extend(members[: quota[k]])
    val_mask = np.zeros(n, dtype=bool)
    val_mask[val_idx] = True
    return ds.subset(np.flatnonzero(~val_mask), "train"), ds.subset(np.flatnonzero(val_mask), "val")


# -- attribution cache --------------------------------------------------------

CACHE_MAGIC = b"IXAC"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
_ENTRY = struct.Struct("<II")


@dataclass
class AttributionCache:
    """sample id -> (class index, (h, w) float32 map)."""

    height: int
    width: int
    entries: dict[int, tuple[int, np.ndarray]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, sample_id) -> bool:
        return int(sample_id) in self.entries

    def put(self, sample_id: int, cls: int, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float32).reshape(-1, *np.shape(values)[-2:])[0]
        if values.shape != (self.height, self.width):
            raise CompatibilityError(f"map {values.shape} does not match cache {(self.height, self.width)}")
        self.entries[int(sample_id)] = (int(cls), values)

    def get(self, sample_id: int) -> tuple[int, np.ndarray]:
        return self.entries[int(sample_id)]

    def maps_for(self, ids) -> np.ndarray:
        try:
            return np.stack([self.entries[int(i)][1] for i in ids])
        except KeyError as exc:
            raise DataError(f"attribution cache has no entry for sample {exc.args[0]}") from None


def cache_write(path, cache: AttributionCache) -> None:
    chunks = [_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, len(cache), cache.height, cache.width)]
    for sid in sorted(cache.entries):
        cls, values = cache.entries[sid]
        chunks.append(_ENTRY.pack(sid, cls))
        chunks.append(np.ascontiguousarray(values, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def cache_read(path) -> AttributionCache:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise FormatError(f"{path}: truncated header ({len(head)} bytes)")
        magic, version, count, h, w = _HEADER.unpack(head)
        if magic != CACHE_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != CACHE_VERSION:
            raise FormatError(f"{path}: unsupported cache version {version}")
        payload = fh.read()
    entry_size = _ENTRY.size + 4 * h * w
    if len(payload) != count * entry_size:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, header promises {count} x {entry_size}"
        )
    cache = AttributionCache(h, w)
    for i in range(count):
        off = i * entry_size
        sid, cls = _ENTRY.unpack_from(payload, off)
        values = np.frombuffer(payload, dtype="<f4", count=h * w, offset=off + _ENTRY.size)
        cache.entries[sid] = (cls, values.reshape(h, w).astype(np.float32))
    return cache


def cache_lookup(path, sample_id: int) -> tuple[int, np.ndarray]:
    """Read one entry without loading the file.

    Entries are fixed-size and sorted by id, so dense ids resolve with a
    single seek; sparse ids fall back to bisection over the records.
    """
    sample_id = int(sample_id)
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise FormatError(f"{path}: truncated header ({len(head)} bytes)")
        magic, version, count, h, w = _HEADER.unpack(head)
        if magic != CACHE_MAGIC or version != CACHE_VERSION:
            raise FormatError(f"{path}: bad magic or version")
        size = _ENTRY.size + 4 * h * w

        def read(i):
            fh.seek(_HEADER.size + i * size)
            raw = fh.read(size)
            if len(raw) < size:
                raise FormatError(f"{path}: truncated entry at byte offset {_HEADER.size + i * size}")
            sid, cls = _ENTRY.unpack_from(raw)
            return sid, cls, raw

        if count == 0:
            raise DataError(f"attribution cache has no entry for sample {sample_id}")
        first = read(0)[0]
        guess = sample_id - first
        lo, hi = 0, count
        if 0 <= guess < count:
            sid, cls, raw = read(guess)
            if sid == sample_id:
                return cls, np.frombuffer(raw, "<f4", h * w, _ENTRY.size).reshape(h, w).astype(np.float32)
        while lo < hi:
            mid = (lo + hi) // 2
            sid, cls, raw = read(mid)
            if sid == sample_id:
                return cls, np.frombuffer(raw, "<f4", h * w, _ENTRY.size).reshape(h, w).astype(np.float32)
            lo, hi = (mid + 1, hi) if sid < sample_id else (lo, mid)
    raise DataError(f"attribution cache has no entry for sample {sample_id}")
