"""Synthetic dataset generation, zero-shot splitting, and the FMAT format.

FMAT layout (little-endian):
    magic   4 bytes  b"FMAT"
    version u32
    rows    u64
    cols    u64
    flag    u8       1 when labels follow
    labels  rows * u32   (only when flagged)
    data    rows * cols * f32, row-major
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .config import SynthConfig

FMAT_MAGIC = b"FMAT"
FMAT_VERSION = 1


class FormatError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray  # [n, dim] float64
    labels: np.ndarray | None  # [n] uint32 class ids

    def __len__(self):
        return len(self.features)


def gen_synthetic(cfg: SynthConfig) -> Dataset:
    """Class mean + per-sample block factors + gaussian noise.

    Each latent factor owns a disjoint coordinate block, so different
    aspects of a sample live in different coordinates.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_classes * cfg.samples_per_class
    dim = cfg.input_dim
    blocks = np.array_split(np.arange(dim), cfg.n_factors)
    means = rng.normal(scale=cfg.class_scale, size=(cfg.n_classes, dim))
    x = np.empty((n, dim))
    labels = np.repeat(np.arange(cfg.n_classes, dtype=np.uint32),
                       cfg.samples_per_class)
    for i in range(n):
        sample = means[labels[i]].copy()
        for block in blocks:
            sample[block] += cfg.factor_scale * rng.normal(size=len(block))
        sample += cfg.noise_scale * rng.normal(size=dim)
        x[i] = sample
    return Dataset(x, labels)


def zero_shot_split(dataset: Dataset) -> tuple[Dataset, Dataset]:
    """First half of the class ids (sorted) trains; the rest is unseen."""
    if dataset.labels is None:
        raise ValueError("zero-shot split needs labels")
    classes = np.unique(dataset.labels)
    if classes.size < 2:
        raise ValueError("zero-shot split needs at least two classes")
    cut = (classes.size + 1) // 2
    train_classes = set(classes[:cut].tolist())
    mask = np.array([l in train_classes for l in dataset.labels])
    return (
        Dataset(dataset.features[mask], dataset.labels[mask]),
        Dataset(dataset.features[~mask], dataset.labels[~mask]),
    )


def _atomic_write(path, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def save_features(path, dataset: Dataset) -> None:
    rows, cols = dataset.features.shape
    flag = 1 if dataset.labels is not None else 0
    parts = [FMAT_MAGIC, struct.pack("<IQQB", FMAT_VERSION, rows, cols, flag)]
    if flag:
        parts.append(np.ascontiguousarray(dataset.labels, dtype="<u4").tobytes())
    parts.append(np.ascontiguousarray(dataset.features, dtype="<f4").tobytes())
    _atomic_write(path, b"".join(parts))


def load_features(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FMAT_MAGIC:
        raise FormatError(f"{path}: not a FMAT file")
    if len(blob) < 25:
        raise FormatError(f"{path}: truncated header ({len(blob)} bytes, need 25)")
    version, rows, cols, flag = struct.unpack_from("<IQQB", blob, 4)
    if version != FMAT_VERSION:
        raise FormatError(f"{path}: unsupported FMAT version {version}")
    offset = 25
    expected = offset + (rows * 4 if flag else 0) + rows * cols * 4
    if len(blob) != expected:
        raise FormatError(
            f"{path}: length mismatch at byte offset {min(len(blob), expected)}: "
            f"expected {expected} bytes, found {len(blob)}"
        )
    labels = None
    if flag:
        labels = np.frombuffer(blob, dtype="<u4", count=rows, offset=offset).copy()
        offset += rows * 4
    data = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=offset)
    features = data.reshape(rows, cols).astype(np.float64)
    return Dataset(features, labels)
