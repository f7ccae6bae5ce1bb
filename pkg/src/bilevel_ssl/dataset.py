"""Sample records and the binary dataset file format.

File layout (little-endian):

    magic        4 bytes   b"BSPC"
    version      u16       1
    classes      u16       C
    points       u32       N
    seed         u64       master seed
    counts       u32 x 6   samples per cohort, in the order L U W S O T
    records      one per sample, in id order:
        id       u64
        cohort   1 byte    ASCII cohort tag
        label    i32       class index, -1 when unlabeled
        points   f64 x N*3 row-major (x, y, z) per point

Every record is therefore ``8 + 1 + 4 + 24 * N`` bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"BSPC"
VERSION = 1
COHORTS = ("L", "U", "W", "S", "O", "T")
UNLABELED = -1

_HEADER = struct.Struct("<4sHHIQ6I")


@dataclass
class Sample:
    id: int
    points: np.ndarray
    label: int | None
    cohort: str

    def __post_init__(self):
        if self.cohort not in COHORTS:
            raise ValueError(f"unknown cohort {self.cohort!r}")


@dataclass
class Dataset:
    samples: list[Sample]
    num_classes: int
    num_points: int
    seed: int = 0

    def cohort(self, *tags: str) -> list[Sample]:
        return [s for s in self.samples if s.cohort in tags]

    def counts(self) -> dict[str, int]:
        return {c: sum(1 for s in self.samples if s.cohort == c) for c in COHORTS}

    def by_id(self) -> dict[int, Sample]:
        return {s.id: s for s in self.samples}


def _record_dtype(n: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("cohort", "S1"), ("label", "<i4"), ("points", "<f8", (n, 3))])


def write_dataset(ds: Dataset, path: str | Path) -> None:
    order = sorted(ds.samples, key=lambda s: s.id)
    counts = ds.counts()
    header = _HEADER.pack(MAGIC, VERSION, ds.num_classes, ds.num_points, ds.seed,
                          *(counts[c] for c in COHORTS))
    recs = np.zeros(len(order), dtype=_record_dtype(ds.num_points))
    for i, s in enumerate(order):
        if s.points.shape != (ds.num_points, 3):
            raise ValueError(f"sample {s.id} has shape {s.points.shape}")
        recs[i] = (s.id, s.cohort.encode(), UNLABELED if s.label is None else s.label, s.points)
    Path(path).write_bytes(header + recs.tobytes())


def read_dataset(path: str | Path) -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise ValueError(f"{path}: truncated dataset file")
    magic, version, c, n, seed, *counts = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    dt = _record_dtype(n)
    total = sum(counts)
    if len(buf) != _HEADER.size + total * dt.itemsize:
        raise ValueError(f"{path}: size does not match header")
    recs = np.frombuffer(buf, dtype=dt, count=total, offset=_HEADER.size)
    samples = [
        Sample(int(r["id"]), np.array(r["points"], dtype=np.float64),
               None if r["label"] == UNLABELED else int(r["label"]), r["cohort"].decode())
        for r in recs
    ]
    ds = Dataset(samples, c, n, seed)
    if [ds.counts()[k] for k in COHORTS] != list(counts):
        raise ValueError(f"{path}: cohort counts disagree with header")
    return ds


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Ids and ``(B, N, 3)`` points of a sample list."""
    if not samples:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 0, 3))
    return (np.array([s.id for s in samples], dtype=np.int64),
            np.stack([s.points for s in samples]))
