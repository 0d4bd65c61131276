"""The NEDS on-disk container for labeled feature sequences, plus
deterministic splitting, batching, and a CSV export.

File layout (all little-endian):

    magic   4 bytes  "NEDS"
    version u16      currently 1
    dim     u16      feature width, 16
    classes u16      number of distinct label codes
    count   u64      record count
    then per record:
    label   u8
    length  u8       number of rows, 3..7
    rows    length*dim float32

Files are immutable once written; identical inputs produce identical bytes.
"""

from __future__ import annotations

import csv
import struct
from collections import Counter

import numpy as np

from .errors import DatasetFormatError, DimMismatchError, EmptyDatasetError
from .features import FEATURE_DIM, FEATURE_NAMES, FRAME_MAX, FRAME_MIN, FeatureSequence

DATASET_MAGIC = b"NEDS"
DATASET_VERSION = 1

_HEADER = struct.Struct("<4sHHHQ")


def write_dataset(
    samples: list[FeatureSequence], path: str, class_count: int | None = None
) -> int:
    """Write samples to ``path``; returns the record count."""
    if not samples:
        raise EmptyDatasetError("refusing to write a dataset with zero samples")
    max_label = max(s.label for s in samples)
    if class_count is None:
        class_count = max_label + 1
    elif max_label >= class_count:
        raise DimMismatchError(
            f"label {max_label} does not fit in class_count {class_count}"
        )
    chunks = [
        _HEADER.pack(
            DATASET_MAGIC, DATASET_VERSION, FEATURE_DIM, class_count, len(samples)
        )
    ]
    for s in samples:
        if s.rows.shape[1] != FEATURE_DIM:
            raise DimMismatchError(
                f"sample has {s.rows.shape[1]} dims, expected {FEATURE_DIM}"
            )
        chunks.append(struct.pack("<BB", s.label, len(s.rows)))
        chunks.append(np.ascontiguousarray(s.rows, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))
    return len(samples)


def read_dataset(path: str) -> tuple[list[FeatureSequence], int]:
    """Read samples back; returns (samples, class_count)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise DatasetFormatError(f"file too short for a dataset header ({len(data)} bytes)")
    magic, version, dim, class_count, count = _HEADER.unpack_from(data, 0)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"bad dataset magic {magic!r}")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    if dim != FEATURE_DIM:
        raise DimMismatchError(f"dataset dim {dim}, this build expects {FEATURE_DIM}")
    pos = _HEADER.size
    samples: list[FeatureSequence] = []
    for idx in range(count):
        if pos + 2 > len(data):
            raise DatasetFormatError(f"record {idx} header truncated")
        label, length = struct.unpack_from("<BB", data, pos)
        pos += 2
        if not FRAME_MIN <= length <= FRAME_MAX:
            raise DatasetFormatError(
                f"record {idx} length {length} outside [{FRAME_MIN}, {FRAME_MAX}]"
            )
        if label >= class_count:
            raise DatasetFormatError(
                f"record {idx} label {label} >= class_count {class_count}"
            )
        nbytes = length * dim * 4
        if pos + nbytes > len(data):
            raise DatasetFormatError(f"record {idx} rows truncated")
        rows = (
            np.frombuffer(data, dtype="<f4", count=length * dim, offset=pos)
            .reshape(length, dim)
            .copy()
        )
        pos += nbytes
        samples.append(FeatureSequence(rows=rows, label=label))
    if pos != len(data):
        raise DatasetFormatError(f"{len(data) - pos} trailing bytes after last record")
    return samples, class_count


def split(
    samples: list[FeatureSequence], seed: int, train_fraction: float = 0.8
) -> tuple[list[FeatureSequence], list[FeatureSequence]]:
    """Deterministic shuffled split into floor(n*f) train and the rest."""
    if len(samples) < 2:
        raise EmptyDatasetError("need at least 2 samples to split")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    perm = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(len(samples) * train_fraction)
    train = [samples[i] for i in perm[:n_train]]
    test = [samples[i] for i in perm[n_train:]]
    return train, test


def batches(
    samples: list[FeatureSequence], batch_size: int, epoch_seed: int
):
    """Yield shuffled batches; the final short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = np.random.default_rng(epoch_seed).permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        yield [samples[i] for i in perm[start : start + batch_size]]


def class_histogram(samples: list[FeatureSequence]) -> dict[int, int]:
    return dict(sorted(Counter(s.label for s in samples).items()))


def export_csv(samples: list[FeatureSequence], path: str) -> int:
    """One CSV row per packet: sample_id, label, row_index, then the 16 dims."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "label", "row_index", *FEATURE_NAMES])
        n = 0
        for sid, s in enumerate(samples):
            for ri, row in enumerate(s.rows):
                writer.writerow(
                    [sid, s.label, ri, *(format(float(v), "g") for v in row)]
                )
                n += 1
    return n


__all__ = [
    "DATASET_MAGIC",
    "DATASET_VERSION",
    "write_dataset",
    "read_dataset",
    "split",
    "batches",
    "class_histogram",
    "export_csv",
]
