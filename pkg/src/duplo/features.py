"""Export of per-pixel fused descriptors for downstream classifiers.

Two interchangeable formats: CSV (object_id, label, then the descriptor
columns) and a binary table (magic "DFEA", version u32 LE, count u32,
dim u32, then per record: object_id i32, label i32, dim float32 LE).
"""

from __future__ import annotations

import struct

import numpy as np

from .data import FormatError

FEATURES_MAGIC = b"DFEA"
FEATURES_VERSION = 1

Record = tuple[int, int, np.ndarray]


def write_features_csv(path: str, records: list[Record]) -> None:
    with open(path, "w") as fh:
        for oid, label, vec in records:
            fh.write(f"{oid},{label}," + ",".join(repr(float(v)) for v in vec) + "\n")


def read_features_csv(path: str) -> list[Record]:
    records = []
    with open(path) as fh:
        for line in fh:
            parts = line.strip().split(",")
            records.append((int(parts[0]), int(parts[1]),
                            np.array([float(v) for v in parts[2:]], dtype=np.float32)))
    return records


def write_features_bin(path: str, records: list[Record]) -> None:
    dim = len(records[0][2]) if records else 0
    with open(path, "wb") as fh:
        fh.write(FEATURES_MAGIC)
        fh.write(struct.pack("<III", FEATURES_VERSION, len(records), dim))
        for oid, label, vec in records:
            fh.write(struct.pack("<ii", oid, label))
            fh.write(np.asarray(vec, dtype="<f4").tobytes())


def read_features_bin(path: str) -> list[Record]:
    with open(path, "rb") as fh:
        if fh.read(4) != FEATURES_MAGIC:
            raise FormatError("bad magic: not a feature table")
        version, count, dim = struct.unpack("<III", fh.read(12))
        if version != FEATURES_VERSION:
            raise FormatError(f"unsupported feature table version {version}")
        records = []
        for _ in range(count):
            head = fh.read(8)
            body = fh.read(4 * dim)
            if len(head) != 8 or len(body) != 4 * dim:
                raise FormatError("truncated payload in feature table")
            oid, label = struct.unpack("<ii", head)
            records.append((oid, label, np.frombuffer(body, dtype="<f4").copy()))
        return records
