"""On-disk formats.

Feature files
    CSV     header ``id,label,f0,...,f{d-1}``; empty label = unlabeled row;
            UTF-8, LF line endings.
    binary  magic ``ALCV1`` | u32 n | u32 d | u8 has_labels | n*d LE f32
            values | (n LE u16 labels when labeled) | n ids, each a u16 LE
            byte length followed by UTF-8 bytes.

Checkpoints reuse the same little-endian framing under a ``MODL1`` magic:
a u32-length JSON header (config echo plus an array manifest of
name/shape/dtype entries) followed by the raw arrays in manifest order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import FeatureMatrix
from .errors import ConfigError, DataError

FEATURE_MAGIC = b"ALCV1"
MODEL_MAGIC = b"MODL1"

FORMATS = ("binary", "csv")


def save_features(data: FeatureMatrix, path: str | Path, format: str = "binary") -> None:
    path = Path(path)
    if format == "binary":
        _save_binary(data, path)
    elif format == "csv":
        _save_csv(data, path)
    else:
        raise ConfigError(f"unknown feature format {format!r}; valid: {', '.join(FORMATS)}")


def load_features(path: str | Path, format: str = "binary") -> FeatureMatrix:
    path = Path(path)
    if not path.exists():
        raise DataError(f"feature file not found: {path}")
    if format == "binary":
        return _load_binary(path)
    if format == "csv":
        return _load_csv(path)
    raise ConfigError(f"unknown feature format {format!r}; valid: {', '.join(FORMATS)}")


def _save_binary(data: FeatureMatrix, path: Path) -> None:
    has_labels = data.labels is not None
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IIB", data.n, data.d, int(has_labels)))
        fh.write(np.ascontiguousarray(data.values, dtype="<f4").tobytes())
        if has_labels:
            if data.labels.max(initial=0) > 0xFFFF:
                raise DataError("labels exceed the u16 range of the binary format")
            fh.write(np.ascontiguousarray(data.labels, dtype="<u2").tobytes())
        for sid in data.ids:
            raw = str(sid).encode("utf-8")
            if len(raw) > 0xFFFF:
                raise DataError(f"sample id too long for the binary format: {sid!r}")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)


def _load_binary(path: Path) -> FeatureMatrix:
    blob = path.read_bytes()
    if blob[:5] != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic, not a feature file")
    n, d, has_labels = struct.unpack_from("<IIB", blob, 5)
    offset = 5 + 9
    values = np.frombuffer(blob, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
    offset += 4 * n * d
    labels = None
    if has_labels:
        labels = np.frombuffer(blob, dtype="<u2", count=n, offset=offset).astype(np.int64)
        offset += 2 * n
    ids = []
    for i in range(n):
        (length,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        ids.append(blob[offset : offset + length].decode("utf-8"))
        offset += length
    if offset != len(blob):
        raise DataError(f"{path}: {len(blob) - offset} trailing bytes")
    return FeatureMatrix(values.copy(), np.array(ids), labels)


def _save_csv(data: FeatureMatrix, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        header = ["id", "label"] + [f"f{j}" for j in range(data.d)]
        fh.write(",".join(header) + "\n")
        for i in range(data.n):
            label = "" if data.labels is None else str(int(data.labels[i]))
            # 9 significant digits reproduce float32 values exactly
            row = [str(data.ids[i]), label] + [f"{v:.9g}" for v in data.values[i]]
            fh.write(",".join(row) + "\n")


def _load_csv(path: Path) -> FeatureMatrix:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty file")
    header = lines[0].split(",")
    if header[:2] != ["id", "label"]:
        raise DataError(f"{path}: header must start with id,label")
    d = len(header) - 2
    if d < 1:
        raise DataError(f"{path}: no feature columns in header")
    ids, labels, rows = [], [], []
    for row_idx, line in enumerate(lines[1:], start=1):
        if not line:
            continue
        cells = line.split(",")
        if len(cells) != d + 2:
            raise DataError(
                f"{path}: row {row_idx} has {len(cells) - 2} feature values, expected {d}"
            )
        ids.append(cells[0])
        labels.append(cells[1])
        try:
            rows.append([float(c) for c in cells[2:]])
        except ValueError as exc:
            raise DataError(f"{path}: row {row_idx}: unparseable feature value ({exc})") from exc
    n_labeled = sum(1 for cell in labels if cell != "")
    if n_labeled == 0:
        parsed_labels = None
    elif n_labeled == len(labels):
        parsed_labels = np.empty(len(labels), dtype=np.int64)
        for row_idx, cell in enumerate(labels, start=1):
            try:
                parsed_labels[row_idx - 1] = int(cell)
            except ValueError as exc:
                raise DataError(f"{path}: row {row_idx}: unparseable label {cell!r}") from exc
    else:
        first_empty = 1 + labels.index("")
        raise DataError(
            f"{path}: row {first_empty}: empty label in a labeled file "
            "(label all rows or none)"
        )
    values = np.array(rows, dtype=np.float32)
    id_arr = np.array(ids)
    if len(np.unique(id_arr)) != len(id_arr):
        seen = set()
        for row_idx, sid in enumerate(ids, start=1):
            if sid in seen:
                raise DataError(f"{path}: row {row_idx}: duplicate id {sid!r}")
            seen.add(sid)
    return FeatureMatrix(values, id_arr, parsed_labels)


# ---------------------------------------------------------------------------
# MODL1 container: JSON header + named float64 arrays
# ---------------------------------------------------------------------------


def write_container(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    manifest = []
    payload = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": "f8"})
        payload.append(arr.tobytes())
    header = json.dumps({"meta": meta, "manifest": manifest}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for chunk in payload:
            fh.write(chunk)


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:5] != MODEL_MAGIC:
        raise DataError(f"{path}: bad magic, not a checkpoint container")
    (header_len,) = struct.unpack_from("<I", blob, 5)
    header = json.loads(blob[9 : 9 + header_len].decode("utf-8"))
    offset = 9 + header_len
    arrays = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays[entry["name"]] = arr.copy()
        offset += 8 * count
    if offset != len(blob):
        raise DataError(f"{path}: {len(blob) - offset} trailing bytes")
    return header["meta"], arrays
