"""On-disk formats: FMAT matrices, label CSVs and model checkpoints.

FMAT layout (all little-endian)::

    b"FMAT" | u32 rows | u32 cols | rows*cols float32, row-major

Matrices are float32 on disk and float64 in memory.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .model import Head, Layer, Mlp

MAGIC = b"FMAT"
HEADER = struct.Struct("<4sII")
U32_MAX = 2**32 - 1
CHECKPOINT_FORMAT = "msdistill-checkpoint/1"


class FormatError(ValueError):
    pass


def encode_fmat(matrix):
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise FormatError(f"expected a matrix, got {m.ndim} dimensions")
    rows, cols = m.shape
    if rows > U32_MAX or cols > U32_MAX:
        raise FormatError(f"shape {m.shape} does not fit u32 dimensions")
    return HEADER.pack(MAGIC, rows, cols) + m.astype("<f4").tobytes(order="C")


def decode_fmat(data):
    if len(data) < HEADER.size:
        raise FormatError(f"truncated payload: {len(data)} bytes is shorter than the 12-byte header")
    magic, rows, cols = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    count = rows * cols
    if count > U32_MAX:
        raise FormatError(f"rows*cols overflow: {rows} x {cols}")
    expected = HEADER.size + 4 * count
    if len(data) < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes for {rows}x{cols}, got {len(data)}")
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after {rows}x{cols} payload")
    values = np.frombuffer(data, dtype="<f4", count=count, offset=HEADER.size)
    return values.astype(np.float64).reshape(rows, cols)


def write_fmat(path, matrix):
    Path(path).write_bytes(encode_fmat(matrix))


def read_fmat(path):
    return decode_fmat(Path(path).read_bytes())


def labels_to_csv(labels):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["index", "label"])
    for i, y in enumerate(np.asarray(labels, dtype=int)):
        writer.writerow([i, int(y)])
    return buf.getvalue()


def labels_from_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["index", "label"]:
        raise FormatError("label CSV must start with the header 'index,label'")
    labels = []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise FormatError(f"label CSV line {line}: expected 2 fields")
        idx, lab = int(row[0]), int(row[1])
        if idx != len(labels):
            raise FormatError(f"label CSV line {line}: index {idx} out of order")
        if lab < 0:
            raise FormatError(f"label CSV line {line}: negative class id")
        labels.append(lab)
    return np.array(labels, dtype=int)


def write_labels(path, labels):
    Path(path).write_text(labels_to_csv(labels))


def read_labels(path):
    return labels_from_csv(Path(path).read_text())


def one_hot(labels, n_classes=None):
    labels = np.asarray(labels, dtype=int)
    n = int(labels.max()) + 1 if n_classes is None else int(n_classes)
    if labels.size and labels.max() >= n:
        raise FormatError(f"class id {labels.max()} out of range for {n} classes")
    return np.eye(n)[labels]


def _param_file(name):
    return name.replace(".", "_") + ".fmat"


def save_checkpoint(directory, model):
    """Write each parameter as FMAT plus a ``header.json`` describing the model."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params = []
    for name, value in model.named_parameters().items():
        fname = _param_file(name)
        write_fmat(directory / fname, value if value.ndim == 2 else value[None, :])
        params.append({"name": name, "file": fname, "shape": list(value.shape)})
    header = {
        "format": CHECKPOINT_FORMAT,
        "input_dim": model.input_dim,
        "activations": [layer.activation for layer in model.layers],
        "heads": sorted(model.heads),
        "parameters": params,
    }
    (directory / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory):
    directory = Path(directory)
    header_path = directory / "header.json"
    if not header_path.exists():
        raise FileNotFoundError(f"no checkpoint header at {header_path}")
    header = json.loads(header_path.read_text())
    if header.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"unsupported checkpoint format {header.get('format')!r}")
    values = {}
    for p in header["parameters"]:
        m = read_fmat(directory / p["file"])
        values[p["name"]] = m.reshape(p["shape"])
    layers = [
        Layer(values[f"layers.{i}.W"], values[f"layers.{i}.b"], act) for i, act in enumerate(header["activations"])
    ]
    heads = {h: Head(values[f"heads.{h}.W"], values[f"heads.{h}.b"]) for h in header["heads"]}
    return Mlp(int(header["input_dim"]), layers, heads)


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def atomic_write_text(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
