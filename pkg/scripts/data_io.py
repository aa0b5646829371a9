#!/usr/bin/env python3
"""
Datasets, Splits and File Formats

- Task specifications (eyelid measurements in mm) and synthetic data drawn
  from truncated normals with a recoverable linear feature lift
- 90/10 train+val/test split, then 80/20 train/val
- Target CSV (``id,task,value_mm``) and the FPFT binary feature format:
  b"FPFT", uint32 LE ndim, ndim uint32 LE dims, row-major float32 LE data
"""

import csv
import math
import os
import struct
from pathlib import Path

import numpy as np
import pandas as pd

import tensor as T
from errors import (
    ConfigurationError,
    EmptyTensorError,
    FormatError,
    ParameterError,
    ParseError,
    SchemaError,
    TruncationError,
)

CSV_HEADER = ["id", "task", "value_mm"]
FPFT_MAGIC = b"FPFT"


class TaskSpec:
    def __init__(self, name, mean, sd, lo, hi):
        if not sd > 0 or not lo < mean < hi:
            raise ConfigurationError(
                f"degenerate task spec {name}: need sd > 0 and lo < mean < hi, got "
                f"mean={mean} sd={sd} range=[{lo}, {hi}]"
            )
        self.name = name
        self.mean = float(mean)
        self.sd = float(sd)
        self.lo = float(lo)
        self.hi = float(hi)

    def contains(self, values):
        v = np.asarray(values, dtype=np.float64)
        return (v >= self.lo) & (v <= self.hi)

    def truncated_mean(self):
        """Mean of normal(mean, sd) truncated to [lo, hi]"""
        a = (self.lo - self.mean) / self.sd
        b = (self.hi - self.mean) / self.sd
        pdf = lambda z: math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
        cdf = lambda z: 0.5 * (1 + math.erf(z / math.sqrt(2)))
        return self.mean + self.sd * (pdf(a) - pdf(b)) / (cdf(b) - cdf(a))

    def __repr__(self):
        return f"TaskSpec({self.name}, mean={self.mean}, sd={self.sd}, range=[{self.lo}, {self.hi}])"


TASKS = {
    "MRD1": TaskSpec("MRD1", 2.59, 1.21, 0.0, 6.0),
    "MRD2": TaskSpec("MRD2", 5.51, 0.83, 1.5, 10.0),
    "LF": TaskSpec("LF", 12.1, 2.12, 3.5, 18.0),
}


def get_task(name):
    if name not in TASKS:
        raise SchemaError(f"unknown task '{name}'. Available: {sorted(TASKS)}")
    return TASKS[name]


class Dataset:
    """Inputs (features n×d or images n×C×H×W) with n×1 targets in mm"""

    def __init__(self, inputs, targets, task, provenance="synthetic"):
        inputs = np.asarray(inputs, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
        if len(inputs) != len(targets) or len(targets) < 1:
            raise ConfigurationError(f"dataset needs matching non-empty inputs and targets, got "
                                     f"{len(inputs)} and {len(targets)}")
        self.inputs = inputs
        self.targets = targets
        self.task = task
        self.provenance = provenance

    @property
    def is_image(self):
        return self.inputs.ndim == 4

    def __len__(self):
        return len(self.targets)

    def subset(self, indices):
        return Dataset(self.inputs[indices], self.targets[indices], self.task, self.provenance)


class SplitIndices:
    def __init__(self, train, val, test):
        self.train = np.asarray(train, dtype=np.int64)
        self.val = np.asarray(val, dtype=np.int64)
        self.test = np.asarray(test, dtype=np.int64)

    def sizes(self):
        return {"train": len(self.train), "val": len(self.val), "test": len(self.test)}

    def __repr__(self):
        return f"SplitIndices({self.sizes()})"


def _truncated_normal(spec, n, rng):
    accepted = []
    count = 0
    while count < n:
        draw = rng.normal(spec.mean, spec.sd, size=max(2 * (n - count), 64))
        keep = draw[spec.contains(draw)]
        accepted.append(keep)
        count += len(keep)
    return np.concatenate(accepted)[:n]


def synth_generate(spec, n, d=32, noise=0.05, seed=0):
    """Features are z·u + noise·ε with z the standardised target and u a seeded lift"""
    if n < 1 or d < 1:
        raise ConfigurationError(f"need n >= 1 and d >= 1, got n={n} d={d}")
    if not noise >= 0:
        raise ParameterError(f"noise must be >= 0, got {noise}")
    rng = np.random.default_rng(seed)
    targets = _truncated_normal(spec, n, rng)
    lift = rng.normal(size=d)
    z = (targets - spec.mean) / spec.sd
    features = np.outer(z, lift) + noise * rng.normal(size=(n, d))
    return Dataset(features, targets, spec.name)


def synth_generate_images(spec, n, size=16, noise=0.05, seed=0):
    """
    Single-channel images with a bright top band whose height is proportional
    to the target (fractional edge row), plus Gaussian noise.
    """
    if n < 1 or size < 4:
        raise ConfigurationError(f"need n >= 1 and size >= 4, got n={n} size={size}")
    rng = np.random.default_rng(seed)
    targets = _truncated_normal(spec, n, rng)
    height = (targets - spec.lo) / (spec.hi - spec.lo) * size
    rows = np.arange(size)
    band = np.clip(height[:, None] - rows[None, :], 0.0, 1.0)
    images = np.repeat(band[:, :, None], size, axis=2)[:, None, :, :]
    images = images + noise * rng.normal(size=images.shape)
    return Dataset(images, targets, spec.name)


def split_sizes(n):
    trainval = (9 * n + 5) // 10
    val = (2 * trainval + 5) // 10
    return {"train": trainval - val, "val": val, "test": n - trainval}


def split(n, seed=0):
    if n < 10:
        raise ConfigurationError(f"need at least 10 samples to split, got {n}")
    sizes = split_sizes(n)
    order = np.random.default_rng(seed).permutation(n)
    n_val = sizes["val"]
    trainval = sizes["train"] + n_val
    return SplitIndices(order[n_val:trainval], order[:n_val], order[trainval:])


# ---------------------------------------------------------------------------
# target CSV

def save_targets_csv(path, values, task, ids=None):
    spec = get_task(task)
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    ids = list(range(1, len(values) + 1)) if ids is None else list(ids)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row_id, value in zip(ids, values):
            writer.writerow([row_id, spec.name, f"{value:.9g}"])
    return path


def load_targets_csv(path):
    """
    Returns (accepted rows as a DataFrame, rejected rows as a list of dicts).

    Rows outside their task's range are rejected, not raised; malformed rows
    raise ParseError with the file line number (header is line 1).
    """
    path = Path(path)
    accepted, rejected = [], []
    with path.open(newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or list(reader.fieldnames) != CSV_HEADER:
            raise SchemaError(f"expected header {','.join(CSV_HEADER)}, got {reader.fieldnames}")
        for row_index, row in enumerate(reader):
            line_num = reader.line_num
            if None in row or any(row.get(col) in (None, "") for col in CSV_HEADER):
                raise ParseError("expected exactly 3 non-empty fields", line=line_num)
            try:
                row_id = int(row["id"])
            except ValueError:
                raise ParseError(f"id '{row['id']}' is not an integer", line=line_num) from None
            try:
                value = float(row["value_mm"])
            except ValueError:
                raise ParseError(f"value '{row['value_mm']}' is not a number", line=line_num) from None
            if not math.isfinite(value):
                raise ParseError(f"value '{row['value_mm']}' is not finite", line=line_num)
            spec = TASKS.get(row["task"])
            if spec is None:
                raise SchemaError(f"line {line_num}: unknown task '{row['task']}'. Available: {sorted(TASKS)}")
            record = {"id": row_id, "task": spec.name, "value_mm": value, "line": line_num, "row": row_index}
            if spec.contains(value):
                accepted.append(record)
            else:
                record["reason"] = f"outside [{spec.lo:.2f}, {spec.hi:.2f}]"
                rejected.append(record)
    frame = pd.DataFrame(accepted, columns=["id", "task", "value_mm", "line", "row"])
    return frame, rejected


# ---------------------------------------------------------------------------
# FPFT binary features

def save_features_bin(path, array):
    data = np.asarray(array.data if isinstance(array, T.Tensor) else array)
    if data.ndim == 0 or data.size == 0:
        raise EmptyTensorError(f"refusing to write an empty tensor of shape {data.shape}")
    header = FPFT_MAGIC + struct.pack("<I", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    return path


def parse_features_bin(raw):
    if len(raw) < 4 or raw[:4] != FPFT_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}; expected {FPFT_MAGIC!r}")
    if len(raw) < 8:
        raise TruncationError("file ends inside the dimension count")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    if ndim == 0:
        raise EmptyTensorError("header declares zero dimensions")
    header_len = 8 + 4 * ndim
    if len(raw) < header_len:
        raise TruncationError(f"header declares {ndim} dims but the file ends after {len(raw)} bytes")
    dims = struct.unpack_from(f"<{ndim}I", raw, 8)
    if 0 in dims:
        raise EmptyTensorError(f"header declares an empty shape {list(dims)}")
    payload = raw[header_len:]
    expected = 4 * int(np.prod(dims, dtype=np.int64))
    if len(payload) < expected:
        raise TruncationError(f"shape {list(dims)} needs {expected} data bytes, found {len(payload)}")
    if len(payload) > expected:
        raise FormatError(f"{len(payload) - expected} trailing bytes after shape {list(dims)}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)


def load_features_bin(path):
    with open(path, "rb") as f:
        return T.Tensor(parse_features_bin(f.read()))


def load_dataset(targets_csv, features_bin):
    """
    Dataset from a target CSV and an FPFT feature file whose rows follow the
    CSV data rows (rejected rows are dropped from both).
    """
    frame, rejected = load_targets_csv(targets_csv)
    if frame.empty:
        raise ConfigurationError(f"no usable rows in {targets_csv} ({len(rejected)} rejected)")
    tasks = frame["task"].unique()
    if len(tasks) != 1:
        raise ConfigurationError(f"a dataset holds one task; {targets_csv} has {list(tasks)}")
    features = load_features_bin(features_bin).data
    total_rows = len(frame) + len(rejected)
    if features.shape[0] != total_rows:
        raise ConfigurationError(f"{features_bin} has {features.shape[0]} rows, CSV has {total_rows}")
    inputs = features[frame["row"].to_numpy()]
    return Dataset(inputs, frame["value_mm"].to_numpy(), tasks[0], provenance="file"), rejected
