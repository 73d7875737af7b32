"""
Model weight files (.uwm), ensemble manifests and dataset ingestion.

.uwm layout, all little-endian:
    magic      8 bytes  b"UWMODEL1"
    header     u32 layer count, then one record per layer:
                 u8 tag (0=dense, 1=relu, 2=softmax, 3=dropout)
                 dense:   u32 in_dim, u32 out_dim
                 dropout: f64 rate
    payload    per dense layer: f64 weights (row-major, out_dim x in_dim), then f64 biases
    trailer    u64 FNV-1a checksum of header + payload
"""
import csv
import json
import logging
import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from src.config import MANIFEST_NAME, MANIFEST_VERSION
from src.errors import (
    BadMagicError,
    ChecksumError,
    CsvParseError,
    DatasetError,
    EnsembleError,
    ModelBuildError,
    ModelFileError,
    TruncatedFileError,
    UnknownLayerTagError,
    ValidationError,
)
from src.nnengine import DENSE, DROPOUT, RELU, SOFTMAX, LayerSpec, build_sequential
from src.quantifiers import ProblemType
from src.utils import parse_dataset_spec

logger = logging.getLogger(__name__)

MAGIC = b"UWMODEL1"
LAYER_TAGS = {DENSE: 0, RELU: 1, SOFTMAX: 2, DROPOUT: 3}
TAG_KINDS = {tag: kind for kind, tag in LAYER_TAGS.items()}

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF
_TRAILER = struct.Struct("<Q")


def fnv1a64(data):
    value = FNV_OFFSET
    for byte in data:
        value ^= byte
        value = (value * FNV_PRIME) & _U64
    return value


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

def encode_model(model):
    header = bytearray(struct.pack("<I", len(model.layers)))
    payload = bytearray()
    for layer in model.layers:
        tag = LAYER_TAGS[layer.kind]
        if layer.kind == DENSE:
            header += struct.pack("<BII", tag, layer.in_dim, layer.out_dim)
            payload += np.ascontiguousarray(layer.weights, dtype="<f8").tobytes()
            payload += np.ascontiguousarray(layer.biases, dtype="<f8").tobytes()
        elif layer.kind == DROPOUT:
            header += struct.pack("<Bd", tag, layer.rate)
        else:
            header += struct.pack("<B", tag)
    body = bytes(header + payload)
    return MAGIC + body + _TRAILER.pack(fnv1a64(body))


def _read(data, fmt, offset, what):
    size = struct.calcsize(fmt)
    if offset + size > len(data):
        raise TruncatedFileError(f"File ends inside {what} at byte {offset}")
    return struct.unpack_from(fmt, data, offset), offset + size


def decode_model(data, seed=0, stochastic=True):
    minimum = len(MAGIC) + 4 + _TRAILER.size
    if len(data) < minimum:
        raise TruncatedFileError(f"File has {len(data)} bytes, a model file needs at least {minimum}")
    if data[:len(MAGIC)] != MAGIC:
        raise BadMagicError("Not a model file: bad magic bytes")

    offset = len(MAGIC)
    (count,), offset = _read(data, "<I", offset, "layer count")
    records = []
    for index in range(count):
        (tag,), offset = _read(data, "<B", offset, f"layer {index} tag")
        kind = TAG_KINDS.get(tag)
        if kind is None:
            raise UnknownLayerTagError(f"Layer {index}: unknown kind tag {tag}")
        if kind == DENSE:
            (in_dim, out_dim), offset = _read(data, "<II", offset, f"layer {index} dimensions")
            records.append((kind, in_dim, out_dim))
        elif kind == DROPOUT:
            (rate,), offset = _read(data, "<d", offset, f"layer {index} rate")
            records.append((kind, rate))
        else:
            records.append((kind,))

    payload_values = sum(r[1] * r[2] + r[2] for r in records if r[0] == DENSE)
    expected = offset + payload_values * 8 + _TRAILER.size
    if len(data) < expected:
        raise TruncatedFileError(f"File has {len(data)} bytes, header declares {expected}")
    if len(data) > expected:
        raise ModelFileError(f"File has {len(data) - expected} unexpected trailing bytes")

    (stored,) = _TRAILER.unpack_from(data, len(data) - _TRAILER.size)
    actual = fnv1a64(data[len(MAGIC):len(data) - _TRAILER.size])
    if stored != actual:
        raise ChecksumError(f"Checksum mismatch: stored {stored:#018x}, computed {actual:#018x}")

    specs = []
    for record in records:
        kind = record[0]
        if kind == DENSE:
            _, in_dim, out_dim = record
            weights = np.frombuffer(data, dtype="<f8", count=in_dim * out_dim, offset=offset)
            offset += in_dim * out_dim * 8
            biases = np.frombuffer(data, dtype="<f8", count=out_dim, offset=offset)
            offset += out_dim * 8
            specs.append(LayerSpec(DENSE, in_dim, out_dim,
                                   weights.astype(np.float64).reshape(out_dim, in_dim),
                                   biases.astype(np.float64)))
        elif kind == DROPOUT:
            specs.append(LayerSpec(DROPOUT, rate=record[1]))
        else:
            specs.append(LayerSpec(kind))

    try:
        return build_sequential(specs, seed=seed, stochastic=stochastic)
    except ModelBuildError as e:
        raise ModelFileError(f"Model file describes an invalid network: {e}") from e


def write_atomic(path, data):
    """
    Writes to a temp file next to path, then renames over it.
    """
    temp_path = f"{path}.tmp-{os.getpid()}"
    try:
        with open(temp_path, "wb") as handle:
            handle.write(data)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(temp_path, path)
    finally:
        if os.path.exists(temp_path):
            os.remove(temp_path)


def save_model(model, path):
    write_atomic(path, encode_model(model))
    logger.debug("Saved model to %s", path)


def load_model(path, seed=0, stochastic=True):
    with open(path, "rb") as handle:
        data = handle.read()
    return decode_model(data, seed=seed, stochastic=stochastic)


# ---------------------------------------------------------------------------
# Ensemble manifest
# ---------------------------------------------------------------------------

def write_manifest(directory, num_models, base_seed):
    manifest = {"version": MANIFEST_VERSION, "num_models": int(num_models), "base_seed": int(base_seed)}
    write_atomic(os.path.join(directory, MANIFEST_NAME), json.dumps(manifest, indent=2).encode("utf-8"))
    return manifest


def read_manifest(directory):
    path = os.path.join(directory, MANIFEST_NAME)
    try:
        with open(path, encoding="utf-8") as handle:
            manifest = json.load(handle)
    except FileNotFoundError:
        raise EnsembleError(f"No ensemble manifest at {path}")
    except json.JSONDecodeError as e:
        raise EnsembleError(f"Ensemble manifest {path} is not valid JSON: {e}")
    if manifest.get("version") != MANIFEST_VERSION:
        raise EnsembleError(f"Unsupported manifest version {manifest.get('version')} in {path}")
    for key in ("num_models", "base_seed"):
        if not isinstance(manifest.get(key), int):
            raise EnsembleError(f"Manifest {path} lacks integer field '{key}'")
    return manifest


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    problem_type: ProblemType = ProblemType.CLASSIFICATION
    num_classes: Optional[int] = None
    output_dim: Optional[int] = None

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise DatasetError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if self.problem_type == ProblemType.CLASSIFICATION and len(self.labels):
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise DatasetError(f"Labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.features)

    @property
    def num_features(self):
        return self.features.shape[1]

    @property
    def num_outputs(self):
        return self.num_classes if self.problem_type == ProblemType.CLASSIFICATION else self.output_dim


def generate_blobs(num_points, num_classes, spread, seed=0, num_features=2, radius=5.0):
    """
    Gaussian clusters, one per class. Centres sit on a circle of the given
    radius (first two features) at a seeded random phase; extra features get
    seeded offsets. Labels are balanced within one.
    """
    if num_classes < 2:
        raise ValidationError(f"num_classes must be >= 2, got {num_classes}")
    if not spread > 0:
        raise ValidationError(f"spread must be positive, got {spread}")
    if num_points < 1:
        raise ValidationError(f"num_points must be positive, got {num_points}")
    if num_features < 2:
        raise ValidationError(f"num_features must be >= 2, got {num_features}")

    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    angles = rng.uniform(0.0, 2.0 * np.pi) + 2.0 * np.pi * np.arange(num_classes) / num_classes
    centers = np.zeros((num_classes, num_features))
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    if num_features > 2:
        centers[:, 2:] = rng.normal(0.0, radius / 2.0, size=(num_classes, num_features - 2))

    labels = rng.permutation(np.arange(num_points) % num_classes)
    features = centers[labels] + rng.normal(0.0, spread, size=(num_points, num_features))
    return Dataset(features, labels.astype(np.int64), ProblemType.CLASSIFICATION, num_classes=num_classes)


@dataclass(frozen=True)
class CsvSchema:
    delimiter: str = ","
    label_column: str = "label"
    problem_type: ProblemType = ProblemType.CLASSIFICATION


def load_csv(path, schema=None):
    """
    Reads a CSV with a header row whose final column is the label.
    Errors name the 1-based file row and column of the offending cell.
    """
    schema = schema or CsvSchema()
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle, delimiter=schema.delimiter)
        header = next(reader, None)
        if not header:
            raise CsvParseError(f"{path}: header row required", row=1)
        header = [name.strip() for name in header]
        if header[-1] != schema.label_column:
            raise CsvParseError(f"{path}: missing label column '{schema.label_column}' as final column", row=1)

        rows = []
        row_numbers = []
        for row_number, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvParseError(
                    f"{path}: row {row_number} has {len(row)} cells, header has {len(header)}", row=row_number
                )
            values = []
            for column_number, cell in enumerate(row, start=1):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise CsvParseError(
                        f"{path}: cannot parse '{cell}' at row {row_number}, column {column_number}",
                        row=row_number, column=column_number,
                    )
            rows.append(values)
            row_numbers.append(row_number)

    num_features = len(header) - 1
    table = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    features = table[:, :num_features]
    raw_labels = table[:, num_features]

    if ProblemType(schema.problem_type) == ProblemType.REGRESSION:
        return Dataset(features, raw_labels.reshape(-1, 1), ProblemType.REGRESSION, output_dim=1)

    if not np.all(np.equal(np.mod(raw_labels, 1), 0)):
        bad = row_numbers[int(np.flatnonzero(np.mod(raw_labels, 1))[0])]
        raise CsvParseError(f"{path}: label at row {bad} is not an integer", row=bad, column=len(header))
    labels = raw_labels.astype(np.int64)
    if labels.size and labels.min() < 0:
        raise DatasetError(f"{path}: labels must be non-negative")
    num_classes = int(labels.max()) + 1 if labels.size else 0
    return Dataset(features, labels, ProblemType.CLASSIFICATION, num_classes=num_classes)


def resolve_dataset(spec, seed=0):
    """
    Builds a dataset from "blobs:<N>,<C>,<spread>" or a CSV path.
    """
    kind, value = parse_dataset_spec(spec)
    if kind == "blobs":
        num_points, num_classes, spread = value
        return generate_blobs(num_points, num_classes, spread, seed=seed)
    return load_csv(value)
