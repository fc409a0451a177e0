"""Feature filtering and sentence serialization of telemetry windows."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SEPARATOR = " | "
VARIANCE_THRESHOLD = 0.01
CORRELATION_THRESHOLD = 0.95
DEFAULT_PRECISION = 4


class InsufficientDataError(ValueError):
    pass


class SerializationError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    """Row-major numeric matrix with named columns."""

    names: tuple[str, ...]
    values: np.ndarray
    _stats: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.names = tuple(self.names)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.names):
            raise ValueError(f"matrix shape {self.values.shape} does not match {len(self.names)} names")
        if len(set(self.names)) != len(self.names):
            raise ValueError("column names must be unique")
        if not np.isfinite(self.values).all():
            raise ValueError("feature matrix contains non-finite entries")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def mean(self) -> np.ndarray:
        if "mean" not in self._stats:
            self._stats["mean"] = self.values.mean(axis=0)
        return self._stats["mean"]

    def variance(self) -> np.ndarray:
        """Population variance per column."""
        if "var" not in self._stats:
            self._stats["var"] = self.values.var(axis=0)
        return self._stats["var"]

    def select(self, mask: Sequence[bool] | np.ndarray) -> "FeatureMatrix":
        mask = np.asarray(mask, dtype=bool)
        names = tuple(n for n, keep in zip(self.names, mask) if keep)
        return FeatureMatrix(names, self.values[:, mask])

    def columns(self, names: Sequence[str]) -> "FeatureMatrix":
        index = [self.names.index(n) for n in names]
        return FeatureMatrix(tuple(names), self.values[:, index])


@dataclass(frozen=True)
class SentenceRecord:
    text: str
    row: int
    label: str | None = None

    @property
    def digest(self) -> str:
        return sentence_digest(self.text)


def sentence_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def variance_filter(m: FeatureMatrix, threshold: float = VARIANCE_THRESHOLD) -> np.ndarray:
    """Keep columns whose population variance is at least ``threshold``."""
    if m.n_rows < 2:
        raise InsufficientDataError("variance filter needs at least two rows")
    return m.variance() >= threshold


def correlation_prune(m: FeatureMatrix, threshold: float = CORRELATION_THRESHOLD) -> np.ndarray:
    """Greedy schema-order pruning of columns too correlated with an earlier kept one."""
    if m.n_rows < 2:
        raise InsufficientDataError("correlation pruning needs at least two rows")
    var = m.variance()
    if (var <= 0).any():
        bad = [n for n, v in zip(m.names, var) if v <= 0]
        raise ValueError(f"zero-variance columns {bad}; apply variance_filter first")
    corr = np.corrcoef(m.values, rowvar=False)
    corr = np.atleast_2d(corr)
    kept: list[int] = []
    for j in range(len(m.names)):
        if all(abs(corr[j, i]) <= threshold for i in kept):
            kept.append(j)
    mask = np.zeros(len(m.names), dtype=bool)
    mask[kept] = True
    return mask


@dataclass(frozen=True)
class FeatureSchema:
    """Surviving column names plus the thresholds that produced them."""

    names: tuple[str, ...]
    variance_threshold: float = VARIANCE_THRESHOLD
    correlation_threshold: float = CORRELATION_THRESHOLD
    precision: int = DEFAULT_PRECISION
    source_names: tuple[str, ...] = ()

    def to_json(self) -> str:
        return json.dumps({
            "names": list(self.names),
            "variance_threshold": self.variance_threshold,
            "correlation_threshold": self.correlation_threshold,
            "precision": self.precision,
            "source_names": list(self.source_names),
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FeatureSchema":
        data = json.loads(text)
        return cls(tuple(data["names"]), data["variance_threshold"], data["correlation_threshold"],
                   data["precision"], tuple(data.get("source_names", ())))


def fit_schema(m: FeatureMatrix, variance_threshold: float = VARIANCE_THRESHOLD,
               correlation_threshold: float = CORRELATION_THRESHOLD,
               precision: int = DEFAULT_PRECISION) -> FeatureSchema:
    """Run both filters in order and return the surviving schema."""
    kept = m.select(variance_filter(m, variance_threshold))
    if not kept.names:
        raise InsufficientDataError("no column survives the variance filter")
    pruned = kept.select(correlation_prune(kept, correlation_threshold))
    return FeatureSchema(pruned.names, variance_threshold, correlation_threshold, precision, m.names)


def serialize_record(row: Sequence[float], schema: Sequence[str], precision: int = DEFAULT_PRECISION,
                     index: int = 0, label: str | None = None) -> SentenceRecord:
    if len(row) != len(schema):
        raise ValueError(f"row has {len(row)} values for {len(schema)} keys")
    parts = []
    for key, value in zip(schema, row):
        value = float(value)
        if not math.isfinite(value):
            raise SerializationError(f"non-finite value for {key!r} in row {index}")
        text = f"{value:.{precision}f}"
        if text.startswith("-") and float(text) == 0.0:
            text = text[1:]  # "-0.0000" and "0.0000" would otherwise differ
        parts.append(f"{key}={text}")
    return SentenceRecord(SEPARATOR.join(parts), index, label)


def serialize_matrix(m: FeatureMatrix, schema: FeatureSchema,
                     labels: Sequence[str] | None = None) -> list[SentenceRecord]:
    sub = m.columns(schema.names)
    return [serialize_record(row, schema.names, schema.precision, i,
                             labels[i] if labels is not None else None)
            for i, row in enumerate(sub.values)]


def parse_sentence(text: str) -> dict[str, str]:
    """Split a serialized sentence back into its key/value pairs."""
    out: dict[str, str] = {}
    for part in text.split(SEPARATOR):
        key, _, value = part.partition("=")
        out[key] = value
    return out


def write_sentences(records: Iterable[SentenceRecord], path: str | Path,
                    label_path: str | Path | None = None) -> None:
    """One sentence per line; labels go to a separate side-channel file."""
    records = list(records)
    Path(path).write_text("".join(r.text + "\n" for r in records), encoding="utf-8")
    if label_path is not None:
        Path(label_path).write_text("".join(f"{r.label or ''}\n" for r in records), encoding="utf-8")


def read_sentences(path: str | Path) -> list[SentenceRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [SentenceRecord(text, i) for i, text in enumerate(lines) if text]


def read_telemetry(path: str | Path) -> tuple[FeatureMatrix, dict]:
    """Load telemetry written as JSON Lines or CSV (manifest line first)."""
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith(".csv"):
        lines = text.splitlines()
        manifest = {}
        if lines and lines[0].startswith("# "):
            manifest = json.loads(lines[0][2:])
            lines = lines[1:]
        reader = csv.reader(io.StringIO("\n".join(lines)))
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
        return FeatureMatrix(tuple(header), np.array(rows).reshape(-1, len(header))), manifest
    manifest: dict = {}
    names: tuple[str, ...] | None = None
    rows = []
    for line in text.splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        if "manifest" in obj and len(obj) == 1:
            manifest = obj["manifest"]
            continue
        if names is None:
            names = tuple(obj)
        rows.append([float(obj[n]) for n in names])
    if names is None:
        raise InsufficientDataError(f"{path} holds no telemetry records")
    return FeatureMatrix(names, np.array(rows)), manifest
