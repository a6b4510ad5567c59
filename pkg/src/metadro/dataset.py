"""Embedding record storage, file formats, class strata and text cleaning."""
from __future__ import annotations

import csv
import io
import json
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Mapping, Sequence

import numpy as np

from metadro.errors import IngestError, StratumError

STORE_MAGIC = b"MSHF"
FORMAT_VERSION = 1
FORMATS = ("csv", "jsonl", "binary")


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    id: str
    patient_id: str | None
    vector: np.ndarray
    label: str
    group: str = ""

    def __post_init__(self):
        vec = np.array(self.vector, dtype=np.float64).ravel()
        vec.flags.writeable = False
        object.__setattr__(self, "vector", vec)
        if not self.patient_id:
            object.__setattr__(self, "patient_id", None)
        if not self.label:
            raise IngestError(f"record {self.id!r}: empty class label")
        if not self.group:
            object.__setattr__(self, "group", self.label)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.patient_id == other.patient_id
            and self.label == other.label
            and self.group == other.group
            and np.array_equal(self.vector, other.vector)
        )


class EmbeddingStore:
    """Validated, immutable collection of records with class and group indices."""

    def __init__(self, records: Iterable[EmbeddingRecord], dim: int | None = None):
        self.records: tuple[EmbeddingRecord, ...] = tuple(records)
        if dim is None:
            dim = self.records[0].vector.size if self.records else 0
        self.dim = int(dim)
        seen: set[str] = set()
        for r in self.records:
            if r.vector.size != self.dim:
                raise IngestError(
                    f"record {r.id!r} has dimension {r.vector.size}, expected {self.dim}"
                )
            if r.id in seen:
                raise IngestError(f"duplicate record id {r.id!r}")
            seen.add(r.id)

        self.vectors = np.stack([r.vector for r in self.records]) if self.records else np.zeros((0, self.dim))
        self.vectors.flags.writeable = False
        self.ids = [r.id for r in self.records]
        self.labels = [r.label for r in self.records]
        self.groups = [r.group for r in self.records]
        self.class_index = _index(self.labels)
        self.group_index = _index(self.groups)

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingStore):
            return NotImplemented
        return self.dim == other.dim and self.records == other.records

    @property
    def classes(self) -> list[str]:
        return sorted(self.class_index)

    def class_counts(self) -> dict[str, int]:
        return {c: len(self.class_index[c]) for c in self.classes}

    def group_counts(self) -> dict[str, int]:
        return {g: len(self.group_index[g]) for g in sorted(self.group_index)}

    def subset(self, indices: Iterable[int]) -> "EmbeddingStore":
        return EmbeddingStore([self.records[i] for i in indices], dim=self.dim)

    def restrict_classes(self, classes: Iterable[str]) -> "EmbeddingStore":
        keep = set(classes)
        return self.subset(i for i, lab in enumerate(self.labels) if lab in keep)


def _index(keys: Sequence[str]) -> dict[str, tuple[int, ...]]:
    out: dict[str, list[int]] = {}
    for i, k in enumerate(keys):
        out.setdefault(k, []).append(i)
    return {k: tuple(v) for k, v in out.items()}


# ------------------------------------------------------------------ formats


def infer_format(path: str | Path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".csv":
        return "csv"
    if suffix in (".jsonl", ".json"):
        return "jsonl"
    if suffix in (".bin", ".mshf"):
        return "binary"
    raise IngestError(f"cannot infer store format from {str(path)!r}; pass one of {FORMATS}")


def _norm_format(fmt: str | None, path) -> str:
    if fmt is None:
        return infer_format(path)
    fmt = {"bin": "binary"}.get(fmt, fmt)
    if fmt not in FORMATS:
        raise IngestError(f"unknown store format {fmt!r}")
    return fmt


def load_store(path: str | Path, format: str | None = None) -> EmbeddingStore:
    """Read and validate a store file (csv, jsonl or binary)."""
    fmt = _norm_format(format, path)
    path = Path(path)
    if fmt == "binary":
        with path.open("rb") as fh:
            return _read_binary(fh)
    with path.open("r", encoding="utf-8", newline="") as fh:
        return _read_csv(fh) if fmt == "csv" else _read_jsonl(fh)


def write_store(store: EmbeddingStore, path: str | Path, format: str | None = None) -> None:
    fmt = _norm_format(format, path)
    path = Path(path)
    if fmt == "binary":
        path.write_bytes(store_to_bytes(store))
        return
    with path.open("w", encoding="utf-8", newline="") as fh:
        if fmt == "csv":
            _write_csv(store, fh)
        else:
            _write_jsonl(store, fh)


def _write_csv(store: EmbeddingStore, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["id", "patient_id", "label", "group"] + [f"v{i}" for i in range(store.dim)])
    for r in store.records:
        w.writerow([r.id, r.patient_id or "", r.label, r.group] + [repr(float(v)) for v in r.vector])


def _read_csv(fh) -> EmbeddingStore:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise IngestError("empty CSV file (missing header)") from None
    if header[:4] != ["id", "patient_id", "label", "group"]:
        raise IngestError(f"bad CSV header {header[:4]}")
    dim = len(header) - 4
    records = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) < 4:
            raise IngestError(f"line {lineno}: too few columns")
        rid = row[0]
        if len(row) - 4 != dim:
            raise IngestError(f"record {rid!r} has dimension {len(row) - 4}, expected {dim}")
        try:
            vec = [float(v) for v in row[4:]]
        except ValueError as exc:
            raise IngestError(f"record {rid!r}: {exc}") from None
        records.append(EmbeddingRecord(rid, row[1] or None, vec, row[2], row[3]))
    return EmbeddingStore(records, dim=dim)


def _write_jsonl(store: EmbeddingStore, fh) -> None:
    for r in store.records:
        obj = {
            "id": r.id,
            "patient_id": r.patient_id,
            "label": r.label,
            "group": r.group,
            "vector": [float(v) for v in r.vector],
        }
        fh.write(json.dumps(obj) + "\n")


def _read_jsonl(fh) -> EmbeddingStore:
    records = []
    for lineno, line in enumerate(fh, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            records.append(
                EmbeddingRecord(
                    str(obj["id"]), obj.get("patient_id"), obj["vector"], obj["label"], obj.get("group") or ""
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, IngestError):
                raise
            raise IngestError(f"line {lineno}: {exc}") from None
    return EmbeddingStore(records)


# binary helpers, shared with parameter checkpoints


def write_str(buf: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def read_exact(fh: BinaryIO, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise IngestError("truncated binary file")
    return raw


def read_str(fh: BinaryIO) -> str:
    (n,) = struct.unpack("<I", read_exact(fh, 4))
    return read_exact(fh, n).decode("utf-8")


def read_header(fh: BinaryIO, magic: bytes) -> None:
    head = fh.read(5)
    if head[:4] != magic:
        raise IngestError(f"bad magic {head[:4]!r}, expected {magic!r}")
    if len(head) < 5 or head[4] != FORMAT_VERSION:
        raise IngestError(f"unsupported format version {head[4:5]!r}")


def store_to_bytes(store: EmbeddingStore) -> bytes:
    buf = io.BytesIO()
    buf.write(STORE_MAGIC + bytes([FORMAT_VERSION]))
    buf.write(struct.pack("<II", len(store), store.dim))
    for r in store.records:
        for s in (r.id, r.patient_id or "", r.label, r.group):
            write_str(buf, s)
        buf.write(np.asarray(r.vector, dtype="<f8").tobytes())
    return buf.getvalue()


def _read_binary(fh: BinaryIO) -> EmbeddingStore:
    read_header(fh, STORE_MAGIC)
    count, dim = struct.unpack("<II", read_exact(fh, 8))
    records = []
    for _ in range(count):
        rid, pid, label, group = (read_str(fh) for _ in range(4))
        vec = np.frombuffer(read_exact(fh, 8 * dim), dtype="<f8")
        records.append(EmbeddingRecord(rid, pid or None, vec, label, group))
    return EmbeddingStore(records, dim=dim)


# ------------------------------------------------------------------- strata


@dataclass(frozen=True)
class StratumSpec:
    """Frequency stratum: ``popular``, ``semi_rare`` or ``random``."""

    kind: str
    top_count: int = 50
    min_notes: int = 10

    def __post_init__(self):
        if self.kind not in ("popular", "semi_rare", "random"):
            raise ValueError(f"unknown stratum kind {self.kind!r}")
        if self.top_count < 1:
            raise ValueError("top_count must be >= 1")
        if self.min_notes < 0:
            raise ValueError("min_notes must be >= 0")


def select_classes(store: EmbeddingStore | Mapping[str, int], spec: StratumSpec) -> list[str]:
    """Pick the class labels of a frequency stratum.

    ``popular`` takes the ``top_count`` most frequent classes. ``semi_rare``
    keeps classes with more than ``min_notes`` records and takes the
    ``top_count`` least frequent of those. ``random`` returns every class
    passing the ``min_notes`` filter. Ties are broken by label.
    """
    counts = store.class_counts() if isinstance(store, EmbeddingStore) else dict(store)
    if not counts:
        raise StratumError("store is empty")
    if spec.kind == "popular":
        chosen = sorted(counts, key=lambda c: (-counts[c], c))[: spec.top_count]
    else:
        pool = [c for c in counts if counts[c] > spec.min_notes]
        if spec.kind == "semi_rare":
            chosen = sorted(pool, key=lambda c: (counts[c], c))[: spec.top_count]
        else:
            chosen = sorted(pool)
    if not chosen:
        raise StratumError(f"no class has more than {spec.min_notes} records")
    return chosen


def cap_per_class(
    store: EmbeddingStore, cap: int, per_patient_cap: int | None = None, seed: int = 0
) -> EmbeddingStore:
    """Subsample every class to at most ``cap`` records.

    With ``per_patient_cap``, records beyond that many per (class, patient)
    are dropped first, keeping the ones that come earliest in the store.
    Records without a patient id are never dropped by that rule.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    rng = np.random.default_rng(seed)
    keep: list[int] = []
    for label in store.classes:
        idx = list(store.class_index[label])
        if per_patient_cap is not None:
            seen: Counter = Counter()
            kept = []
            for i in idx:
                pid = store.records[i].patient_id
                if pid is not None:
                    seen[pid] += 1
                    if seen[pid] > per_patient_cap:
                        continue
                kept.append(i)
            idx = kept
        if len(idx) > cap:
            idx = sorted(rng.choice(idx, size=cap, replace=False).tolist())
        keep.extend(idx)
    return store.subset(sorted(keep))


# --------------------------------------------------------------------- text

_TOKEN = re.compile(r"[^\W_]+")


def clean_text(text: str, stopwords: Iterable[str] = (), max_tokens: int = 512) -> str:
    """Lowercase, strip non-alphanumerics, drop stopwords, truncate.

    >>> clean_text("The BP was 140/90!!", {"the", "was"})
    'bp 140 90'
    """
    stop = {w.lower() for w in stopwords}
    tokens = [t for t in _TOKEN.findall(text.lower()) if t not in stop]
    return " ".join(tokens[:max_tokens])
