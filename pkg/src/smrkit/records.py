"""Data model, ingestion and persistence for perception, feature and bitrate records.

Quality levels are plain integer QPs. ``ORIGINAL`` (qp 0) denotes the
uncompressed variant and sorts before every coded level.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence, Union

ORIGINAL = 0

CLASSIFICATION = "classification"
DETECTION = "detection"
TASKS = (CLASSIFICATION, DETECTION)

# record kinds accepted by ingest()
KINDS = (CLASSIFICATION, DETECTION, "feature", "bitrate")


class RecordError(ValueError):
    """Raised when an input record violates its schema or an invariant."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


def level_name(qp: int) -> str:
    return "ORIGINAL" if qp == ORIGINAL else f"qp{qp}"


@dataclass(frozen=True)
class QpLadder:
    """Coded quality levels in ascending degradation order (ORIGINAL excluded)."""

    levels: tuple[int, ...]

    def __post_init__(self):
        levels = tuple(int(q) for q in self.levels)
        object.__setattr__(self, "levels", levels)
        if not levels:
            raise RecordError("QP ladder is empty")
        if any(q <= ORIGINAL for q in levels):
            raise RecordError(f"coded QPs must be positive, got {levels}")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise RecordError(f"QP ladder must be strictly increasing, got {levels}")

    @classmethod
    def from_range(cls, lo: int, hi: int) -> "QpLadder":
        return cls(tuple(range(lo, hi + 1)))

    @property
    def all_levels(self) -> tuple[int, ...]:
        """ORIGINAL followed by every coded level."""
        return (ORIGINAL,) + self.levels

    def index(self, qp: int) -> int:
        return self.levels.index(qp)

    def __len__(self) -> int:
        return len(self.levels)

    def __iter__(self) -> Iterator[int]:
        return iter(self.levels)

    def __contains__(self, qp: object) -> bool:
        return qp == ORIGINAL or qp in self.levels


@dataclass(frozen=True)
class ClassificationPrediction:
    ranked_categories: tuple[int, ...]

    def __post_init__(self):
        cats = tuple(int(c) for c in self.ranked_categories)
        object.__setattr__(self, "ranked_categories", cats)
        if not cats:
            raise RecordError("classification ranking is empty")
        if len(set(cats)) != len(cats):
            raise RecordError(f"duplicate category ids in ranking {cats}")

    @property
    def top1(self) -> int:
        return self.ranked_categories[0]

    def topk(self, k: int) -> tuple[int, ...]:
        return self.ranked_categories[:k]


@dataclass(frozen=True)
class Detection:
    bbox: tuple[float, float, float, float]
    category: int
    confidence: float

    def __post_init__(self):
        if len(self.bbox) != 4:
            raise RecordError(f"bbox needs 4 values (x, y, w, h), got {self.bbox!r}")
        bbox = tuple(float(v) for v in self.bbox)
        object.__setattr__(self, "bbox", bbox)
        object.__setattr__(self, "category", int(self.category))
        object.__setattr__(self, "confidence", float(self.confidence))
        if not all(math.isfinite(v) for v in bbox):
            raise RecordError(f"non-finite bbox {bbox}")
        if bbox[2] <= 0 or bbox[3] <= 0:
            raise RecordError(f"bbox width and height must be positive, got {bbox}")
        if not 0.0 <= self.confidence <= 1.0:
            raise RecordError(f"confidence {self.confidence} outside [0, 1]")


Payload = Union[ClassificationPrediction, tuple[Detection, ...]]


@dataclass(frozen=True)
class PerceptionRecord:
    machine: str
    image: str
    qp: int
    payload: Payload

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.machine, self.image, self.qp)

    @property
    def task(self) -> str:
        if isinstance(self.payload, ClassificationPrediction):
            return CLASSIFICATION
        return DETECTION


@dataclass(frozen=True)
class FeatureRecord:
    extractor: str
    image: str
    qp: int
    vector: tuple[float, ...]

    def __post_init__(self):
        vec = tuple(float(v) for v in self.vector)
        object.__setattr__(self, "vector", vec)
        if not vec:
            raise RecordError("feature vector is empty")
        if not all(math.isfinite(v) for v in vec):
            raise RecordError("feature vector has non-finite entries")
        if not any(vec):
            raise RecordError("feature vector has zero norm")

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.extractor, self.image, self.qp)


@dataclass(frozen=True)
class BitrateRecord:
    image: str
    qp: int
    bpp: float

    def __post_init__(self):
        object.__setattr__(self, "bpp", float(self.bpp))
        if not (math.isfinite(self.bpp) and self.bpp > 0):
            raise RecordError(f"bpp must be positive, got {self.bpp}")
        if self.qp == ORIGINAL:
            raise RecordError("bitrates are only defined for coded levels")

    @property
    def key(self) -> tuple[str, int]:
        return (self.image, self.qp)


@dataclass(frozen=True)
class DatasetManifest:
    task: str
    ladder: QpLadder
    machines: tuple[str, ...]
    images: tuple[str, ...]

    def __post_init__(self):
        if self.task not in TASKS:
            raise RecordError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if not isinstance(self.ladder, QpLadder):
            object.__setattr__(self, "ladder", QpLadder(tuple(self.ladder)))
        object.__setattr__(self, "machines", tuple(self.machines))
        object.__setattr__(self, "images", tuple(self.images))
        if not self.machines:
            raise RecordError("manifest declares no machines")
        for name, ids in (("machine", self.machines), ("image", self.images)):
            if len(set(ids)) != len(ids):
                raise RecordError(f"duplicate {name} ids in manifest")

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "ladder": list(self.ladder.levels),
            "machines": list(self.machines),
            "images": list(self.images),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "DatasetManifest":
        try:
            return cls(
                task=data["task"],
                ladder=QpLadder(tuple(data["ladder"])),
                machines=tuple(str(m) for m in data["machines"]),
                images=tuple(str(i) for i in data.get("images", ())),
            )
        except KeyError as exc:
            raise RecordError(f"manifest is missing field {exc.args[0]!r}") from None


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Read a manifest from JSON or YAML (chosen by suffix)."""
    path = Path(path)
    if not path.exists():
        raise RecordError("manifest not found", str(path))
    text = path.read_text()
    if path.suffix.lower() in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise RecordError("manifest must be a mapping", str(path))
    return DatasetManifest.from_dict(data)


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    atomic_write_text(path, json.dumps(manifest.to_dict(), indent=2) + "\n")


class RecordCollection(Mapping):
    """Immutable, key-indexed set of records of one kind.

    Equality is set equality over records, so input order never matters.
    """

    def __init__(self, kind: str, records: Iterable = ()):
        if kind not in KINDS:
            raise RecordError(f"unknown record kind {kind!r}")
        self.kind = kind
        index: dict = {}
        dim = None
        for rec in records:
            if rec.key in index:
                raise RecordError(f"duplicate record key {format_key(rec.key)}")
            if kind == "feature":
                if dim is None:
                    dim = len(rec.vector)
                elif len(rec.vector) != dim:
                    raise RecordError(
                        f"dimension mismatch for {format_key(rec.key)}: "
                        f"expected {dim}, got {len(rec.vector)}"
                    )
            elif kind in TASKS and rec.task != kind:
                raise RecordError(f"record {format_key(rec.key)} is not a {kind} record")
            index[rec.key] = rec
        self._index = dict(sorted(index.items()))
        self.dim = dim

    def __getitem__(self, key):
        return self._index[key]

    def __iter__(self):
        return iter(self._index)

    def __len__(self):
        return len(self._index)

    def __eq__(self, other):
        if not isinstance(other, RecordCollection):
            return NotImplemented
        return self.kind == other.kind and self._index == other._index

    def __hash__(self):
        return hash((self.kind, frozenset(self._index.items())))

    def __repr__(self):
        return f"RecordCollection(kind={self.kind!r}, n={len(self)})"

    def records(self) -> list:
        return list(self._index.values())

    def merge(self, *others: "RecordCollection") -> "RecordCollection":
        recs = self.records()
        for other in others:
            if other.kind != self.kind:
                raise RecordError(f"cannot merge {other.kind} records into {self.kind}")
            recs.extend(other.records())
        return RecordCollection(self.kind, recs)


def format_key(key: tuple) -> str:
    parts = [level_name(p) if isinstance(p, int) else str(p) for p in key]
    return "(" + ", ".join(parts) + ")"


# ---------------------------------------------------------------------------
# parsing


def _require(obj: Mapping, field_name: str, types):
    if field_name not in obj:
        raise RecordError(f"missing field {field_name!r}")
    value = obj[field_name]
    if not isinstance(value, types) or isinstance(value, bool):
        raise RecordError(f"field {field_name!r} has wrong type {type(value).__name__}")
    return value


def parse_record(obj: Mapping, kind: str):
    if not isinstance(obj, Mapping):
        raise RecordError("record is not a JSON object")
    qp = _require(obj, "qp", int)
    if qp < 0:
        raise RecordError(f"qp must be >= 0, got {qp}")
    image = str(_require(obj, "image", (str, int)))
    if kind == CLASSIFICATION:
        topk = _require(obj, "topk", list)
        if not all(isinstance(c, int) and not isinstance(c, bool) for c in topk):
            raise RecordError("topk must be a list of integer category ids")
        return PerceptionRecord(
            str(_require(obj, "machine", (str, int))), image, qp, ClassificationPrediction(tuple(topk))
        )
    if kind == DETECTION:
        dets = []
        for d in _require(obj, "dets", list):
            if not isinstance(d, Mapping):
                raise RecordError("each detection must be an object")
            bbox = _require(d, "bbox", list)
            dets.append(Detection(tuple(bbox), _require(d, "cat", int), _require(d, "conf", (int, float))))
        return PerceptionRecord(str(_require(obj, "machine", (str, int))), image, qp, tuple(dets))
    if kind == "feature":
        vec = _require(obj, "vec", list)
        return FeatureRecord(str(_require(obj, "extractor", (str, int))), image, qp, tuple(vec))
    raise RecordError(f"kind {kind!r} is not a JSONL kind")


def _check_manifest(rec, manifest: DatasetManifest | None):
    if manifest is None:
        return
    machine = getattr(rec, "machine", None) or getattr(rec, "extractor", None)
    if isinstance(rec, PerceptionRecord) and machine not in manifest.machines:
        raise RecordError(f"unknown machine {machine!r}")
    if manifest.images and rec.image not in manifest.images:
        raise RecordError(f"unknown image {rec.image!r}")
    if rec.qp not in manifest.ladder:
        raise RecordError(f"qp {rec.qp} is not in the manifest ladder")


def iter_jsonl(path: str | os.PathLike) -> Iterator[tuple[int, dict]]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"malformed JSON ({exc.msg})", str(path), lineno) from None


def read_bitrate_csv(path: str | os.PathLike) -> Iterator[tuple[int, BitrateRecord]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"image", "qp", "bpp"} <= set(reader.fieldnames):
            raise RecordError("bitrate CSV needs header image,qp,bpp", str(path), 1)
        for row in reader:
            lineno = reader.line_num
            try:
                yield lineno, BitrateRecord(row["image"], int(row["qp"]), float(row["bpp"]))
            except (TypeError, ValueError) as exc:
                raise RecordError(str(exc), str(path), lineno) from None


def ingest(
    path: str | os.PathLike,
    kind: str,
    manifest: DatasetManifest | None = None,
) -> RecordCollection:
    """Load and validate one record file.

    Every error carries the file path and the offending line number.
    """
    path = Path(path)
    if kind not in KINDS:
        raise RecordError(f"unknown record kind {kind!r}")
    if not path.exists():
        raise RecordError("file not found", str(path))
    if kind == "bitrate":
        if path.suffix.lower() == ".csv":
            rows = read_bitrate_csv(path)
        else:
            rows = (
                (n, BitrateRecord(str(o["image"]), int(o["qp"]), float(o["bpp"])))
                for n, o in iter_jsonl(path)
            )
    else:
        rows = ((n, o) for n, o in iter_jsonl(path))

    seen: dict = {}
    dim = None
    records = []
    lineno = 0
    try:
        for lineno, item in rows:
            rec = item if kind == "bitrate" else parse_record(item, kind)
            _check_manifest(rec, manifest)
            if rec.key in seen:
                raise RecordError(
                    f"duplicate key {format_key(rec.key)} (first seen on line {seen[rec.key]})"
                )
            seen[rec.key] = lineno
            if kind == "feature":
                if dim is None:
                    dim = len(rec.vector)
                elif len(rec.vector) != dim:
                    raise RecordError(
                        f"dimension mismatch: expected {dim}, got {len(rec.vector)}"
                    )
            records.append(rec)
    except RecordError as exc:
        if exc.path is not None:
            raise
        raise RecordError(str(exc), str(path), lineno) from None
    except (KeyError, TypeError, ValueError) as exc:
        raise RecordError(f"invalid record ({exc})", str(path), lineno) from None
    return RecordCollection(kind, records)


def ingest_many(paths: Sequence, kind: str, manifest: DatasetManifest | None = None) -> RecordCollection:
    """Ingest several shards into one collection; shard order is irrelevant."""
    parts = [ingest(p, kind, manifest) for p in paths]
    if not parts:
        return RecordCollection(kind)
    return parts[0].merge(*parts[1:])


# ---------------------------------------------------------------------------
# serialization


def record_to_dict(rec) -> dict:
    if isinstance(rec, PerceptionRecord):
        out = {"machine": rec.machine, "image": rec.image, "qp": rec.qp}
        if isinstance(rec.payload, ClassificationPrediction):
            out["topk"] = list(rec.payload.ranked_categories)
        else:
            out["dets"] = [
                {"bbox": list(d.bbox), "cat": d.category, "conf": d.confidence} for d in rec.payload
            ]
        return out
    if isinstance(rec, FeatureRecord):
        return {"extractor": rec.extractor, "image": rec.image, "qp": rec.qp, "vec": list(rec.vector)}
    if isinstance(rec, BitrateRecord):
        return {"image": rec.image, "qp": rec.qp, "bpp": rec.bpp}
    raise TypeError(f"not a record: {rec!r}")


def persist(collection: RecordCollection, path: str | os.PathLike) -> None:
    """Write a collection in its canonical on-disk format (sorted by key)."""
    path = Path(path)
    if collection.kind == "bitrate" and path.suffix.lower() == ".csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["image", "qp", "bpp"])
        for rec in collection.values():
            writer.writerow([rec.image, rec.qp, repr(rec.bpp)])
        atomic_write_text(path, buf.getvalue())
        return
    lines = [json.dumps(record_to_dict(r), separators=(",", ":")) for r in collection.values()]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write via a temp file in the target directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# completeness


@dataclass(frozen=True)
class CompletenessReport:
    missing: tuple[tuple[str, str, int], ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.missing

    def __len__(self) -> int:
        return len(self.missing)

    def describe(self, limit: int = 10) -> str:
        cells = ", ".join(format_key(k) for k in self.missing[:limit])
        more = f" (+{len(self.missing) - limit} more)" if len(self.missing) > limit else ""
        return f"{len(self.missing)} missing cell(s): {cells}{more}"


def expected_cells(manifest: DatasetManifest) -> Iterator[tuple[str, str, int]]:
    for machine in manifest.machines:
        for image in manifest.images:
            for qp in manifest.ladder.all_levels:
                yield (machine, image, qp)


def validate_completeness(manifest: DatasetManifest, records: Mapping) -> CompletenessReport:
    """List every (machine, image, level) cell the manifest expects but records lack."""
    return CompletenessReport(tuple(k for k in expected_cells(manifest) if k not in records))
