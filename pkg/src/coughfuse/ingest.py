"""COUGHVID-style manifest parsing, certainty filtering, labels and clinical bits."""
from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

log = logging.getLogger(__name__)

DEFAULT_SCHEMA = (
    "fever",
    "dry_cough",
    "wet_cough",
    "respiratory_condition_history",
    "muscle_pain",
    "sore_throat",
    "loss_of_smell",
    "fatigue",
)
REQUIRED_COLUMNS = ("uuid", "cough_detected", "status")
SPLITS = ("train", "val", "test")


class SchemaError(ValueError):
    pass


class UnlabeledError(ValueError):
    pass


class ClassLabel(enum.IntEnum):
    ASYMPTOMATIC_NEGATIVE = 1
    SYMPTOMATIC_NEGATIVE = 2
    COVID_POSITIVE = 3

    @property
    def column(self) -> str:
        return f"class{int(self)}"


CLASSES = tuple(ClassLabel)


class Status(str, enum.Enum):
    COVID_POSITIVE = "covid_positive"
    HEALTHY = "healthy"
    SYMPTOMATIC = "symptomatic"
    UNKNOWN = "unknown"

    @classmethod
    def parse(cls, raw: str | None) -> "Status":
        value = (raw or "").strip().lower().replace("-", "").replace(" ", "_")
        aliases = {
            "covid19": cls.COVID_POSITIVE, "covid_positive": cls.COVID_POSITIVE,
            "positive": cls.COVID_POSITIVE, "healthy": cls.HEALTHY,
            "symptomatic": cls.SYMPTOMATIC,
        }
        return aliases.get(value, cls.UNKNOWN)


@dataclass(frozen=True)
class Record:
    id: str
    audio_path: str
    cough_certainty: float
    status: Status
    symptoms: Mapping[str, bool] = field(default_factory=dict)
    age: int | None = None
    gender: str | None = None
    parent_id: str | None = None
    split: str | None = None
    augment: tuple | None = None  # (kind, magnitude, seed) for augmented children

    def __post_init__(self):
        if not 0.0 <= self.cough_certainty <= 1.0:
            raise ValueError(f"record {self.id}: cough_certainty {self.cough_certainty} outside [0, 1]")
        if self.parent_id is not None and self.parent_id == self.id:
            raise ValueError(f"record {self.id} is its own parent")
        if self.split is not None and self.split not in SPLITS:
            raise ValueError(f"record {self.id}: unknown split {self.split!r}")

    @property
    def is_original(self) -> bool:
        return self.parent_id is None


class RecordSet(Sequence[Record]):
    """Immutable ordered collection of records with unique ids."""

    def __init__(self, records: Iterable[Record] = ()):
        self._records = tuple(records)
        self._index = {}
        for r in self._records:
            if r.id in self._index:
                raise ValueError(f"duplicate record id {r.id}")
            self._index[r.id] = r
        for r in self._records:
            if r.parent_id is not None and r.parent_id not in self._index:
                raise ValueError(f"record {r.id}: parent {r.parent_id} not in record set")

    def __getitem__(self, i):
        if isinstance(i, slice):
            return RecordSet(self._records[i])
        return self._records[i]

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[Record]:
        return iter(self._records)

    def __repr__(self) -> str:
        return f"RecordSet(n={len(self)})"

    def get(self, record_id: str) -> Record:
        return self._index[record_id]

    def __contains__(self, record_id) -> bool:
        return record_id in self._index

    def root_of(self, record: Record) -> str:
        while record.parent_id is not None:
            record = self._index[record.parent_id]
        return record.id


@dataclass
class SkipReport:
    rows: list[tuple[int, str, str]] = field(default_factory=list)

    def add(self, line: int, record_id: str, reason: str) -> None:
        self.rows.append((line, record_id, reason))

    def __len__(self) -> int:
        return len(self.rows)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["line", "uuid", "reason"])
            w.writerows(self.rows)


_TRUE = {"true", "1", "yes", "y", "t"}
_FALSE = {"false", "0", "no", "n", "f", ""}


def _parse_bool(raw: str | None) -> bool | None:
    v = (raw or "").strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    return None


def _parse_gender(raw: str | None) -> str | None:
    v = (raw or "").strip().lower()
    if not v:
        return None
    return v if v in ("male", "female") else "other"


def parse_manifest(path: str | Path, schema: Sequence[str] = DEFAULT_SCHEMA,
                   column_map: Mapping[str, str] | None = None,
                   audio_dir: str | Path | None = None) -> tuple[RecordSet, SkipReport]:
    """Read a manifest CSV into records.

    ``column_map`` maps schema field names to manifest column names, for
    manifests whose symptom columns are named differently. Audio defaults to
    ``<audio_dir>/<uuid>.wav`` unless an ``audio_path`` column is present.
    """
    path = Path(path)
    column_map = dict(column_map or {})
    audio_dir = Path(audio_dir) if audio_dir is not None else path.parent
    report = SkipReport()
    records = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"{path}: manifest lacks required columns {missing}")
        for line, row in enumerate(reader, start=2):
            rid = (row.get("uuid") or "").strip()
            if None in row or any(v is None for v in row.values()):
                report.add(line, rid, "wrong number of fields")
                continue
            if not rid:
                report.add(line, rid, "empty uuid")
                continue
            if rid in seen:
                report.add(line, rid, "duplicate uuid")
                continue
            seen.add(rid)
            try:
                certainty = float(row["cough_detected"])
                if not 0.0 <= certainty <= 1.0:
                    raise ValueError
            except ValueError:
                report.add(line, rid, f"unparseable cough_detected {row['cough_detected']!r}; treated as 0")
                certainty = 0.0
            symptoms = {}
            for name in schema:
                col = column_map.get(name, name)
                if col not in row:
                    continue
                value = _parse_bool(row[col])
                if value is None:
                    report.add(line, rid, f"unparseable {col} {row[col]!r}; treated as 0")
                    value = False
                symptoms[name] = value
            age = None
            if (row.get("age") or "").strip():
                try:
                    age = int(float(row["age"]))
                except ValueError:
                    report.add(line, rid, f"unparseable age {row['age']!r}")
            audio = (row.get("audio_path") or "").strip()
            audio_path = str(audio_dir / audio) if audio else str(audio_dir / f"{rid}.wav")
            records.append(Record(
                id=rid, audio_path=audio_path, cough_certainty=certainty,
                status=Status.parse(row["status"]), symptoms=symptoms, age=age,
                gender=_parse_gender(row.get("gender")),
            ))
    log.info("parsed %d records from %s (%d issues)", len(records), path, len(report))
    return RecordSet(records), report


def filter_by_certainty(records: Iterable[Record], threshold: float = 0.9) -> RecordSet:
    """Keep records whose cough certainty is at least ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    return RecordSet(r for r in records if r.cough_certainty >= threshold)


def map_label(record: Record) -> ClassLabel:
    if record.status is Status.COVID_POSITIVE:
        return ClassLabel.COVID_POSITIVE
    has_symptom = any(record.symptoms.values())
    if record.status is Status.SYMPTOMATIC or has_symptom:
        return ClassLabel.SYMPTOMATIC_NEGATIVE
    if record.status is Status.HEALTHY:
        return ClassLabel.ASYMPTOMATIC_NEGATIVE
    raise UnlabeledError(f"record {record.id}: unknown status and no symptom data")


def label_records(records: Iterable[Record]) -> tuple[RecordSet, list[str]]:
    """Drop records that cannot be labelled; returns kept records and dropped ids."""
    kept, dropped = [], []
    for r in records:
        try:
            map_label(r)
        except UnlabeledError:
            dropped.append(r.id)
        else:
            kept.append(r)
    return RecordSet(kept), dropped


def encode_clinical(record: Record, schema: Sequence[str] = DEFAULT_SCHEMA) -> tuple[int, ...]:
    """Clinical bits in ``schema`` order; absent fields encode 0."""
    if not schema:
        raise ValueError("clinical schema must be nonempty")
    return tuple(int(bool(record.symptoms.get(name, False))) for name in schema)


def class_counts(records: Iterable[Record]) -> dict[ClassLabel, int]:
    counts = {c: 0 for c in CLASSES}
    for r in records:
        counts[map_label(r)] += 1
    return counts


# --- record table (our own intermediate format) ---------------------------

RECORD_COLUMNS = ["uuid", "audio_path", "cough_detected", "status", "age", "gender",
                  "parent_id", "split", "label", "augment_kind", "augment_magnitude", "augment_seed"]


def write_records(path: str | Path, records: Iterable[Record], schema: Sequence[str] = DEFAULT_SCHEMA) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS + list(schema))
        for r in records:
            kind, mag, seed = r.augment if r.augment else ("", "", "")
            w.writerow([
                r.id, r.audio_path, repr(r.cough_certainty), r.status.value,
                "" if r.age is None else r.age, r.gender or "", r.parent_id or "", r.split or "",
                int(map_label(r)), kind, "" if mag == "" else repr(mag), seed,
            ] + [int(bool(r.symptoms.get(s, False))) for s in schema])


def read_records(path: str | Path, schema: Sequence[str] = DEFAULT_SCHEMA) -> RecordSet:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            augment = None
            if row["augment_kind"]:
                augment = (row["augment_kind"], float(row["augment_magnitude"]), int(row["augment_seed"]))
            records.append(Record(
                id=row["uuid"], audio_path=row["audio_path"],
                cough_certainty=float(row["cough_detected"]), status=Status(row["status"]),
                symptoms={s: row[s] == "1" for s in schema if s in row},
                age=int(row["age"]) if row["age"] else None, gender=row["gender"] or None,
                parent_id=row["parent_id"] or None, split=row["split"] or None, augment=augment,
            ))
    return RecordSet(records)


def with_split(record: Record, split: str) -> Record:
    return replace(record, split=split)
