"""Fog-node index store: contextualization, time-windowed segments, queries.

Records are bucketed per camera into half-open windows
``[start, start + window_ms)``; a segment is sealed once, at which point its
canonical bytes and SHA-256 digest are fixed. See CANONICAL.md for the
byte format.
"""
from __future__ import annotations

import bisect
import hashlib
import json
import math
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

from .features import ConfigError, FeatureRecord, ParseError

HOUR_MS = 3_600_000
DAY_MS = 24 * HOUR_MS


class SealedError(RuntimeError):
    pass


class NotFound(KeyError):
    pass


class QueryError(ValueError):
    def __init__(self, kind: str, message: str = ""):
        super().__init__(f"{kind}: {message}" if message else kind)
        self.kind = kind


@dataclass(frozen=True)
class TimeBand:
    label: str
    start_hour: int
    end_hour: int

    def contains(self, hour: int) -> bool:
        if self.start_hour <= self.end_hour:
            return self.start_hour <= hour < self.end_hour
        return hour >= self.start_hour or hour < self.end_hour


@dataclass
class ContextConfig:
    zones: dict[str, str]
    bands: list[TimeBand] = field(
        default_factory=lambda: [TimeBand("business_hours", 8, 18)])
    default_band: str = "after_hours"
    thresholds: dict[str, float] = field(
        default_factory=lambda: {"business_hours": 0.5, "after_hours": 0.1})
    utc_offset_minutes: int = 0

    def band_of(self, timestamp_ms: int) -> str:
        local = timestamp_ms + self.utc_offset_minutes * 60_000
        hour = (local % DAY_MS) // HOUR_MS
        for band in self.bands:
            if band.contains(hour):
                return band.label
        return self.default_band

    @classmethod
    def from_dict(cls, data: dict) -> "ContextConfig":
        bands = [TimeBand(b["label"], int(b["start_hour"]), int(b["end_hour"]))
                 for b in data.get("bands", [])] or None
        kwargs = {"zones": dict(data.get("zones", {}))}
        if bands:
            kwargs["bands"] = bands
        for key in ("default_band", "utc_offset_minutes"):
            if key in data:
                kwargs[key] = data[key]
        if "thresholds" in data:
            kwargs["thresholds"] = {k: float(v) for k, v in data["thresholds"].items()}
        return cls(**kwargs)


@dataclass(frozen=True)
class ContextualizedRecord:
    record: FeatureRecord
    time_band: str
    zone: str
    anomaly_flag: bool

    @property
    def sort_key(self):
        return self.record.sort_key

    def to_line(self) -> str:
        return f"{self.record.to_line()},{self.time_band},{self.zone},{int(self.anomaly_flag)}"

    @classmethod
    def from_line(cls, line: str, lineno: int = 1) -> "ContextualizedRecord":
        parts = line.split(",")
        if len(parts) != 9:
            raise ParseError(lineno, f"expected 9 columns, got {len(parts)}")
        ts, seq, cam, pid, speed, direction, band, zone, flag = parts
        if flag not in ("0", "1") or not band or not zone:
            raise ParseError(lineno, "bad context columns")
        try:
            rec = FeatureRecord(int(ts), int(seq), cam, int(pid), float(speed), float(direction))
        except ValueError as exc:
            raise ParseError(lineno, str(exc)) from None
        return cls(rec, band, zone, flag == "1")


def contextualize(record: FeatureRecord, config: ContextConfig) -> ContextualizedRecord:
    try:
        zone = config.zones[record.camera_id]
    except KeyError:
        raise ConfigError(f"camera {record.camera_id!r} has no zone") from None
    band = config.band_of(record.timestamp)
    threshold = config.thresholds.get(band, float("inf"))
    return ContextualizedRecord(record, band, zone, record.speed > threshold)


def _canonical_order(records: Iterable[ContextualizedRecord]) -> list[tuple[tuple, str]]:
    keyed = [(r.sort_key, r.to_line()) for r in records]
    keyed.sort()
    return keyed


def canonical_bytes(records: Iterable[ContextualizedRecord]) -> bytes:
    """Sorted record lines joined by a single newline; no trailing newline."""
    return "\n".join(line for _, line in _canonical_order(records)).encode()


def segment_digest(records: Iterable[ContextualizedRecord]) -> bytes:
    return hashlib.sha256(canonical_bytes(records)).digest()


def parse_canonical(data: bytes) -> list[ContextualizedRecord]:
    if not data:
        return []
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(1, "not utf-8") from exc
    return [ContextualizedRecord.from_line(line, n)
            for n, line in enumerate(text.split("\n"), 1)]


def is_canonical(data: bytes) -> bool:
    """Whether ``data`` equals ``canonical_bytes(parse_canonical(data))``.

    Checks line by line instead of rebuilding records: every numeric field
    must re-render to its own text, every field must pass record validation
    and the lines must already be in canonical order.
    """
    if not data:
        return True
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        return False
    prev = None
    for line in text.split("\n"):
        parts = line.split(",")
        if len(parts) != 9:
            return False
        ts, seq, cam, pid, speed, direction, band, zone, flag = parts
        try:
            t, s, p, v, d = int(ts), int(seq), int(pid), float(speed), float(direction)
        except ValueError:
            return False
        if str(t) != ts or str(s) != seq or str(p) != pid or repr(v) != speed \
                or repr(d) != direction:
            return False
        if t < 0 or s < 0 or p < 0 or not (0.0 <= v < math.inf) or not (0.0 <= d < 360.0):
            return False
        if not cam or "/" in cam or "\r" in cam or not band or not zone or flag not in ("0", "1"):
            return False
        key = (t, s, p, line)
        if prev is not None and key < prev:
            return False
        prev = key
    return True


def make_segment_id(camera_id: str, window_start: int) -> str:
    return f"{camera_id}/{window_start}"


def split_segment_id(segment_id: str) -> tuple[str, int]:
    camera, _, start = segment_id.rpartition("/")
    if not camera or not start.isdigit():
        raise ValueError(f"bad segment id {segment_id!r}")
    return camera, int(start)


@dataclass
class IndexSegment:
    segment_id: str
    camera_id: str
    window: tuple[int, int]
    records: list[ContextualizedRecord] = field(default_factory=list)
    digest: bytes | None = None
    by_pedestrian: dict[int, list[int]] = field(default_factory=dict, repr=False)

    @property
    def sealed(self) -> bool:
        return self.digest is not None

    def canonical_bytes(self) -> bytes:
        return canonical_bytes(self.records)


@dataclass(frozen=True)
class QuerySpec:
    camera_id: str | None = None
    time_range: tuple[int, int] | None = None
    pedestrian_id: int | None = None
    speed_range: tuple[float, float] | None = None
    direction_range: tuple[float, float] | None = None
    time_band: str | None = None
    anomaly_flag: bool | None = None

    def validate(self) -> None:
        for name in ("time_range", "speed_range", "direction_range"):
            rng = getattr(self, name)
            if rng is not None and not rng[0] < rng[1]:
                raise QueryError("EmptyRange", f"{name} {rng} is empty")

    @property
    def is_empty(self) -> bool:
        return all(getattr(self, f) is None for f in self.__dataclass_fields__)

    def matches(self, r: ContextualizedRecord) -> bool:
        rec = r.record
        if self.camera_id is not None and rec.camera_id != self.camera_id:
            return False
        if self.time_range is not None and not (self.time_range[0] <= rec.timestamp < self.time_range[1]):
            return False
        if self.pedestrian_id is not None and rec.pedestrian_id != self.pedestrian_id:
            return False
        if self.speed_range is not None and not (self.speed_range[0] <= rec.speed < self.speed_range[1]):
            return False
        if self.direction_range is not None and not (
                self.direction_range[0] <= rec.direction < self.direction_range[1]):
            return False
        if self.time_band is not None and r.time_band != self.time_band:
            return False
        if self.anomaly_flag is not None and r.anomaly_flag != self.anomaly_flag:
            return False
        return True


@dataclass
class QueryResult:
    records: list[ContextualizedRecord]
    segment_ids: list[str]


@dataclass
class StoreConfig:
    window_ms: int = 10_000
    allow_full_scan: bool = False
    journal_path: str | None = None

    def __post_init__(self):
        if self.window_ms <= 0:
            raise ConfigError("window_ms must be positive")


class IndexStore:
    """In-memory segment store; mutations are serialized by one lock."""

    def __init__(self, config: StoreConfig | None = None):
        self.config = config or StoreConfig()
        self._lock = threading.RLock()
        self._segments: dict[str, IndexSegment] = {}
        # camera -> sorted window starts
        self._starts: dict[str, list[int]] = {}
        self.late_arrivals = 0
        self._journal = None
        if self.config.journal_path:
            self._journal = open(self.config.journal_path, "a", encoding="utf-8")

    def window_start(self, timestamp: int) -> int:
        return timestamp - timestamp % self.config.window_ms

    def _log(self, event: dict) -> None:
        if self._journal is not None:
            self._journal.write(json.dumps(event, sort_keys=True) + "\n")
            self._journal.flush()

    def insert(self, record: ContextualizedRecord, *, _replay: bool = False) -> str:
        start = self.window_start(record.record.timestamp)
        sid = make_segment_id(record.record.camera_id, start)
        with self._lock:
            seg = self._segments.get(sid)
            if seg is None:
                seg = IndexSegment(sid, record.record.camera_id,
                                   (start, start + self.config.window_ms))
                self._segments[sid] = seg
                bisect.insort(self._starts.setdefault(seg.camera_id, []), start)
            elif seg.sealed:
                self.late_arrivals += 1
                raise SealedError(f"segment {sid} is sealed")
            seg.by_pedestrian.setdefault(record.record.pedestrian_id, []).append(len(seg.records))
            seg.records.append(record)
            if not _replay:
                self._log({"op": "insert", "line": record.to_line()})
        return sid

    def seal_segment(self, segment_id: str, *, _replay: bool = False) -> IndexSegment:
        with self._lock:
            seg = self._segments.get(segment_id)
            if seg is None:
                raise NotFound(segment_id)
            if seg.sealed:
                raise SealedError(f"segment {segment_id} already sealed")
            seg.records.sort(key=lambda r: (r.sort_key, r.to_line()))
            seg.by_pedestrian = {}
            for i, r in enumerate(seg.records):
                seg.by_pedestrian.setdefault(r.record.pedestrian_id, []).append(i)
            seg.digest = hashlib.sha256(seg.canonical_bytes()).digest()
            if not _replay:
                self._log({"op": "seal", "segment_id": segment_id, "digest": seg.digest.hex()})
            return seg

    def seal_through(self, watermark_ms: int) -> list[IndexSegment]:
        """Seal every open segment whose window ends at or before the watermark."""
        with self._lock:
            due = [s.segment_id for s in self._segments.values()
                   if not s.sealed and s.window[1] <= watermark_ms]
            return [self.seal_segment(sid) for sid in sorted(due)]

    def seal_all(self, camera_id: str | None = None) -> list[IndexSegment]:
        """Seal every open segment, or only those of ``camera_id``."""
        with self._lock:
            due = sorted(s.segment_id for s in self._segments.values()
                         if not s.sealed and camera_id in (None, s.camera_id))
            return [self.seal_segment(sid) for sid in due]

    def get_segment(self, segment_id: str) -> IndexSegment:
        with self._lock:
            try:
                return self._segments[segment_id]
            except KeyError:
                raise NotFound(segment_id) from None

    def segments(self) -> list[IndexSegment]:
        with self._lock:
            return [self._segments[k] for k in sorted(self._segments)]

    def __len__(self) -> int:
        with self._lock:
            return sum(len(s.records) for s in self._segments.values())

    def _candidate_segments(self, spec: QuerySpec) -> list[IndexSegment]:
        cams = [spec.camera_id] if spec.camera_id is not None else sorted(self._starts)
        out = []
        for cam in cams:
            starts = self._starts.get(cam, [])
            if spec.time_range is not None:
                a, b = spec.time_range
                lo = bisect.bisect_left(starts, self.window_start(a))
                hi = bisect.bisect_left(starts, b)
                starts = starts[lo:hi]
            out.extend(self._segments[make_segment_id(cam, s)] for s in starts)
        return out

    def query(self, spec: QuerySpec) -> QueryResult:
        spec.validate()
        if spec.is_empty and not self.config.allow_full_scan:
            raise QueryError("TooBroad", "query has no predicates")
        records: list[ContextualizedRecord] = []
        covering: list[str] = []
        with self._lock:
            for seg in self._candidate_segments(spec):
                if spec.pedestrian_id is not None:
                    pool = [seg.records[i] for i in seg.by_pedestrian.get(spec.pedestrian_id, ())]
                else:
                    pool = seg.records
                hits = [r for r in pool if spec.matches(r)]
                if hits:
                    covering.append(seg.segment_id)
                    records.extend(hits)
        records.sort(key=lambda r: (r.sort_key, r.to_line()))
        return QueryResult(records, sorted(covering))

    def close(self) -> None:
        if self._journal is not None:
            self._journal.close()
            self._journal = None

    @classmethod
    def recover(cls, config: StoreConfig) -> "IndexStore":
        """Rebuild a store by replaying its journal, then keep appending to it."""
        path = config.journal_path
        store = cls(replace(config, journal_path=None))
        if path and Path(path).exists():
            with open(path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    event = json.loads(line)
                    if event["op"] == "insert":
                        store.insert(ContextualizedRecord.from_line(event["line"], lineno),
                                     _replay=True)
                    elif event["op"] == "seal":
                        seg = store.seal_segment(event["segment_id"], _replay=True)
                        if seg.digest.hex() != event["digest"]:
                            raise ValueError(f"journal digest mismatch for {seg.segment_id}")
        store.config = config
        if path:
            store._journal = open(path, "a", encoding="utf-8")
        return store

