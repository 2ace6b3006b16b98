"""Edge-node feature records: synthetic pedestrian scenes, feature files, streaming.

A feature line is ``timestamp,frame_seq,camera_id,pedestrian_id,speed,direction``
with an optional trailing tag column that is accepted and dropped.
Speed is pixels of movement per second divided by bounding-box area;
direction is degrees in [0, 360) measured from the image +x axis.
"""
from __future__ import annotations

import math
import random
import time
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence


class ConfigError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class StreamError(RuntimeError):
    def __init__(self, sent: int, cause: Exception):
        super().__init__(f"stream failed after {sent} batches: {cause}")
        self.sent = sent
        self.cause = cause


@dataclass(frozen=True, order=True)
class FeatureRecord:
    timestamp: int
    frame_seq: int
    camera_id: str
    pedestrian_id: int
    speed: float
    direction: float

    def __post_init__(self):
        if self.timestamp < 0 or self.frame_seq < 0 or self.pedestrian_id < 0:
            raise ValueError("timestamp, frame_seq and pedestrian_id must be non-negative")
        if not self.camera_id or any(c in self.camera_id for c in ",\n\r/"):
            raise ValueError(f"bad camera id {self.camera_id!r}")
        if not (self.speed >= 0 and math.isfinite(self.speed)):
            raise ValueError(f"speed must be finite and >= 0, got {self.speed}")
        if not (0.0 <= self.direction < 360.0):
            raise ValueError(f"direction must lie in [0, 360), got {self.direction}")

    @property
    def sort_key(self) -> tuple[int, int, int]:
        return (self.timestamp, self.frame_seq, self.pedestrian_id)

    def to_line(self) -> str:
        # repr() of a float is the shortest string that round-trips.
        return (f"{self.timestamp},{self.frame_seq},{self.camera_id},"
                f"{self.pedestrian_id},{self.speed!r},{self.direction!r}")


def parse_line(line: str, lineno: int = 1) -> FeatureRecord:
    parts = line.strip().split(",")
    if len(parts) not in (6, 7):
        raise ParseError(lineno, f"expected 6 or 7 columns, got {len(parts)}")
    try:
        ts, seq, cam, pid, speed, direction = parts[:6]
        return FeatureRecord(int(ts), int(seq), cam, int(pid), float(speed), float(direction))
    except ValueError as exc:
        raise ParseError(lineno, str(exc)) from None


def parse_feature_file(text: str) -> list[FeatureRecord]:
    return [parse_line(line, n) for n, line in enumerate(text.splitlines(), 1) if line.strip()]


def serialize_records(records: Iterable[FeatureRecord]) -> str:
    return "".join(r.to_line() + "\n" for r in records)


@dataclass
class TrackState:
    pedestrian_id: int
    x: float
    y: float
    w: float
    h: float
    vx: float
    vy: float
    alive: bool = True

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass
class SceneConfig:
    camera_id: str = "cam01"
    width: int = 640
    height: int = 480
    fps: float = 10.0
    detections_per_second: float = 2.0
    start_ms: int = 1_700_000_000_000
    spawn_prob: float = 0.5
    max_pedestrians: int = 4
    max_step_px: float = 12.0
    velocity_jitter_px: float = 1.0
    box_w: tuple[float, float] = (30.0, 60.0)
    box_h: tuple[float, float] = (60.0, 140.0)
    initial_tracks: list[TrackState] = field(default_factory=list)

    def validate(self) -> None:
        if self.fps < 1:
            raise ConfigError(f"frame rate must be at least 1 FPS, got {self.fps}")
        if self.detections_per_second <= 0:
            raise ConfigError("detections_per_second must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("frame dimensions must be positive")

    def timestamp(self, frame: int) -> int:
        return self.start_ms + round(frame * 1000 / self.fps)

    def is_detection_frame(self, frame: int) -> bool:
        period = max(1, round(self.fps / self.detections_per_second))
        return frame % period == 0


def speed_of(dx: float, dy: float, fps: float, area: float) -> float:
    """Pixels moved per second over box area."""
    return math.hypot(dx, dy) * fps / area


def direction_of(dx: float, dy: float) -> float:
    if dx == 0 and dy == 0:
        return 0.0
    deg = math.degrees(math.atan2(dy, dx)) % 360.0
    return 0.0 if deg >= 360.0 else deg


def simulate(config: SceneConfig, frame_count: int, seed: int
             ) -> Iterator[tuple[int, list[tuple[TrackState, float, float]]]]:
    """Yield ``(frame, [(track, dx, dy), ...])`` for tracks alive in each frame.

    New pedestrians only appear on detection frames; every live track moves
    each frame and dies when its box would leave the image.
    """
    config.validate()
    if frame_count < 0:
        raise ConfigError(f"frame_count must be >= 0, got {frame_count}")
    rng = random.Random(seed)
    tracks = [TrackState(**vars(t)) for t in config.initial_tracks]
    next_id = max((t.pedestrian_id for t in tracks), default=-1) + 1
    for frame in range(frame_count):
        if config.is_detection_frame(frame) and len(tracks) < config.max_pedestrians \
                and rng.random() < config.spawn_prob:
            w = rng.uniform(*config.box_w)
            h = rng.uniform(*config.box_h)
            x = rng.uniform(0, config.width - w)
            y = rng.uniform(0, config.height - h)
            step = rng.uniform(0, config.max_step_px)
            heading = rng.uniform(0, 2 * math.pi)
            tracks.append(TrackState(next_id, x, y, w, h,
                                     step * math.cos(heading), step * math.sin(heading)))
            next_id += 1
        moved = []
        for t in tracks:
            if config.velocity_jitter_px:
                t.vx += rng.uniform(-config.velocity_jitter_px, config.velocity_jitter_px)
                t.vy += rng.uniform(-config.velocity_jitter_px, config.velocity_jitter_px)
                norm = math.hypot(t.vx, t.vy)
                if norm > config.max_step_px:
                    t.vx *= config.max_step_px / norm
                    t.vy *= config.max_step_px / norm
            nx, ny = t.x + t.vx, t.y + t.vy
            if nx < 0 or ny < 0 or nx + t.w > config.width or ny + t.h > config.height:
                t.alive = False
                continue
            dx, dy = nx - t.x, ny - t.y
            t.x, t.y = nx, ny
            moved.append((t, dx, dy))
        tracks = [t for t in tracks if t.alive]
        yield frame, moved


def generate_synthetic_frames(config: SceneConfig, frame_count: int, seed: int
                              ) -> list[list[FeatureRecord]]:
    """One batch of records per frame; deterministic for a fixed seed."""
    batches = []
    for frame, moved in simulate(config, frame_count, seed):
        ts = config.timestamp(frame)
        batches.append([
            FeatureRecord(ts, frame, config.camera_id, t.pedestrian_id,
                          speed_of(dx, dy, config.fps, t.area), direction_of(dx, dy))
            for t, dx, dy in sorted(moved, key=lambda m: m[0].pedestrian_id)
        ])
    return batches


@dataclass
class TransferSummary:
    records: int = 0
    data_frames: int = 0
    bytes_sent: int = 0
    elapsed_s: float = 0.0


def stream_records(channel, batches: Sequence[Sequence[FeatureRecord]]) -> TransferSummary:
    """Send each batch as one encrypted DATA frame of feature lines."""
    summary = TransferSummary()
    start = time.perf_counter()
    for batch in batches:
        try:
            summary.bytes_sent += channel.send(serialize_records(batch).encode())
        except Exception as exc:
            raise StreamError(summary.data_frames, exc) from exc
        summary.data_frames += 1
        summary.records += len(batch)
    summary.elapsed_s = time.perf_counter() - start
    return summary


def receive_records(channel, timeout: float | None = 10.0) -> Iterator[list[FeatureRecord]]:
    """Yield decoded batches until the peer closes the channel."""
    while True:
        payload = channel.recv(timeout)
        if payload is None:
            return
        yield parse_feature_file(payload.decode())
