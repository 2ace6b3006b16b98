"""Scenario and benchmark configuration, loadable from TOML."""
from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..features import ConfigError
from ..index import ContextConfig
from ..transport import LinkModel

ROLES = ("miner", "fog", "cloud", "edge")
FAULT_KINDS = ("tamper_record", "drop_put_record", "replay_frame")


@dataclass
class NodeSpec:
    role: str
    name: str
    address: str
    key_seed: str = ""

    def seed_bytes(self) -> bytes:
        return (self.key_seed or self.name).encode()


@dataclass
class CameraSpec:
    camera_id: str
    zone: str
    frames: int = 400
    fps: float = 10.0
    max_pedestrians: int = 4
    spawn_prob: float = 0.5


@dataclass
class FaultSpec:
    kind: str
    segment: str | None = None   # tamper_record / drop_put_record; default: first segment
    camera: str | None = None    # replay_frame; default: first camera
    frame: int = 3               # replay_frame: index of the DATA frame sent twice


@dataclass
class ScenarioConfig:
    seed: int = 7
    difficulty: int = 16
    miners: int = 4
    window_ms: int = 10_000
    start_ms: int = 1_700_000_000_000
    hashrate: float = 250_000.0      # per miner, hashes per simulated second
    latency_ms: float = 10.0
    jitter_ms: float = 5.0
    timeout_s: float = 600.0         # simulated
    nodes: list[NodeSpec] = field(default_factory=list)
    cameras: list[CameraSpec] = field(default_factory=list)
    faults: list[FaultSpec] = field(default_factory=list)
    allowlist: list[str] | None = None   # node names; default every fog and edge
    bands: list[dict] = field(default_factory=list)
    thresholds: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.cameras:
            self.cameras = [CameraSpec("cam01", "lobby"), CameraSpec("cam02", "dock")]
        if not self.nodes:
            self.nodes = default_roster(self.miners, [c.camera_id for c in self.cameras])

    def validate(self) -> None:
        addresses = [n.address for n in self.nodes]
        if len(set(addresses)) != len(addresses):
            raise ConfigError("node addresses must be unique")
        names = [n.name for n in self.nodes]
        if len(set(names)) != len(names):
            raise ConfigError("node names must be unique")
        for n in self.nodes:
            if n.role not in ROLES:
                raise ConfigError(f"unknown role {n.role!r} for {n.name}")
        if len(self.role("miner")) < 1:
            raise ConfigError("at least one miner is required")
        for role in ("fog", "cloud"):
            if len(self.role(role)) != 1:
                raise ConfigError(f"exactly one {role} node is required")
        if not 1 <= self.difficulty <= 32:
            raise ConfigError("difficulty must lie in [1, 32]")
        if self.window_ms <= 0 or self.hashrate <= 0:
            raise ConfigError("window_ms and hashrate must be positive")
        cams = [c.camera_id for c in self.cameras]
        if len(set(cams)) != len(cams):
            raise ConfigError("camera ids must be unique")
        for f in self.faults:
            if f.kind not in FAULT_KINDS:
                raise ConfigError(f"unknown fault {f.kind!r}")

    def role(self, role: str) -> list[NodeSpec]:
        return [n for n in self.nodes if n.role == role]

    def context(self) -> ContextConfig:
        data = {"zones": {c.camera_id: c.zone for c in self.cameras}}
        if self.bands:
            data["bands"] = self.bands
        if self.thresholds:
            data["thresholds"] = self.thresholds
        return ContextConfig.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        data = dict(data)
        scenario = dict(data.pop("scenario", {}))
        network = data.pop("network", {})
        context = data.pop("context", {})
        try:
            nodes = [NodeSpec(**n) for n in data.pop("nodes", [])]
            cameras = [CameraSpec(**c) for c in data.pop("cameras", [])]
            faults = [FaultSpec(**f) for f in data.pop("faults", [])]
            if "latency_ms" in network:
                scenario["latency_ms"] = network["latency_ms"]
            if "jitter_ms" in network:
                scenario["jitter_ms"] = network["jitter_ms"]
            cfg = cls(nodes=nodes, cameras=cameras, faults=faults,
                      bands=context.get("bands", []),
                      thresholds=context.get("thresholds", {}), **scenario, **data)
        except TypeError as exc:
            raise ConfigError(f"bad scenario config: {exc}") from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        try:
            with open(path, "rb") as fh:
                return cls.from_dict(tomllib.load(fh))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None


def default_roster(miners: int, cameras: list[str]) -> list[NodeSpec]:
    nodes = [NodeSpec("miner", f"miner-{i}", f"mem://miner-{i}") for i in range(miners)]
    nodes.append(NodeSpec("cloud", "cloud", "mem://cloud"))
    nodes.append(NodeSpec("fog", "fog-1", "mem://fog-1"))
    nodes += [NodeSpec("edge", f"edge-{cam}", f"mem://edge-{cam}") for cam in cameras]
    return nodes


# Links used by the benchmarks. "lan" stands in for the switched network
# between separate machines; "loopback" adds nothing to the kernel path.
LINK_PRESETS = {
    "loopback": dict(latency_s=0.0, jitter_s=0.0, bandwidth_bps=None),
    "lan": dict(latency_s=0.0005, jitter_s=0.0001, bandwidth_bps=100e6),
}


def link_model(preset: str, seed: int | None = None) -> LinkModel | None:
    try:
        params = LINK_PRESETS[preset]
    except KeyError:
        raise ConfigError(f"unknown link preset {preset!r}; "
                          f"choose from {', '.join(LINK_PRESETS)}") from None
    if not params["latency_s"] and not params["jitter_s"] and not params["bandwidth_bps"]:
        return None
    return LinkModel(seed=seed, **params)
