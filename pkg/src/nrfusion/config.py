"""Run configuration: every module default in one place, loadable from TOML.

Sections map onto module dataclasses. Keys are addressed as ``section.key``
both in the file and as command-line overrides (``--weights.lambda_learned 0``).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .energy import DEPTH_GAP_THRESHOLD, VISIBILITY_THRESHOLD, EnergyWeights
from .pipeline import CYCLE_GATE, AlignmentConfig, ReconstructionConfig
from .provider import ProviderSpec
from .solver import SolverConfig


# covered by the top-level ``threads`` and ``seed`` keys
_DERIVED = {"solver.threads", "provider.seed"}


class ConfigError(ValueError):
    """Unknown key, wrong type or invalid value in a run configuration."""


@dataclass
class GraphSection:
    node_radius: float = 0.05
    pair_node_radius: float = 0.04
    edge_k: int = 8
    skin_k: int = 4


@dataclass
class VolumeSection:
    voxel_size: float = 0.01
    truncation_voxels: float = 4.0
    w_max: float = 64.0
    margin: float = 0.1


@dataclass
class FilterSection:
    visibility_threshold: float = VISIBILITY_THRESHOLD
    depth_threshold: float = DEPTH_GAP_THRESHOLD


@dataclass
class AlignSection:
    stride: int = 2
    gn_iterations: int = 20
    cycle_gate: float = CYCLE_GATE


@dataclass
class RansacSection:
    threshold: float = 0.01
    iterations: int = 200
    floor: float = 1e-3


@dataclass
class RunConfig:
    weights: EnergyWeights = field(default_factory=EnergyWeights.reconstruction)
    solver: SolverConfig = field(default_factory=SolverConfig)
    graph: GraphSection = field(default_factory=GraphSection)
    volume: VolumeSection = field(default_factory=VolumeSection)
    filter: FilterSection = field(default_factory=FilterSection)
    align: AlignSection = field(default_factory=AlignSection)
    ransac: RansacSection = field(default_factory=RansacSection)
    provider: ProviderSpec = field(default_factory=ProviderSpec)
    seed: int = 0
    threads: int = 1

    # -- construction ---------------------------------------------------------

    @classmethod
    def for_alignment(cls) -> "RunConfig":
        return cls(weights=EnergyWeights.alignment())

    @classmethod
    def from_file(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        try:
            data = tomllib.loads(Path(path).read_text())
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        cfg = base or cls()
        flat = {}
        for key, value in data.items():
            if isinstance(value, dict):
                for sub, v in value.items():
                    flat[f"{key}.{sub}"] = v
            else:
                flat[key] = value
        return cfg.with_overrides(flat)

    def with_overrides(self, values: dict) -> "RunConfig":
        """Return a copy with ``{"section.key": value}`` applied; unknown keys raise."""
        current = {k: v for k, v in self.flat().items()}
        for key, value in values.items():
            if key not in current:
                raise ConfigError(f"unknown config key {key!r}")
            current[key] = _coerce(key, value, current[key])
        return RunConfig.from_flat(current)

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            default = getattr(cls(), f.name)
            if dataclasses.is_dataclass(default):
                sub = {g.name: flat.get(f"{f.name}.{g.name}", getattr(default, g.name))
                       for g in dataclasses.fields(default) if g.init}
                try:
                    kwargs[f.name] = type(default)(**sub)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"[{f.name}] {exc}") from exc
            else:
                kwargs[f.name] = flat[f.name]
        cfg = cls(**kwargs)
        cfg.provider.seed = cfg.seed
        if cfg.threads < 1:
            raise ConfigError("threads must be >= 1")
        return cfg

    def flat(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for g in dataclasses.fields(value):
                    key = f"{f.name}.{g.name}"
                    if g.init and key not in _DERIVED:
                        out[key] = getattr(value, g.name)
            else:
                out[f.name] = value
        return out

    # -- module configs ---------------------------------------------------------

    def solver_config(self, gn_iterations: int | None = None) -> SolverConfig:
        return dataclasses.replace(self.solver, threads=self.threads,
                                   gn_iterations=gn_iterations or self.solver.gn_iterations)

    def reconstruction(self) -> ReconstructionConfig:
        return ReconstructionConfig(
            voxel_size=self.volume.voxel_size, truncation_voxels=self.volume.truncation_voxels,
            w_max=self.volume.w_max, volume_margin=self.volume.margin,
            node_radius=self.graph.node_radius, edge_k=self.graph.edge_k, skin_k=self.graph.skin_k,
            visibility_threshold=self.filter.visibility_threshold,
            depth_threshold=self.filter.depth_threshold,
            solver=self.solver_config(),
        )

    def alignment(self) -> AlignmentConfig:
        return AlignmentConfig(
            node_radius=self.graph.pair_node_radius, edge_k=self.graph.edge_k, skin_k=self.graph.skin_k,
            stride=self.align.stride, solver=self.solver_config(self.align.gn_iterations),
        )


def _coerce(key: str, value, default):
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                low = value.strip().lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value {value!r} for {key} (expected {type(default).__name__})") from exc


def dump_toml(cfg: RunConfig) -> str:
    """Render a configuration back to TOML (sections in field order)."""
    lines = []
    top = []
    sections: dict[str, list[str]] = {}
    for key, value in cfg.flat().items():
        text = repr(value).lower() if isinstance(value, bool) else (f'"{value}"' if isinstance(value, str) else repr(value))
        if "." in key:
            sec, name = key.split(".", 1)
            sections.setdefault(sec, []).append(f"{name} = {text}")
        else:
            top.append(f"{key} = {text}")
    lines.extend(top)
    for sec, entries in sections.items():
        lines.append("")
        lines.append(f"[{sec}]")
        lines.extend(entries)
    return "\n".join(lines) + "\n"
