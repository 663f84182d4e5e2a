"""Run configuration: backbone configs, multi-task head, schedule and the run itself.

All configs are frozen dataclasses with ``to_dict``/``from_dict`` round-trips through JSON. Digests use the
canonical (key-sorted) serialization, so they are stable under field reordering.

"""

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, ClassVar, Dict, Mapping, Optional, Tuple, Type, Union

from cvrscale.deprecation import LEGACY_BACKBONE_KEYS, LEGACY_RUN_KEYS, LEGACY_SCHEDULE_KEYS, remap_legacy_keys
from cvrscale.errors import ConfigError
from cvrscale.utils import digest_obj


def _check_positive(owner: str, values: Mapping[str, int]) -> None:
    bad = {name: val for name, val in values.items() if int(val) < 1}
    if bad:
        raise ConfigError(f"`{owner}` extents must be >= 1, got {bad}")


@dataclass(frozen=True)
class DcnConfig:
    """DCNv2 with relu-projected cross input and a parallel FC-DNN branch."""

    cross_width: int = 64
    deep_width: int = 64
    n_cross_layers: int = 2
    n_deep_layers: int = 1
    low_rank: int = 16

    family: ClassVar[str] = "dcnv2"
    scaling_factors: ClassVar[Tuple[str, ...]] = (
        "cross_width",
        "deep_width",
        "n_cross_layers",
        "n_deep_layers",
        "low_rank",
    )

    def __post_init__(self) -> None:
        _check_positive(self.family, {name: getattr(self, name) for name in self.scaling_factors})
        if self.low_rank > self.cross_width:
            raise ConfigError(f"`dcnv2` low rank {self.low_rank} exceeds cross width {self.cross_width}")

    @property
    def hidden_width(self) -> int:
        return self.cross_width + self.deep_width


@dataclass(frozen=True)
class MaskNetConfig:
    """MaskNet blocks (parallel branches of sequential chains) followed by one FC-DNN layer."""

    cross_width: int = 64
    deep_width: int = 64
    parallel_blocks: int = 1
    sequential_blocks: int = 0

    family: ClassVar[str] = "masknet"
    scaling_factors: ClassVar[Tuple[str, ...]] = ("cross_width", "deep_width", "parallel_blocks", "sequential_blocks")

    def __post_init__(self) -> None:
        _check_positive(self.family, {"cross_width": self.cross_width, "deep_width": self.deep_width})
        if self.parallel_blocks < 0 or self.sequential_blocks < 0:
            raise ConfigError("`masknet` block counts must be non-negative")
        if self.parallel_blocks == 0 and self.sequential_blocks == 0:
            raise ConfigError("`masknet` needs at least one parallel or sequential block")

    @property
    def n_branches(self) -> int:
        return max(self.parallel_blocks, 1)

    @property
    def chain_length(self) -> int:
        return max(self.sequential_blocks, 1)

    @property
    def hidden_width(self) -> int:
        return self.deep_width


@dataclass(frozen=True)
class TransformerConfig:
    """Pre-norm Transformer encoder over global tokens."""

    d_model: int = 8
    seq_len: int = 4
    n_layers: int = 1
    n_heads: int = 2
    ffn_dim: int = 16

    family: ClassVar[str] = "transformer"
    scaling_factors: ClassVar[Tuple[str, ...]] = ("d_model", "seq_len", "n_layers", "n_heads", "ffn_dim")

    def __post_init__(self) -> None:
        _check_positive(self.family, {name: getattr(self, name) for name in self.scaling_factors})
        if self.d_model % self.n_heads:
            raise ConfigError(f"`{self.family}` d_model {self.d_model} is not divisible by n_heads {self.n_heads}")

    @property
    def hidden_width(self) -> int:
        return self.d_model


@dataclass(frozen=True)
class RankMixerConfig:
    """RankMixer: multi-head token mixing and per-token FFNs."""

    d_model: int = 8
    seq_len: int = 4
    n_layers: int = 1
    ffn_dim: int = 16
    n_heads: int = 2

    family: ClassVar[str] = "rankmixer"
    scaling_factors: ClassVar[Tuple[str, ...]] = ("d_model", "seq_len", "n_layers", "ffn_dim", "n_heads")

    def __post_init__(self) -> None:
        _check_positive(self.family, {name: getattr(self, name) for name in self.scaling_factors})
        if self.d_model % self.n_heads or self.seq_len % self.n_heads:
            raise ConfigError(
                f"`{self.family}` needs d_model ({self.d_model}) and seq_len ({self.seq_len})"
                f" divisible by n_heads ({self.n_heads})"
            )

    @property
    def hidden_width(self) -> int:
        return self.d_model


SingleBackboneConfig = Union[DcnConfig, MaskNetConfig, TransformerConfig, RankMixerConfig]


@dataclass(frozen=True)
class DhenConfig:
    """Single-layer ensemble: members run side by side on the shared input, hidden outputs concatenated."""

    members: Tuple[SingleBackboneConfig, ...] = ()

    family: ClassVar[str] = "dhen"
    scaling_factors: ClassVar[Tuple[str, ...]] = ()

    def __post_init__(self) -> None:
        if not self.members:
            raise ConfigError("`dhen` needs at least one member backbone")
        if any(isinstance(member, DhenConfig) for member in self.members):
            raise ConfigError("`dhen` is single-layer, members cannot be ensembles")

    @property
    def hidden_width(self) -> int:
        return sum(member.hidden_width for member in self.members)


BackboneConfig = Union[DcnConfig, MaskNetConfig, TransformerConfig, RankMixerConfig, DhenConfig]
BACKBONE_CLASSES: Dict[str, Type] = {
    cls.family: cls for cls in (DcnConfig, MaskNetConfig, TransformerConfig, RankMixerConfig, DhenConfig)
}


def backbone_to_dict(config: BackboneConfig) -> Dict[str, Any]:
    """Tagged dictionary form, ``family`` plus the factor values."""
    if isinstance(config, DhenConfig):
        return {"family": config.family, "members": [backbone_to_dict(m) for m in config.members]}
    return {"family": config.family, **asdict(config)}


def backbone_from_dict(doc: Mapping[str, Any]) -> BackboneConfig:
    """Build a backbone config from its tagged dictionary form, remapping legacy keys."""
    doc = remap_legacy_keys(doc, LEGACY_BACKBONE_KEYS)
    family = doc.get("family")
    if family not in BACKBONE_CLASSES:
        raise ConfigError(f"Unknown backbone family `{family}`, expected one of {sorted(BACKBONE_CLASSES)}")
    cls = BACKBONE_CLASSES[family]
    if cls is DhenConfig:
        return DhenConfig(members=tuple(backbone_from_dict(m) for m in doc.get("members", ())))
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known - {"family"})
    if unknown:
        raise ConfigError(f"Unknown keys for `{family}`: {unknown}")
    return cls(**{key: int(val) for key, val in doc.items() if key in known})


def with_factor(config: BackboneConfig, factor: str, value: int) -> BackboneConfig:
    """Copy of ``config`` with one scaling factor changed."""
    if factor not in config.scaling_factors:
        raise ConfigError(f"`{factor}` is not a scaling factor of `{config.family}`: {config.scaling_factors}")
    return replace(config, **{factor: int(value)})


@dataclass(frozen=True)
class MmoeConfig:
    """Multi-gate mixture of experts; the first task is the primary (ranking) task."""

    n_experts: int = 4
    expert_dim: Optional[int] = None
    tasks: Tuple[str, ...] = ("purchase", "click")

    def __post_init__(self) -> None:
        if self.n_experts < 1 or (self.expert_dim is not None and self.expert_dim < 1):
            raise ConfigError(f"MMoE sizes must be >= 1, got {self.n_experts} experts of {self.expert_dim}")
        if not self.tasks or len(set(self.tasks)) != len(self.tasks):
            raise ConfigError(f"MMoE task names must be unique and non-empty, got {self.tasks}")

    @property
    def primary_task(self) -> str:
        return self.tasks[0]


@dataclass(frozen=True)
class ScheduleConfig:
    """Optimizer and learning-rate schedule settings."""

    lr_peak: float = 3e-3
    lr_final: float = 1e-4
    warmup_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError(f"`warmup_fraction` must be within [0, 1], got {self.warmup_fraction}")


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines one training run."""

    backbone: BackboneConfig = field(default_factory=MaskNetConfig)
    mmoe: MmoeConfig = field(default_factory=MmoeConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    schema_path: Optional[str] = None
    batch_size: int = 16
    epochs: int = 5
    seed: int = 0
    data_days: Optional[int] = None
    warmstart_from: Optional[str] = None
    log_every: int = 50

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError(f"Need batch_size >= 1 and epochs >= 0, got {self.batch_size} / {self.epochs}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "backbone": backbone_to_dict(self.backbone),
            "mmoe": {**asdict(self.mmoe), "tasks": list(self.mmoe.tasks)},
            "schedule": asdict(self.schedule),
            "schema_path": self.schema_path,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "data_days": self.data_days,
            "warmstart_from": self.warmstart_from,
            "log_every": self.log_every,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "RunConfig":
        doc = remap_legacy_keys(doc, LEGACY_RUN_KEYS)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"Unknown run config keys: {unknown}")
        kwargs: Dict[str, Any] = {key: val for key, val in doc.items() if key not in ("backbone", "mmoe", "schedule")}
        if "backbone" in doc:
            kwargs["backbone"] = backbone_from_dict(doc["backbone"])
        if "mmoe" in doc:
            mmoe = dict(doc["mmoe"])
            mmoe["tasks"] = tuple(mmoe.get("tasks", MmoeConfig.tasks))
            kwargs["mmoe"] = MmoeConfig(**mmoe)
        if "schedule" in doc:
            kwargs["schedule"] = ScheduleConfig(**remap_legacy_keys(doc["schedule"], LEGACY_SCHEDULE_KEYS))
        return cls(**kwargs)

    def digest(self) -> str:
        """Stable SHA-256 over the canonical serialization."""
        return digest_obj(self.to_dict())

    def replace(self, **changes: Any) -> "RunConfig":
        return replace(self, **changes)


def load_json(path: str) -> Dict[str, Any]:
    with open(path, encoding="utf-8") as fopen:
        return json.load(fopen)


def dump_json(doc: Mapping[str, Any], path: str) -> None:
    dirname = os.path.dirname(path)
    if dirname:
        os.makedirs(dirname, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fopen:
        json.dump(doc, fopen, indent=2, sort_keys=True)
        fopen.write("\n")


def load_run_config(path: str) -> RunConfig:
    """Read a run config document."""
    return RunConfig.from_dict(load_json(path))
