"""Run configuration: YAML in, validated dataclasses out.

A run is described by eight sections (model, moe, proxy, teacher, loss,
sequence, optimizer, seeds).  Every field has a default, so an empty
file is a valid config; unknown sections or keys are errors that name
the offending dotted path.  ``emit_config(load_config(p))`` is stable:
emitting materializes every default, and loading the emitted text
reproduces the config exactly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from .losses import LossConfig
from .model import ModelConfig
from .moe import MoEConfig
from .proxy import ProxyParams
from .synthetic import CORRUPTION_KINDS, DomainSpec
from .teacher import DEFAULT_TEACHER_LR, TEACHER_MODES

ADAPT_MODES = ("student_peft", "full_tune", "frozen")
TEACHER_UPDATE_ORDERS = ("after_student", "before_student")

# YAML key -> dataclass attribute, where the key is a Python keyword.
_RENAME = {"lambda": "lambda_"}
_RENAME_BACK = {v: k for k, v in _RENAME.items()}


@dataclass
class TeacherSettings:
    """Teacher branch: mode, its own learning rate, EMA momentum."""

    mode: str = "adaptbn"
    lr: float = DEFAULT_TEACHER_LR
    ema_momentum: float = 0.999
    update_order: str = "after_student"

    def __post_init__(self):
        if self.mode not in TEACHER_MODES:
            raise ValueError(f"teacher mode must be one of {TEACHER_MODES}, "
                             f"got {self.mode!r}")
        if self.lr < 0:
            raise ValueError(f"teacher lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError(f"ema_momentum must be in [0, 1], got {self.ema_momentum}")
        if self.update_order not in TEACHER_UPDATE_ORDERS:
            raise ValueError(f"update_order must be one of {TEACHER_UPDATE_ORDERS}, "
                             f"got {self.update_order!r}")


@dataclass
class DomainEntry:
    """One domain of the adaptation sequence."""

    name: str
    kind: str = "clean"
    severity: float = 0.0

    def __post_init__(self):
        if not self.name:
            raise ValueError("domain name must be non-empty")
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"domain kind must be one of {CORRUPTION_KINDS}, "
                             f"got {self.kind!r}")
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError(f"domain severity must be in [0, 1], got {self.severity}")


def _standard_domains() -> list[DomainEntry]:
    return [
        DomainEntry("dusk", "night", 0.25),
        DomainEntry("rain", "rain", 0.9),
        DomainEntry("night", "night", 0.7),
    ]


@dataclass
class SequenceSettings:
    """Shape of the online sequence: domains cycled over rounds."""

    rounds: int = 3
    frames_per_domain: int = 60
    height: int = 64
    width: int = 128
    domains: list[DomainEntry] = field(default_factory=_standard_domains)

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if self.frames_per_domain < 1:
            raise ValueError(f"frames_per_domain must be >= 1, "
                             f"got {self.frames_per_domain}")
        if self.height < 8 or self.width < 8:
            raise ValueError(f"frame size must be at least 8x8, "
                             f"got {self.height}x{self.width}")
        if not self.domains:
            raise ValueError("sequence needs at least one domain")
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise ValueError(f"domain names must be unique, got {names}")


@dataclass
class OptimizerSettings:
    """Student update mode and the learning rates of both warm-up phases."""

    adapt_mode: str = "student_peft"
    student_lr: float = 2e-3
    warmup_epochs: int = 12
    warmup_lr: float = 5e-4
    phase1_epochs: int = 6
    phase1_lr: float = 1e-3
    source_frames: int = 60
    gate_sparsity: float = 0.0

    def __post_init__(self):
        if self.adapt_mode not in ADAPT_MODES:
            raise ValueError(f"adapt_mode must be one of {ADAPT_MODES}, "
                             f"got {self.adapt_mode!r}")
        for name in ("student_lr", "warmup_lr", "phase1_lr", "gate_sparsity"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("warmup_epochs", "phase1_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.source_frames < 1:
            raise ValueError(f"source_frames must be >= 1, got {self.source_frames}")


@dataclass
class SeedSettings:
    """Warm-up seed and the per-run sequence seeds."""

    warmup: int = 2025
    runs: list[int] = field(default_factory=lambda: [0, 1, 2])

    def __post_init__(self):
        if not self.runs:
            raise ValueError("seeds.runs must hold at least one seed")
        if len(set(self.runs)) != len(self.runs):
            raise ValueError(f"seeds.runs must be unique, got {self.runs}")


@dataclass
class RunConfig:
    """Full description of one warm-up + adaptation run."""

    model: ModelConfig = field(default_factory=ModelConfig)
    moe: MoEConfig = field(default_factory=MoEConfig)
    proxy: ProxyParams = field(default_factory=ProxyParams)
    teacher: TeacherSettings = field(default_factory=TeacherSettings)
    loss: LossConfig = field(default_factory=LossConfig)
    sequence: SequenceSettings = field(default_factory=SequenceSettings)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    seeds: SeedSettings = field(default_factory=SeedSettings)

    def __post_init__(self):
        stride = 2 ** self.model.encoder_blocks
        if self.sequence.height % stride or self.sequence.width % stride:
            raise ValueError(
                f"sequence frame size {self.sequence.height}x{self.sequence.width} "
                f"must be divisible by the encoder stride {stride}")

    def domain_specs(self) -> list[DomainSpec]:
        seq = self.sequence
        return [
            DomainSpec(name=d.name, kind=d.kind, severity=d.severity,
                       frames=seq.frames_per_domain,
                       height=seq.height, width=seq.width)
            for d in seq.domains
        ]


_SECTIONS = {
    "model": ModelConfig,
    "moe": MoEConfig,
    "proxy": ProxyParams,
    "teacher": TeacherSettings,
    "loss": LossConfig,
    "sequence": SequenceSettings,
    "optimizer": OptimizerSettings,
    "seeds": SeedSettings,
}


def _coerce(value, annotation, path):
    """Nudge YAML scalars toward the annotated field type.

    YAML 1.1 reads ``1e-3`` as a string, so float fields accept numeric
    strings; int fields stay strict (a float there is probably a typo).
    """
    name = annotation if isinstance(annotation, str) else getattr(
        annotation, "__name__", str(annotation))
    base = name.replace(" | None", "").strip()
    if value is None:
        return None
    if base == "float":
        if isinstance(value, bool):
            raise ValueError(f"config key '{path}' expects a number, got a bool")
        if isinstance(value, (int, float)):
            return float(value)
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ValueError(f"config key '{path}' expects a number, "
                             f"got {value!r}") from None
    if base == "int" and (isinstance(value, bool) or not isinstance(value, int)):
        raise ValueError(f"config key '{path}' expects an integer, got {value!r}")
    if base == "str" and isinstance(value, bool):
        # YAML 1.1 turns bare on/off into booleans; undo that for string
        # switches like loss.photometric.
        return "on" if value else "off"
    return value


def _build_section(cls, data, path):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValueError(f"config section '{path}' must be a mapping, "
                         f"got {type(data).__name__}")
    fields_by_name = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        attr = _RENAME.get(key, key)
        if attr not in fields_by_name:
            raise ValueError(f"unknown config key '{path}.{key}'")
        if attr == "domains":
            value = _build_domains(value, f"{path}.{key}")
        else:
            value = _coerce(value, fields_by_name[attr].type, f"{path}.{key}")
        kwargs[attr] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValueError(f"config section '{path}': {exc}") from None


def _build_domains(value, path):
    if not isinstance(value, list):
        raise ValueError(f"config key '{path}' must be a list, "
                         f"got {type(value).__name__}")
    return [_build_section(DomainEntry, entry, f"{path}[{i}]")
            for i, entry in enumerate(value)]


def parse_config(text: str) -> RunConfig:
    """Build a RunConfig from YAML text; empty text means all defaults."""
    data = yaml.safe_load(text)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValueError(f"config root must be a mapping, got {type(data).__name__}")
    sections = {}
    for key, value in data.items():
        if key not in _SECTIONS:
            raise ValueError(f"unknown config section '{key}'")
        sections[key] = _build_section(_SECTIONS[key], value, key)
    return RunConfig(**sections)


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def _section_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = _RENAME_BACK.get(f.name, f.name)
        if f.name == "domains":
            value = [dataclasses.asdict(d) for d in value]
        out[key] = value
    return out


def emit_config(cfg: RunConfig) -> str:
    """Serialize with every default materialized; inverse of parse_config."""
    doc = {name: _section_dict(getattr(cfg, name)) for name in _SECTIONS}
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=False)


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(emit_config(cfg))
