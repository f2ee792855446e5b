"""Sectioned ``key = value`` run configuration with strict key checking."""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .grvit import TRANSFER_MODES
from .model import ModelConfig
from .stf import SKIP_MODES


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    base_channels: int = 96
    encoder_depths: list[int] = field(default_factory=lambda: [2, 2, 6, 2])
    decoder_depths: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    heads: list[int] = field(default_factory=lambda: [3, 6, 12, 24])
    window: int = 4
    ffn_ratio: int = 4
    skip_mode: str = "stf"
    transfer_mode: str = "update_gate"
    recurrence: bool = True
    grvit_scales: str = "all"
    event_norm: str = "log1p"


@dataclass
class TrainSection:
    epochs: int = 20
    batch_size: int = 2
    t_bptt: int = 8
    max_lr: float = 3.2e-5
    warmup_fraction: float = 0.3
    start_div: float = 25.0
    final_div: float = 75.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    si_lambda: float = 0.85
    grad_match_weight: float = 0.0
    seed: int = 0


@dataclass
class DataSection:
    width: int = 64
    height: int = 64
    num_sequences: int = 5
    val_every: int = 5
    duration_us: int = 800_000
    dt_us: int = 50_000
    n_planes: int = 3
    speed: float = 1.5
    threshold: float = 0.2
    pause_period_us: int = 0
    pause_fraction: float = 0.0
    seed: int = 0


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        t, d, m = self.train, self.data, self.model
        if t.max_lr <= 0 or t.start_div <= 0 or t.final_div <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 < t.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must lie in (0, 1)")
        if t.t_bptt < 1 or t.batch_size < 1 or t.epochs < 1:
            raise ConfigError("t_bptt, batch_size and epochs must be at least 1")
        if t.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if not 0.0 <= t.si_lambda <= 1.0 or t.grad_match_weight < 0:
            raise ConfigError("si_lambda must lie in [0, 1] and grad_match_weight be non-negative")
        if d.dt_us <= 0 or d.duration_us <= 0:
            raise ConfigError("dt_us and duration_us must be positive")
        if d.num_sequences < 2 or d.val_every < 2:
            raise ConfigError("need at least one training and one validation sequence")
        if m.skip_mode not in SKIP_MODES:
            raise ConfigError(f"skip_mode must be one of {SKIP_MODES}")
        if m.transfer_mode not in TRANSFER_MODES:
            raise ConfigError(f"transfer_mode must be one of {TRANSFER_MODES}")
        try:
            self.model_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def model_config(self) -> ModelConfig:
        m = self.model
        bb = BackboneConfig(m.base_channels, list(m.encoder_depths), list(m.decoder_depths), list(m.heads),
                            m.window, m.ffn_ratio)
        return ModelConfig(self.data.height, self.data.width, bb, m.skip_mode, m.transfer_mode,
                           m.recurrence, m.grvit_scales, m.event_norm)

    def replace(self, section: str, **changes) -> RunConfig:
        """Copy with some keys of one section changed."""
        new = {name: dataclasses.replace(getattr(self, name)) for name in SECTIONS}
        new[section] = dataclasses.replace(new[section], **changes)
        return RunConfig(**new)

    def to_text(self) -> str:
        """Canonical serialization: fixed section order, sorted keys, ``repr`` floats."""
        lines = []
        for name in SECTIONS:
            sec = getattr(self, name)
            lines.append(f"[{name}]")
            for f in sorted(dataclasses.fields(sec), key=lambda f: f.name):
                lines.append(f"{f.name} = {_format(getattr(sec, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


SECTIONS = {"model": ModelSection, "train": TrainSection, "data": DataSection}


def _format(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


_BOOLS = {"on": True, "true": True, "yes": True, "1": True, "off": False, "false": False, "no": False, "0": False}


def _coerce(raw: str, tp, where: str):
    raw = raw.strip()
    try:
        if tp is bool:
            return _BOOLS[raw.lower()]
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if typing.get_origin(tp) is list:
            return [int(x) for x in raw.split(",") if x.strip()]
    except (KeyError, ValueError):
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{where}: unsupported type {tp}")


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys are case-sensitive
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    unknown = set(cp.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {sorted(unknown)}")
    built = {}
    for name, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        values = {}
        if cp.has_section(name):
            for key, raw in cp.items(name):
                if key not in hints:
                    raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
                values[key] = _coerce(raw, hints[key], f"{source} [{name}] {key}")
        built[name] = cls(**values)
    return RunConfig(**built)


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


DESK_CONFIG = """\
# small model that trains in about two minutes per run on one CPU core
[model]
base_channels = 16
encoder_depths = 2,2,2,2
heads = 1,2,4,8

[train]
epochs = 20
t_bptt = 8
max_lr = 2e-3
seed = 0

[data]
# four training sequences and one held out
num_sequences = 5
val_every = 5
duration_us = 800000
pause_period_us = 400000
pause_fraction = 0.5
"""


def desk_config() -> RunConfig:
    return parse_config(DESK_CONFIG, "<desk>")


def ablation_config() -> RunConfig:
    """Desk config with four held-out sequences, so variant medians are not
    decided by a single validation scene."""
    return desk_config().replace("data", num_sequences=8, val_every=2)


# ----------------------------------------------------------------------
# scene specs for the simulator

def parse_scene(text: str, source: str = "<scene>"):
    """``[scene]`` keys of :class:`SceneSpec` plus ``[plane.N]`` sections.

    ``[scene] random_seed = N`` instead generates a random layout with the
    other scene keys as its arguments.
    """
    from .simulator import Plane, SceneSpec, random_scene

    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    if not cp.has_section("scene"):
        raise ConfigError(f"{source}: missing [scene] section")
    scene = dict(cp.items("scene"))
    kinds = {"width": int, "height": int, "duration_us": int, "threshold": float, "seed": int,
             "focal": float, "pause_period_us": int, "pause_fraction": float, "velocity": "pair",
             "random_seed": int, "n_planes": int, "speed": float}
    vals = {}
    for key, raw in scene.items():
        if key not in kinds:
            raise ConfigError(f"{source}: unknown key {key!r} in [scene]")
        if kinds[key] == "pair":
            parts = [p for p in raw.split(",") if p.strip()]
            if len(parts) != 2:
                raise ConfigError(f"{source}: velocity needs two comma-separated numbers")
            vals[key] = tuple(_coerce(p, float, f"{source} velocity") for p in parts)
        else:
            vals[key] = _coerce(raw, kinds[key], f"{source} [scene] {key}")
    plane_secs = [s for s in cp.sections() if s != "scene"]
    for s in plane_secs:
        if not s.startswith("plane."):
            raise ConfigError(f"{source}: unknown section [{s}]")
    try:
        if "random_seed" in vals:
            if plane_secs or "velocity" in vals or "focal" in vals or "seed" in vals:
                raise ConfigError(f"{source}: random scenes take no planes, velocity, focal or seed")
            return random_scene(vals.pop("random_seed"), **vals)
        for k in ("n_planes", "speed"):
            if k in vals:
                raise ConfigError(f"{source}: {k} only applies to random scenes")
        planes = []
        for s in sorted(plane_secs, key=lambda s: int(s.split(".", 1)[1]) if s.split(".", 1)[1].isdigit() else s):
            p = dict(cp.items(s))
            unknown = set(p) - {"depth", "seed", "extent"}
            if unknown:
                raise ConfigError(f"{source}: unknown key(s) {sorted(unknown)} in [{s}]")
            if "depth" not in p:
                raise ConfigError(f"{source}: [{s}] needs a depth")
            extent = None
            if "extent" in p:
                extent = tuple(_coerce(v, float, f"{source} [{s}] extent") for v in p["extent"].split(","))
                if len(extent) != 4:
                    raise ConfigError(f"{source}: extent needs x0,x1,y0,y1")
            planes.append(Plane(_coerce(p["depth"], float, f"{source} [{s}] depth"),
                                _coerce(p.get("seed", "0"), int, f"{source} [{s}] seed"), extent))
        return SceneSpec(planes=planes, **vals)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{source}: {e}") from None


def load_scene(path):
    path = Path(path)
    return parse_scene(path.read_text(), str(path))
