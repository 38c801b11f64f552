"""Run configuration: flat ``section.key = value`` text files with presets.

Unknown keys are rejected. ``preset`` (if present) is applied before the
other keys regardless of its position in the file.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class ModelConfig:
    d_model: int = 256
    enc_layers: int = 6
    dec_layers: int = 5
    num_queries: int = 150
    heads: int = 8
    points: int = 4
    num_classes: int = 65
    ffn_ratio: int = 4


@dataclass
class DataConfig:
    window: int = 256
    train_stride_ratio: float = 0.75
    infer_stride_ratio: float = 0.25
    train_dir: str = ""
    eval_dir: str = ""
    synth_num_videos: int = 200
    synth_num_heldout: int = 50
    synth_length: int = 1024
    synth_overlap_level: int = 5
    synth_noise_sigma: float = 0.1
    synth_snippet_seconds: float = 0.5
    synth_min_instances: int = 3
    synth_max_instances: int = 12


@dataclass
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 0.05
    epochs: int = 30
    lr_drop_epochs: int = 3
    lr_drop_factor: float = 0.1
    clip_norm: float = 1.0
    ema: bool = True
    ema_decay: float = 0.999
    seed: int = 42
    batch_size: int = 16
    dtype: str = "float32"


@dataclass
class LossConfig:
    cost_cls: float = 6.0
    cost_iou: float = 2.0
    cost_l1: float = 5.0
    loss_cls: float = 2.0
    loss_iou: float = 2.0
    loss_l1: float = 5.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass
class AblationConfig:
    level: str = "dual"          # dual | instance | boundary
    branch: str = "two-branch"   # two-branch | shared
    align: str = "on"            # on | off
    init: str = "joint"          # joint | position-only | learned
    refine: str = "parallel"     # parallel | boundary-first | instance-first | off
                                 # | position-and-content | last-layer


SECTIONS = ("model", "data", "train", "loss", "ablation")

PRESETS: dict[str, dict[str, object]] = {
    "long": {},
    "tiny": {
        "model.d_model": 64, "model.enc_layers": 2, "model.dec_layers": 2,
        "model.num_queries": 20, "model.heads": 4, "model.points": 2,
        "model.num_classes": 3,
        "data.window": 128, "data.synth_num_videos": 200, "data.synth_num_heldout": 50,
        "data.synth_length": 128, "data.synth_overlap_level": 2,
        "data.synth_noise_sigma": 0.1,
        "train.epochs": 15, "train.batch_size": 4, "train.lr": 1e-3,
        "train.lr_drop_epochs": 3,
    },
}

# Named rows of the dual-level ablation, expressed as ablation overrides.
ABLATION_ROWS: dict[str, dict[str, str]] = {
    "instance-level": {"level": "instance", "branch": "two-branch", "align": "off",
                       "init": "joint", "refine": "off"},
    "boundary-level": {"level": "boundary", "branch": "two-branch", "align": "off",
                       "init": "joint", "refine": "off"},
    "simple-combine": {"level": "dual", "branch": "shared", "align": "off",
                       "init": "learned", "refine": "off"},
    "two-branch": {"level": "dual", "branch": "two-branch", "align": "off",
                   "init": "learned", "refine": "off"},
    "query-align": {"level": "dual", "branch": "two-branch", "align": "on",
                    "init": "position-only", "refine": "parallel"},
    "joint-init": {"level": "dual", "branch": "two-branch", "align": "on",
                   "init": "joint", "refine": "parallel"},
}


def _parse_value(raw: str, typ, key: str):
    try:
        if typ is bool or typ == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


@dataclass
class RunConfig:
    preset: str = "long"
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    # -- flat key access -------------------------------------------------
    def keys(self) -> list[str]:
        out = ["preset"]
        for sec in SECTIONS:
            out += [f"{sec}.{f.name}" for f in fields(getattr(self, sec))]
        return out

    def get(self, key: str):
        if key == "preset":
            return self.preset
        sec, _, name = key.partition(".")
        return getattr(getattr(self, sec), name)

    def set(self, key: str, value) -> None:
        if key == "preset":
            self.apply_preset(str(value))
            return
        sec, _, name = key.partition(".")
        if sec not in SECTIONS or name not in {f.name for f in fields(getattr(self, sec))}:
            raise ConfigError(f"unknown config key {key!r}")
        section = getattr(self, sec)
        typ = {f.name: f.type for f in fields(section)}[name]
        if isinstance(value, str):
            value = _parse_value(value, typ, key)
        setattr(section, name, value)

    def apply_preset(self, name: str) -> None:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r} (choose from {', '.join(PRESETS)})")
        self.preset = name
        for k, v in PRESETS[name].items():
            self.set(k, v)

    def override(self, **pairs) -> "RunConfig":
        """Copy with ``section__key=value`` overrides."""
        cfg = dataclasses.replace(
            self, **{s: dataclasses.replace(getattr(self, s)) for s in SECTIONS})
        for k, v in pairs.items():
            cfg.set(k.replace("__", "."), v)
        return cfg

    def use_ablation_row(self, row: str) -> "RunConfig":
        if row not in ABLATION_ROWS:
            raise ConfigError(f"unknown ablation row {row!r}")
        return self.override(**{f"ablation__{k}": v for k, v in ABLATION_ROWS[row].items()})

    # -- text format -------------------------------------------------------
    def to_text(self) -> str:
        lines = ["# dualdetr run configuration"]
        for key in self.keys():
            v = self.get(key)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, check_paths: bool = True) -> "RunConfig":
        pairs = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            pairs.append((lineno, k, v))
        cfg = cls()
        for lineno, k, v in pairs:
            if k == "preset":
                cfg.apply_preset(v)
        for lineno, k, v in pairs:
            if k == "preset":
                continue
            try:
                cfg.set(k, v)
            except ConfigError as exc:
                raise ConfigError(f"line {lineno}: {exc}") from None
        cfg.validate(check_paths=check_paths)
        return cfg

    @classmethod
    def load(cls, path: str | Path, check_paths: bool = True) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), check_paths)

    @classmethod
    def preset_config(cls, name: str) -> "RunConfig":
        cfg = cls()
        cfg.apply_preset(name)
        return cfg

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    # -- validation ----------------------------------------------------------
    @property
    def layout(self) -> str:
        a = self.ablation
        if a.level == "dual":
            return "shared" if a.branch == "shared" else "dual"
        return a.level

    def validate(self, check_paths: bool = True) -> "RunConfig":
        m, d, a = self.model, self.data, self.ablation
        if m.num_classes < 1:
            raise ConfigError("model.num_classes must be at least 1")
        if m.d_model % 4:
            raise ConfigError(f"model.d_model={m.d_model} must be divisible by 4")
        if min(m.heads, m.points, m.num_queries, m.dec_layers) < 1 or m.enc_layers < 0:
            raise ConfigError("model sizes must be positive (enc_layers may be 0)")
        if m.num_queries > d.window:
            raise ConfigError(
                f"model.num_queries={m.num_queries} exceeds data.window={d.window}")
        if d.window <= 0:
            raise ConfigError("data.window must be positive")
        for key, val in (("level", a.level), ("branch", a.branch), ("align", a.align),
                         ("init", a.init), ("refine", a.refine)):
            allowed = {
                "level": ("dual", "instance", "boundary"),
                "branch": ("two-branch", "shared"),
                "align": ("on", "off"),
                "init": ("joint", "position-only", "learned"),
                "refine": ("parallel", "boundary-first", "instance-first", "off",
                           "position-and-content", "last-layer"),
            }[key]
            if val not in allowed:
                raise ConfigError(f"ablation.{key}={val!r} not in {allowed}")
        widths = {"dual": (m.d_model // 4, m.d_model // 2), "shared": (m.d_model,),
                  "instance": (m.d_model,), "boundary": (m.d_model // 2,)}[self.layout]
        for w in widths + (m.d_model,):
            if w % m.heads or w % 2:
                raise ConfigError(
                    f"model.heads={m.heads} must divide every branch width {widths}")
        if self.layout == "dual" and (m.d_model // 2) % 4:
            raise ConfigError("instance width d_model/2 must be divisible by 4")
        if a.align == "on":
            if a.level != "dual":
                raise ConfigError(f"ablation.align=on conflicts with ablation.level={a.level}")
            if a.branch == "shared":
                raise ConfigError("ablation.align=on conflicts with ablation.branch=shared")
            if a.init == "learned":
                raise ConfigError(
                    "ablation.align=on conflicts with ablation.init=learned "
                    "(aligned queries take positions from encoder proposals)")
        else:
            if a.refine != "off":
                raise ConfigError(
                    f"ablation.refine={a.refine} conflicts with ablation.align=off")
            if a.level == "dual" and a.init != "learned":
                raise ConfigError(
                    f"ablation.init={a.init} conflicts with ablation.align=off for level=dual")
        if a.level != "dual" and a.branch != "two-branch":
            raise ConfigError(f"ablation.branch={a.branch} needs ablation.level=dual")
        if self.train.dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype must be float32 or float64")
        if check_paths:
            for key in ("train_dir", "eval_dir"):
                p = getattr(d, key)
                if p and not Path(p).exists():
                    raise ConfigError(f"data.{key} does not exist: {p}")
        return self
