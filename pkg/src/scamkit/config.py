"""Run configuration: line-oriented `key = value` text, flags override file,
unknown keys rejected, every parameter validated against its declared range.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    """Raised on unknown keys or out-of-range values (exit code 2)."""


def _env_threads() -> int:
    raw = os.environ.get("SCAMKIT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"SCAMKIT_THREADS must be an integer, got {raw!r}")


@dataclass
class RunConfig:
    seed: int = 7
    out_dir: str = "runs"
    # corpus geometry
    classes: int = 6
    seqs_per_class: int = 10
    frames_per_seq: int = 30
    frame_hw: int = 64
    fine_hw: int = 96
    # reasoning / fusion hyperparameters
    m: int = 3
    n: int = 2
    td: float = 0.8
    tr: float = 0.6
    lam: float = 1e-8
    frl: str = "on"
    # training
    lr: float = 0.00005  # distillation default; see lr_fp resolution below
    lr_cls: float = 0.05
    lr_switch: float = 0.05
    lr_plus: float = 0.01
    lr_fp: float = 0.0  # 0 -> falls back to `lr`
    batch_coarse: int = 20
    batch_fine: int = 3
    batch_plus: int = 16
    batch_fp: int = 3
    epochs_cls: int = 30
    epochs_plus: int = 30
    epochs_switch: int = 12
    epochs_fp: int = 20
    cls_stride: int = 3
    fp_stride: int = 3
    # command selection (flags usually set these)
    net: str = ""
    stage: str = "coarse"
    method: str = "scam+"
    fuse: str = "final"
    threads: int = field(default_factory=_env_threads)

    def validate(self) -> None:
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.classes < 2:
            raise ConfigError("classes must be >= 2")
        if self.seqs_per_class < 1:
            raise ConfigError("seqs_per_class must be >= 1")
        if self.frames_per_seq < 12:
            raise ConfigError("frames_per_seq must be >= 12 (granularity sampling)")
        if self.frame_hw < 32 or self.frame_hw % 8:
            raise ConfigError("frame_hw must be a multiple of 8, >= 32")
        if self.fine_hw < 32 or self.fine_hw % 8:
            raise ConfigError("fine_hw must be a multiple of 8, >= 32")
        from .nets import _grid_factors
        from .tensor import ShapeError

        try:
            _grid_factors(self.frame_hw // 8)
            _grid_factors(self.fine_hw // 8)
        except ShapeError as exc:
            raise ConfigError(str(exc))
        if self.m < 1:
            raise ConfigError("m must be >= 1")
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if not 0.0 < self.td <= 1.0:
            raise ConfigError("td must be in (0,1]")
        if not 0.0 < self.tr <= 1.0:
            raise ConfigError("tr must be in (0,1]")
        if self.lam <= 0.0:
            raise ConfigError("lam must be > 0")
        if self.frl not in ("on", "off"):
            raise ConfigError("frl must be 'on' or 'off'")
        for name in ("lr", "lr_cls", "lr_switch", "lr_plus"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.lr_fp < 0:
            raise ConfigError("lr_fp must be >= 0 (0 falls back to lr)")
        for name in ("batch_coarse", "batch_fine", "batch_plus", "batch_fp",
                     "epochs_cls", "epochs_plus", "epochs_switch", "epochs_fp",
                     "cls_stride", "fp_stride", "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.net not in ("", "s", "sa", "st", "s+", "sa+", "st+",
                            "sta", "sta+short", "sta+long"):
            raise ConfigError(f"unknown net {self.net!r}")
        if self.stage not in ("coarse", "fine"):
            raise ConfigError(f"stage must be coarse|fine, got {self.stage!r}")
        if self.method not in ("cam", "ac", "scam", "scam+"):
            raise ConfigError(f"method must be cam|ac|scam|scam+, got {self.method!r}")
        if self.fuse not in ("single", "final", "agg"):
            raise ConfigError(f"fuse must be single|final|agg, got {self.fuse!r}")

    @property
    def fp_learning_rate(self) -> float:
        return self.lr_fp if self.lr_fp > 0 else self.lr

    @property
    def frl_on(self) -> bool:
        return self.frl == "on"

    def canonical_text(self) -> str:
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            if f.name == "threads":  # worker count never changes results
                continue
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_INT_KEYS = {f.name for f in fields(RunConfig)
             if f.type in ("int",)}
_FLOAT_KEYS = {f.name for f in fields(RunConfig) if f.type in ("float",)}
_STR_KEYS = {f.name for f in fields(RunConfig) if f.type in ("str",)}


def _coerce(key: str, raw: str):
    raw = raw.strip()
    if key in _INT_KEYS:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key} expects an integer, got {raw!r}")
    if key in _FLOAT_KEYS:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key} expects a number, got {raw!r}")
    if key in _STR_KEYS:
        return raw
    raise ConfigError(f"unknown config key {key!r}")


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.split("#", 1)[0]
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, value))
    return cfg


def load_config(path=None, overrides=None) -> RunConfig:
    """Config file first, then key=value overrides (flags win)."""
    cfg = RunConfig()
    if path is not None:
        text = Path(path).read_text()
        cfg = parse_config_text(text, cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, value))
    cfg.validate()
    return cfg
