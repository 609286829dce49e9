"""Run configuration: ``key = value`` files, task presets and flag overrides.

Precedence is command-line flags over file values over defaults.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .distill import STAGE_SETS, KdConfig, LossWeights
from .errors import ConfigError
from .models import StudentConfig, TeacherConfig
from .neuron import LifParams

# task -> (noise sigma or None, epochs)
TASK_PRESETS: dict[str, tuple[float | None, int]] = {
    "denoise-sigma15": (15.0, 51),
    "denoise-sigma25": (25.0, 51),
    "denoise-sigma50": (50.0, 51),
    "motion-deblur": (None, 77),
    "dehaze": (None, 5),
    "derain": (None, 8),
    "defocus-deblur": (None, 208),
}


def _parse_bool(s: str) -> bool:
    v = s.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(s)


def _parse_ints(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.replace(",", " ").split())


def _parse_stages(s: str) -> str:
    if s in STAGE_SETS:
        return s
    _parse_ints(s)
    return s


def _opt_str(s: str) -> str | None:
    return s or None


@dataclass
class RunConfig:
    task: str = "denoise-sigma15"
    sigma: float | None = None
    epochs: int | None = None
    seed: int = 0
    # model
    levels: int = 4
    channels: tuple[int, ...] = (8, 16, 32, 64)
    blocks_per_level: int = 2
    timesteps: int = 4
    kernel: int = 3
    image_channels: int = 1
    attention: bool = True
    norm_init: float = 2.0
    beta: float = 0.5
    v_th: float = 1.0
    reset: str = "soft"
    surrogate_alpha: float = 2.0
    # objective
    kd: str = "decoder"
    gamma: float = 0.12
    kd_sum: bool = False
    lambda_freq: float = 0.1
    # data and training
    train_manifest: str | None = None
    val_manifest: str | None = None
    patch_size: int = 32
    patches_per_image: int = 8
    batch_size: int = 8
    wall_clock: bool = False
    # files
    teacher_checkpoint: str | None = None
    student_checkpoint: str | None = None
    out: str = "runs"

    def __post_init__(self):
        if self.task not in TASK_PRESETS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {sorted(TASK_PRESETS)}")
        self.channels = tuple(int(c) for c in self.channels)
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @property
    def noise_sigma(self) -> float:
        sigma = self.sigma if self.sigma is not None else TASK_PRESETS[self.task][0]
        if sigma is None:
            raise ConfigError(f"task {self.task!r} has no synthetic degradation; only denoising ships")
        return float(sigma)

    @property
    def n_epochs(self) -> int:
        return int(self.epochs if self.epochs is not None else TASK_PRESETS[self.task][1])

    def lif(self) -> LifParams:
        return LifParams(self.beta, self.v_th, self.reset, self.surrogate_alpha)

    def student_config(self) -> StudentConfig:
        return StudentConfig(levels=self.levels, channels=self.channels,
                             blocks_per_level=self.blocks_per_level, T=self.timesteps,
                             lif=self.lif(), kernel=self.kernel, image_channels=self.image_channels,
                             attention=self.attention, norm_init=self.norm_init)

    def teacher_config(self) -> TeacherConfig:
        return TeacherConfig.mirror(self.student_config())

    def kd_config(self, stages: str | None = None) -> KdConfig:
        sel = stages or self.kd
        parsed = sel if sel in STAGE_SETS else _parse_ints(sel)
        return KdConfig(gamma=self.gamma, stages=parsed, teacher_checkpoint=self.teacher_checkpoint,
                        sum_stages=self.kd_sum)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_freq)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


# key -> (field name, parser, type label)
_KEYS = {
    "task": ("task", str, "string"),
    "sigma": ("sigma", float, "float"),
    "epochs": ("epochs", int, "integer"),
    "seed": ("seed", int, "integer"),
    "levels": ("levels", int, "integer"),
    "channels": ("channels", _parse_ints, "integer list"),
    "blocks_per_level": ("blocks_per_level", int, "integer"),
    "timesteps": ("timesteps", int, "integer"),
    "kernel": ("kernel", int, "integer"),
    "image_channels": ("image_channels", int, "integer"),
    "attention": ("attention", _parse_bool, "boolean"),
    "norm_init": ("norm_init", float, "float"),
    "beta": ("beta", float, "float"),
    "v_th": ("v_th", float, "float"),
    "reset": ("reset", str, "string"),
    "surrogate_alpha": ("surrogate_alpha", float, "float"),
    "kd": ("kd", _parse_stages, "stage set"),
    "gamma": ("gamma", float, "float"),
    "kd_sum": ("kd_sum", _parse_bool, "boolean"),
    "lambda": ("lambda_freq", float, "float"),
    "lambda_freq": ("lambda_freq", float, "float"),
    "train_manifest": ("train_manifest", _opt_str, "path"),
    "val_manifest": ("val_manifest", _opt_str, "path"),
    "patch_size": ("patch_size", int, "integer"),
    "patches_per_image": ("patches_per_image", int, "integer"),
    "batch_size": ("batch_size", int, "integer"),
    "wall_clock": ("wall_clock", _parse_bool, "boolean"),
    "teacher_checkpoint": ("teacher_checkpoint", _opt_str, "path"),
    "student_checkpoint": ("student_checkpoint", _opt_str, "path"),
    "out": ("out", str, "path"),
}

_PATH_FIELDS = ("train_manifest", "val_manifest", "teacher_checkpoint", "student_checkpoint", "out")


def parse_values(text: str) -> dict:
    """Parse ``key = value`` lines into field values without applying them."""
    values: dict = {}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        name, parse, label = _KEYS[key]
        if name in seen:
            raise ConfigError(f"line {lineno}: {key!r} already set on line {seen[name]}")
        try:
            values[name] = parse(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: {key!r} expects a {label}, got {value!r}") from None
        seen[name] = lineno
    return values


def parse_config(text: str, base_dir=None) -> RunConfig:
    """Typed config with defaults filled in.

    Relative paths resolve against ``base_dir`` when given (normally the
    config file's directory).
    """
    values = parse_values(text)
    if base_dir is not None:
        for k in _PATH_FIELDS:
            if values.get(k) and not Path(values[k]).is_absolute():
                values[k] = str(Path(base_dir) / values[k])
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {str(p)!r} does not exist")
    return parse_config(p.read_text(), base_dir=p.parent)


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply non-``None`` overrides on top of ``cfg``."""
    changes = {k: v for k, v in overrides.items() if v is not None}
    try:
        return cfg.replace(**changes)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def dump_config(cfg: RunConfig) -> str:
    """Render ``cfg`` back to ``key = value`` text that :func:`parse_config` accepts."""
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if v is None:
            continue
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
