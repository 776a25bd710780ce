"""Training configuration and the flat key-value config file format.

A config file holds one ``key = value`` pair per line; ``#`` starts a
comment. Values are parsed as Python literals (numbers, booleans, tuples,
quoted strings); anything else is kept as a bare string::

    # tau_d sweep arm
    tau_d = 0.3
    decay_steps = (300,)
    use_cons = True
"""

import ast
import dataclasses
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 400
    lr: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 1.0  # max gradient L2 norm per head; 0 disables
    lr_decay: float = 0.1
    decay_steps: tuple = (300,)
    distill_start: int = 312
    use_distill: bool = True
    gamma: float = 4.0
    tau_d: float = 0.5
    tau_m: float = 0.8
    alpha: float = 0.8
    beta: float = 0.2
    ema_rate: float = 0.999
    depth_k: float = 8.0
    tau_c: float = 0.3
    color_theta: float = 2.0
    color_space: str = "lab"  # "lab" (CIELAB units) or "rgb" ([0, 1] units)
    pairwise_dilation: int = 2
    region_pad: int = 4
    pairwise_start: int = 100  # pairwise terms are off before this step
    pairwise_warmup: int = 100  # then ramp linearly to full weight over this many steps
    box_prior_steps: int = 100  # warm start: dice toward the filled box for these steps
    box_prior_weight: float = 1.0
    restarts: int = 1  # independent head initialisations per instance
    probe_steps: int = 150  # steps each restart trains before the lowest-loss one is kept
    use_cons: bool = True
    use_depth: bool = True
    anchor_stride: int = 8
    student_scale_min: float = 0.8
    teacher_size: int = 0  # 0 keeps the teacher at native resolution
    init_scale: float = 0.5
    init_mask_bias: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "decay_steps", tuple(int(s) for s in self.decay_steps))
        self.validate()

    def validate(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        ds = self.decay_steps
        if any(b <= a for a, b in zip(ds, ds[1:])):
            raise ConfigError(f"decay_steps must be strictly increasing, got {ds}")
        if ds and ds[-1] >= self.total_steps:
            raise ConfigError(f"decay_steps {ds} must all be < total_steps={self.total_steps}")
        if self.use_distill and ds and self.distill_start < ds[0]:
            raise ConfigError("distill_start must not precede the first learning-rate decay")
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta > 1.0 + 1e-12:
            raise ConfigError("alpha, beta must be >= 0 with alpha + beta <= 1")
        if not 0.0 < self.ema_rate < 1.0:
            raise ConfigError("ema_rate must lie in (0, 1)")
        if not 0.0 < self.student_scale_min <= 1.0:
            raise ConfigError("student_scale_min must lie in (0, 1]")
        if self.color_space not in ("lab", "rgb"):
            raise ConfigError("color_space must be 'lab' or 'rgb'")
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")
        if self.restarts > 1 and not 0 < self.probe_steps <= min(self.total_steps, self.distill_start):
            raise ConfigError("probe_steps must lie in (0, min(total_steps, distill_start)]")
        if self.anchor_stride < 1 or self.pairwise_dilation < 1:
            raise ConfigError("anchor_stride and pairwise_dilation must be >= 1")

    def lr_at(self, step):
        return self.lr * self.lr_decay ** sum(1 for s in self.decay_steps if step >= s)

    def pairwise_weight(self, step):
        step = step - self.pairwise_start
        if step < 0:
            return 0.0
        if self.pairwise_warmup <= 0:
            return 1.0
        return min(step / self.pairwise_warmup, 1.0)

    def distilling(self, step):
        return self.use_distill and step >= self.distill_start

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["decay_steps"] = list(self.decay_steps)
        return d

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def parse_value(raw):
    raw = raw.strip()
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def parse_config_text(text, source="<config>"):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = parse_value(raw)
    return values


def coerce(key, value):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = _FIELDS[key].default
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise TypeError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(value) if isinstance(value, (list, tuple)) else (value,)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value {value!r} for {key}") from None
    return value


def build_config(file_values=None, overrides=None, base=None):
    merged = dict((base or TrainConfig()).to_dict())
    for src in (file_values or {}, overrides or {}):
        for key, value in src.items():
            merged[key] = coerce(key, value)
    return TrainConfig(**merged)


def load_config(path=None, overrides=None):
    values = parse_config_text(Path(path).read_text(), str(path)) if path else {}
    return build_config(values, overrides)


def preset_names():
    return sorted(p.name[:-4] for p in resources.files("dgmask.presets").iterdir()
                  if p.name.endswith(".cfg"))


def load_preset(name, overrides=None):
    ref = resources.files("dgmask.presets") / f"{name}.cfg"
    if not ref.is_file():
        raise ConfigError(f"unknown preset {name!r}; choose from {preset_names()}")
    return build_config(parse_config_text(ref.read_text(), name), overrides)


def write_config(cfg, path):
    lines = [f"{k} = {v!r}" for k, v in cfg.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n")
