"""Line-based ``key=value`` run configuration."""

from dataclasses import dataclass, fields, replace
from fractions import Fraction

from .netbuilder import ModelConfig, normalize_variant

CANONICAL_RATIOS = (1.0, 2.0, 3.0, 0.5, 1.0 / 3.0)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    variant: str = "MDCN-I2"
    profile: str = "toy"
    input_size: int = 150
    anchor_smin: float = 0.2
    anchor_smax: float = 0.9
    aspect_ratios: str = "1,2,3,1/2,1/3"
    alpha: float = 1.0
    neg_ratio: int = 3
    match_threshold: float = 0.5
    base_lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    iterations: int = 1500
    warmup: int = 0
    batch_size: int = 8
    flip: bool = True
    crop: bool = False
    checkpoint_every: int = 0
    n_images: int = 500
    eval_images: int = 100
    seed: int = 0
    nms_threshold: float = 0.45
    conf_floor: float = 0.01
    top_k: int = 200
    output_dir: str = "runs/toy"

    def __post_init__(self):
        validate(self)

    def model_config(self):
        if self.profile == "toy":
            return ModelConfig.toy(self.input_size)
        return replace(ModelConfig(), input_size=self.input_size)


def _ratio(s):
    return float(Fraction(s.strip()))


def validate(cfg):
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    try:
        normalize_variant(cfg.variant)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    need(cfg.profile in ("toy", "canonical"), f"profile must be toy or canonical, got {cfg.profile!r}")
    need(cfg.input_size >= 75, "input_size must be >= 75")
    need(0 < cfg.anchor_smin < cfg.anchor_smax <= 1, "need 0 < anchor_smin < anchor_smax <= 1")
    try:
        ratios = sorted(_ratio(r) for r in cfg.aspect_ratios.split(","))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"bad aspect_ratios {cfg.aspect_ratios!r}") from None
    need(ratios == sorted(CANONICAL_RATIOS), "aspect_ratios must be the set 1,2,3,1/2,1/3")
    need(cfg.alpha > 0, "alpha must be positive")
    need(cfg.neg_ratio >= 0, "neg_ratio must be >= 0")
    need(0 < cfg.match_threshold < 1, "match_threshold must lie in (0, 1)")
    need(cfg.base_lr >= 0, "base_lr must be >= 0")
    need(0 <= cfg.momentum < 1, "momentum must lie in [0, 1)")
    need(cfg.weight_decay >= 0, "weight_decay must be >= 0")
    need(cfg.iterations >= 1, "iterations must be >= 1")
    need(cfg.warmup >= 0, "warmup must be >= 0")
    need(cfg.batch_size >= 1, "batch_size must be >= 1")
    need(cfg.checkpoint_every >= 0, "checkpoint_every must be >= 0")
    need(cfg.n_images >= 1 and cfg.eval_images >= 0, "n_images must be >= 1, eval_images >= 0")
    need(cfg.seed >= 0, "seed must be >= 0")
    need(0 < cfg.nms_threshold < 1, "nms_threshold must lie in (0, 1)")
    need(0 <= cfg.conf_floor < 1, "conf_floor must lie in [0, 1)")
    need(cfg.top_k >= 1, "top_k must be >= 1")


def _convert(name, typ, raw):
    if typ is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{name}: expected {typ.__name__}, got {raw!r}") from None


_TYPES = {f.name: f.type for f in fields(Config)}


def parse_config(text, base=None):
    """Parse ``key=value`` lines over ``base`` (defaults).  ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value")
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, _TYPES[key], value)
    return replace(base or Config(), **values)


def override(cfg, **flags):
    """Apply command-line flags (``None`` means not given)."""
    given = {k: v for k, v in flags.items() if v is not None}
    unknown = set(given) - set(_TYPES)
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}")
    return replace(cfg, **given)


def dump_config(cfg):
    lines = []
    for f in fields(Config):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"
