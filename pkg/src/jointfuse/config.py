"""Training configuration and its ``key = value`` text format.

One assignment per line, ``#`` starts a comment. Network and loss
settings use dotted keys::

    epochs = 40
    lr = 0.001
    use_seg_loss = false
    net.channels = 32
    loss.alpha2 = 6
"""
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .losses import LossConfig
from .network import NetConfig


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 2
    lr: float = 0.001
    plateau_patience: int = 3
    plateau_factor: float = 0.1
    plateau_threshold: float = 1e-4
    seed: int = 0
    use_dsm: bool = True
    use_det_loss: bool = True
    use_seg_loss: bool = True
    class_count: int = 3
    head_warmup_steps: int = 200
    head_lr: float = 0.003
    head_width: int = 16
    heads: str = "toy"  # or "package.module:factory" returning (class_count, width) -> heads
    shuffle: bool = True
    net: NetConfig = field(default_factory=NetConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience < 1:
            raise ConfigError("plateau_patience must be positive")
        if self.class_count < 2:
            raise ConfigError("class_count must be at least 2 (background plus one class)")
        if self.head_warmup_steps < 0:
            raise ConfigError("head_warmup_steps must be non-negative")
        if self.heads != "toy" and ":" not in self.heads:
            raise ConfigError(f"heads must be 'toy' or 'module:factory', got {self.heads!r}")
        if self.net.use_dsm != self.use_dsm:
            self.net = replace(self.net, use_dsm=self.use_dsm)

    def variant(self, **changes):
        return replace(self, **changes)


def _coerce(text, typ, key):
    text = text.strip()
    try:
        if typ is bool or typ == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int or typ == "int":
            return int(text)
        if typ is float or typ == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def _field_types(cls):
    return {f.name: f.type for f in fields(cls)}


def parse_config(text, base=None):
    base = base or TrainConfig()
    top, sub = {}, {"net": {}, "loss": {}}
    top_types = _field_types(TrainConfig)
    sub_types = {"net": _field_types(NetConfig), "loss": _field_types(LossConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if "." in key:
            group, name = key.split(".", 1)
            if group not in sub or name not in sub_types[group]:
                raise ConfigError(f"line {lineno}: unknown key {key}")
            sub[group][name] = _coerce(value, sub_types[group][name], key)
        else:
            if key not in top_types or key in sub:
                raise ConfigError(f"line {lineno}: unknown key {key}")
            top[key] = _coerce(value, top_types[key], key)
    net = replace(base.net, **sub["net"])
    if "use_dsm" in sub["net"] and "use_dsm" not in top:
        top["use_dsm"] = sub["net"]["use_dsm"]
    return replace(base, net=net, loss=replace(base.loss, **sub["loss"]), **top)


def load_config(path):
    return parse_config(Path(path).read_text())


def format_config(cfg):
    lines = []
    for f in fields(cfg):
        if f.name in ("net", "loss"):
            continue
        lines.append(f"{f.name} = {_fmt(getattr(cfg, f.name))}")
    for group in ("net", "loss"):
        obj = getattr(cfg, group)
        lines += [f"{group}.{f.name} = {_fmt(getattr(obj, f.name))}" for f in fields(obj)]
    return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return v
    return repr(v)
