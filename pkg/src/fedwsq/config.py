"""Experiment configuration: flat key=value files with typed validation.

Unknown keys are hard errors; silent typos would invalidate experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_list(s: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in s.replace(",", " ").split())


@dataclass
class RunConfig:
    # model
    layer_sizes: tuple[int, ...] = (32, 128, 64, 10)
    activation: str = "relu"
    use_group_norm: bool = True
    groups: int = 8
    ws_enabled: bool = True
    rho: float = 0.001

    # federation
    num_clients: int = 100
    participation_rate: float = 0.05
    rounds: int = 100
    local_epochs: int = 5
    iterations_per_epoch: int = 10
    lr0: float = 0.1
    lr_decay: float = 0.995
    weight_decay: float = 0.001
    clip_norm: float = 10.0
    beta: float = 0.1
    quantizer: str = "danuq"  # danuq | uniform | none
    alloc: str = "constant"  # constant | fba | dba
    bits: int = 4
    dequant_scale: str = "local"  # local | global
    aggregate: str = "weighted"  # weighted | sum

    # data
    iid: bool = False
    alpha: float = 0.3
    num_classes: int = 10
    samples_per_class: int = 100
    test_per_class: int = 20
    spread: float = 3.0

    # run
    seed: int = 0
    ema_smoothing: float = 0.9
    eval_every: int = 1
    record_timing: bool = False

    def validate(self) -> None:
        if self.activation not in ("relu", "tanh"):
            raise ConfigError(f"invalid activation: {self.activation}")
        if self.quantizer not in ("danuq", "uniform", "none"):
            raise ConfigError(f"invalid quantizer: {self.quantizer}")
        if self.alloc not in ("constant", "fba", "dba"):
            raise ConfigError(f"invalid alloc: {self.alloc}")
        if self.bits not in (1, 2, 4):
            raise ConfigError(f"invalid bits: {self.bits}")
        if self.dequant_scale not in ("local", "global"):
            raise ConfigError(f"invalid dequant_scale: {self.dequant_scale}")
        if self.aggregate not in ("weighted", "sum"):
            raise ConfigError(f"invalid aggregate: {self.aggregate}")
        if not (0 < self.participation_rate <= 1):
            raise ConfigError(f"invalid participation_rate: {self.participation_rate}")
        if not (0 < self.beta <= 1):
            raise ConfigError(f"invalid beta: {self.beta}")
        if not (0 <= self.ema_smoothing < 1):
            raise ConfigError(f"invalid ema_smoothing: {self.ema_smoothing}")
        if self.alpha <= 0:
            raise ConfigError(f"invalid alpha: {self.alpha}")
        for name in ("num_clients", "rounds", "local_epochs", "iterations_per_epoch",
                     "num_classes", "samples_per_class", "test_per_class", "eval_every"):
            if getattr(self, name) < (0 if name == "rounds" else 1):
                raise ConfigError(f"invalid {name}: {getattr(self, name)}")
        if self.lr0 <= 0 or self.lr_decay <= 0 or self.clip_norm <= 0 or self.rho <= 0:
            raise ConfigError("lr0, lr_decay, clip_norm and rho must be positive")
        if self.weight_decay < 0 or self.spread <= 0:
            raise ConfigError("weight_decay must be >= 0 and spread > 0")
        if self.layer_sizes[-1] != self.num_classes:
            raise ConfigError(
                f"final layer width {self.layer_sizes[-1]} != num_classes {self.num_classes}"
            )

    def serialize(self) -> str:
        """Emit every effective value, defaults included, one key per line."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config(text: str) -> RunConfig:
    """Parse a flat key=value config; '#' starts a comment, unknown keys raise."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key: {key}")
        try:
            values[key] = _convert(key, val)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key}: {val!r} ({exc})") from exc
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def _convert(key: str, val: str):
    proto = getattr(RunConfig, "__dataclass_fields__")[key].default
    if isinstance(proto, bool):
        return _parse_bool(val)
    if isinstance(proto, int):
        return int(val)
    if isinstance(proto, float):
        return float(val)
    if isinstance(proto, tuple):
        return _parse_int_list(val)
    return val


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())
