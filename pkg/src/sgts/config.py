"""Flat `key = value` run configuration with desk-scale defaults."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields


class ConfigError(ValueError):
    """Unparseable or invalid configuration."""


@dataclass
class RunConfig:
    seed: int = 42
    image_size: int = 64
    num_classes: int = 4
    epochs: int = 60
    batch_size: int = 8
    warmup_fraction: float = 0.25
    alpha_start: float = 0.9
    alpha_end: float = 0.01
    tau_start: float = 0.95
    tau_end: float = 0.25
    ema_beta: float = 0.999
    lr_start: float = 0.01
    lr_end: float = 0.00001
    weight_decay: float = 0.001
    clip_norm: float = 1.0
    patience: int = 15
    annot_fraction: float = 0.3
    train_size: int = 200
    val_size: int = 40
    test_size: int = 40
    co_training: bool = True  # false = warm-up-only baseline

    def validate(self) -> "RunConfig":
        if self.image_size < 32 or self.image_size % 2:
            raise ConfigError("image_size must be even and >= 32")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ConfigError("epochs, batch_size, patience must be positive")
        if not 0.0 < self.annot_fraction <= 1.0:
            raise ConfigError("annot_fraction must lie in (0, 1]")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must lie in (0, 1)")
        return self


def _coerce(name: str, kind: type, raw: str, lineno: int):
    try:
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"line {lineno}: cannot parse {name!r} value "
                          f"{raw!r} as {kind.__name__}") from None


def parse_config(text: str) -> RunConfig:
    """Parse flat `key = value` lines; '#' starts a comment; unknown keys are
    rejected with their line number."""
    types = {f.name: f.type for f in fields(RunConfig)}
    # dataclass field types arrive as strings under `from __future__ import
    # annotations`
    kinds = {"int": int, "float": float, "bool": bool, "str": str}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected `key = value`, got "
                              f"{stripped!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        kind = kinds.get(str(types[key]), str)
        values[key] = _coerce(key, kind, raw, lineno)
    return RunConfig(**values).validate()


def serialize_config(config: RunConfig) -> str:
    lines = [f"{name} = {value}" for name, value in asdict(config).items()]
    return "\n".join(lines) + "\n"
