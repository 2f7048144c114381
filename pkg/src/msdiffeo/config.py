"""Flat ``key = value`` run configuration with CLI overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .optimizer import OptimizerConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    source: str | None = None
    target: str | None = None
    image_dir: str | None = None
    output: str = "out"
    emit_grids: bool = True
    emit_heatmaps: bool = True
    emit_trace: bool = True
    emit_figures: bool = True
    dump_gradients: bool = False

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self.optimizer)
        out.update({f.name: getattr(self, f.name) for f in fields(self) if f.name != "optimizer"})
        return out

    def write(self, path) -> None:
        lines = [f"{k} = {_render(v)}" for k, v in self.to_dict().items()]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


_OPT_FIELDS = {f.name: f for f in fields(OptimizerConfig)}
_RUN_FIELDS = {f.name: f for f in fields(RunConfig) if f.name != "optimizer"}


def _render(v) -> str:
    return "none" if v is None else str(v).lower() if isinstance(v, bool) else str(v)


def _convert(key: str, raw: str, f) -> Any:
    text = raw.strip()
    kind = str(f.type)
    if text.lower() in ("none", "") and "None" in kind:
        return None
    try:
        if kind.startswith("bool"):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return text


def parse_pairs(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    """Apply raw string settings on top of ``base``; unknown keys are errors."""
    base = base or RunConfig()
    opt = dataclasses.asdict(base.optimizer)
    run = {k: getattr(base, k) for k in _RUN_FIELDS}
    for key, raw in pairs.items():
        key = key.strip().replace("-", "_")
        if key in _OPT_FIELDS:
            opt[key] = _convert(key, raw, _OPT_FIELDS[key])
        elif key in _RUN_FIELDS:
            run[key] = _convert(key, raw, _RUN_FIELDS[key])
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        return RunConfig(optimizer=OptimizerConfig(**opt), **run)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def read_pairs(path) -> dict[str, str]:
    pairs = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    pairs = read_pairs(path) if path else {}
    pairs.update(overrides or {})
    return parse_pairs(pairs)
