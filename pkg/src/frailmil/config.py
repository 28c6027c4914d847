"""Flat ``key = value`` run configuration files.

Lines starting with ``#`` and blank lines are ignored; trailing ``# comments``
are stripped. Recognized keys are the :class:`~frailmil.mil.ModelConfig`
fields plus::

    m3_window = 46,135
    m6_window = 136,225
    facit_margin = 5
    handgrip_margin = 2
    class_weighting = true
    f1 = macro
    encoder_hidden = 128            # or phys:128,sleep:64,hrv:64
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .cohort import DEFAULT_MARGINS, HorizonWindows, Task, parse_modality
from .exceptions import ConfigError
from .mil import ModelConfig

_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    windows: HorizonWindows = field(default_factory=HorizonWindows)
    margins: dict = field(default_factory=lambda: dict(DEFAULT_MARGINS))
    class_weighting: bool = True
    f1: str = "macro"

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "windows": {"m3": list(self.windows.m3), "m6": list(self.windows.m6)},
            "margins": {t.value: r for t, r in self.margins.items()},
            "class_weighting": self.class_weighting,
            "f1": self.f1,
        }


def _bool(text: str) -> bool:
    low = text.lower()
    if low in {"1", "true", "yes", "on"}:
        return True
    if low in {"0", "false", "no", "off"}:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _window(text: str) -> tuple[int, int]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ValueError(f"window must be 'start,end', got {text!r}")
    return int(parts[0]), int(parts[1])


def _hidden(text: str):
    if ":" not in text:
        return int(text)
    out = {}
    for item in text.split(","):
        k, v = item.split(":")
        out[parse_modality(k).value] = int(v)
    return out


def parse_config_text(text: str, source: str = "<config>", overrides: dict | None = None) -> RunConfig:
    """Parse config text; ``overrides`` (already typed) win over file values."""
    model_kw: dict = {}
    windows = {"m3": HorizonWindows().m3, "m6": HorizonWindows().m6}
    margins = dict(DEFAULT_MARGINS)
    extra = {"class_weighting": True, "f1": "macro"}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key == "encoder_hidden":
                model_kw[key] = _hidden(value)
            elif key in _MODEL_FIELDS:
                model_kw[key] = float(value) if _MODEL_FIELDS[key].type in ("float", float) else int(value)
            elif key in ("m3_window", "m6_window"):
                windows[key[:2]] = _window(value)
            elif key in ("facit_margin", "handgrip_margin"):
                margins[Task(key.split("_")[0])] = float(value)
            elif key == "class_weighting":
                extra[key] = _bool(value)
            elif key == "f1":
                if value not in ("macro", "weighted"):
                    raise ValueError(f"f1 must be macro or weighted, got {value!r}")
                extra[key] = value
            else:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    overrides = overrides or {}
    model_kw.update({k: v for k, v in overrides.items() if k in _MODEL_FIELDS})
    extra.update({k: v for k, v in overrides.items() if k in extra})
    try:
        return RunConfig(
            ModelConfig(**model_kw),
            HorizonWindows(tuple(windows["m3"]), tuple(windows["m6"])),
            margins,
            **extra,
        )
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    if path is None:
        return parse_config_text("", overrides=overrides)
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path), overrides)
