"""Engine configuration and the ``key = value`` scenario config file."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

from .core import MIN_RATED_KW, MessageKind


class ConfigError(ValueError):
    pass


DEFAULT_PERIODS_MS = {
    MessageKind.POWER_STATUS_UPDATE: 60_000,
    MessageKind.FLOW_RESERVATION_LIST_FETCH: 300_000,
    MessageKind.PRICING_FETCH: 900_000,
    MessageKind.LOAD_CONTROL_FETCH: 900_000,
}

_PERIOD_KEYS = {
    "period_power_status_s": MessageKind.POWER_STATUS_UPDATE,
    "period_list_fetch_s": MessageKind.FLOW_RESERVATION_LIST_FETCH,
    "period_pricing_s": MessageKind.PRICING_FETCH,
    "period_load_control_s": MessageKind.LOAD_CONTROL_FETCH,
}


@dataclass(frozen=True)
class DetectionParams:
    """Knobs for charge-state identification and power validation."""

    band_halfwidth_kw: float = 0.5
    high_rated_threshold_kw: float = 6.0
    # event acceptance is rated +/- max(band_halfwidth_kw, event_relative_tolerance * rated)
    event_relative_tolerance: float = 0.25
    # a point only opens or closes an event if its own step is at least this large
    min_spike_kw: float = 0.5
    constant_charging_minutes: int = 120
    reservation_slack_minutes: int = 5
    eta_charge: float = 0.92
    eta_discharge: float = 0.92
    min_rated_kw: float = MIN_RATED_KW

    def __post_init__(self):
        if self.band_halfwidth_kw <= 0:
            raise ConfigError("band_halfwidth_kw must be positive")
        if not 0 <= self.event_relative_tolerance < 1:
            raise ConfigError("event_relative_tolerance must be in [0, 1)")
        if self.min_spike_kw < 0:
            raise ConfigError("min_spike_kw must be >= 0")
        if self.constant_charging_minutes < 1:
            raise ConfigError("constant_charging_minutes must be >= 1")
        for eta in (self.eta_charge, self.eta_discharge):
            if not 0 < eta <= 1:
                raise ConfigError(f"efficiency {eta} outside (0, 1]")

    def is_spike(self, signed_step_kw: float) -> bool:
        """Is a step, already multiplied by the expected sign, a candidate spike?"""
        return signed_step_kw > 0 and signed_step_kw >= self.min_spike_kw

    def event_tolerance(self, magnitude_kw: float) -> float:
        return max(self.band_halfwidth_kw, self.event_relative_tolerance * abs(magnitude_kw))

    @property
    def discharge_factor(self) -> float:
        return self.eta_charge * self.eta_discharge


@dataclass(frozen=True)
class EngineConfig:
    pool_size: int = 400
    idle_timeout_ms: int = 1_800_000
    frequency_tolerance: float = 0.10
    # gaps near k * period (k >= 2) are missed packets, not anomalies
    allow_missed_periods: bool = True
    periods_ms: Mapping[MessageKind, int] = field(
        default_factory=lambda: dict(DEFAULT_PERIODS_MS))
    detection: DetectionParams = field(default_factory=DetectionParams)
    timing: bool = True

    def __post_init__(self):
        if self.pool_size < 1:
            raise ConfigError("pool_size must be >= 1")
        if self.idle_timeout_ms <= 0:
            raise ConfigError("idle_timeout must be positive")
        if not 0 <= self.frequency_tolerance < 1:
            raise ConfigError("frequency_tolerance must be in [0, 1)")
        for kind, period in self.periods_ms.items():
            if not kind.periodic:
                raise ConfigError(f"{kind.value} is not a periodic kind")
            if period <= 0:
                raise ConfigError(f"period for {kind.value} must be positive")


def _as_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


_DETECTION_KEYS = {f.name: f.type for f in fields(DetectionParams)}


def config_from_mapping(values: Mapping[str, str]) -> EngineConfig:
    """Build an :class:`EngineConfig` from string key/value pairs."""
    cfg = EngineConfig()
    periods = dict(cfg.periods_ms)
    detection = {}
    top = {}
    for key, raw in values.items():
        key = key.strip().lower()
        raw = str(raw).strip()
        try:
            if key in _PERIOD_KEYS:
                periods[_PERIOD_KEYS[key]] = int(round(float(raw) * 1000))
            elif key in _DETECTION_KEYS:
                kind = _DETECTION_KEYS[key]
                detection[key] = int(raw) if kind in ("int", int) else float(raw)
            elif key == "pool_size":
                top["pool_size"] = int(raw)
            elif key == "idle_timeout_s":
                top["idle_timeout_ms"] = int(round(float(raw) * 1000))
            elif key == "frequency_tolerance":
                top["frequency_tolerance"] = float(raw)
            elif key == "allow_missed_periods":
                top["allow_missed_periods"] = _as_bool(raw)
            elif key == "timing":
                if raw not in ("wall", "off"):
                    raise ConfigError("timing must be 'wall' or 'off'")
                top["timing"] = raw == "wall"
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
    return replace(cfg, periods_ms=periods,
                   detection=replace(cfg.detection, **detection), **top)


def read_key_values(path: str | Path) -> dict[str, str]:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    text = Path(path).read_text()
    try:
        parser.read_string("[config]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return dict(parser["config"])


def load_config(path: str | Path | None) -> EngineConfig:
    if path is None:
        return EngineConfig()
    return config_from_mapping(read_key_values(path))
