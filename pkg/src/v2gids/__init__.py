"""Cyber-physical anomaly detection for a V2G aggregator, with a trace simulator."""

from .config import DetectionParams, EngineConfig, load_config
from .core import (AGGREGATOR, Direction, FlowReservation, MessageKind, Packet, Verdict,
                   parse_packet, serialize_packet)
from .engine import Disposition, Engine, MetricsSink
from .physical import EvInfo, LoadSample, PhysicalMonitor
from .protocol import DEFAULT_TABLE, AggregatorState, Phase, TransitionTable, advance

__all__ = [
    "AGGREGATOR", "DEFAULT_TABLE", "AggregatorState", "DetectionParams", "Direction",
    "Disposition", "Engine", "EngineConfig", "EvInfo", "FlowReservation", "LoadSample",
    "MessageKind", "MetricsSink", "Packet", "Phase", "PhysicalMonitor", "TransitionTable",
    "Verdict", "advance", "load_config", "parse_packet", "serialize_packet",
]
