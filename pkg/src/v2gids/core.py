"""Shared domain vocabulary: message kinds, packets, reservations and verdicts.

Timestamps are integer milliseconds and power values are kilowatts
(negative means export).  All value types here are frozen dataclasses so
they can be shared freely between inspection instances.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from typing import Any, Optional

AGGREGATOR = "aggregator"
MIN_RATED_KW = 3.0


class PacketParseError(ValueError):
    """A JSONL record could not be turned into a packet."""


class UnsupportedKindError(PacketParseError):
    pass


class MessageKind(enum.Enum):
    FLOW_RESERVATION_REQUEST = "FlowReservationRequest"
    FLOW_RESERVATION_RESPONSE = "FlowReservationResponse"
    FLOW_RESERVATION_CANCEL = "FlowReservationCancel"
    POWER_STATUS_UPDATE = "PowerStatusUpdate"
    FLOW_RESERVATION_LIST_FETCH = "FlowReservationListFetch"
    FLOW_RESERVATION_LIST_RESPONSE = "FlowReservationListResponse"
    PRICING_FETCH = "PricingFetch"
    PRICING_RESPONSE = "PricingResponse"
    LOAD_CONTROL_FETCH = "LoadControlFetch"
    LOAD_CONTROL_RESPONSE = "LoadControlResponse"

    @property
    def periodic(self) -> bool:
        return self in PERIODIC_KINDS

    @property
    def from_aggregator(self) -> bool:
        """Responses travel aggregator -> EV; the EV is then the destination."""
        return self in RESPONSE_KINDS

    @property
    def carries_reservation(self) -> bool:
        return self in (MessageKind.FLOW_RESERVATION_RESPONSE,
                        MessageKind.FLOW_RESERVATION_LIST_RESPONSE)


PERIODIC_KINDS = frozenset({
    MessageKind.POWER_STATUS_UPDATE,
    MessageKind.FLOW_RESERVATION_LIST_FETCH,
    MessageKind.PRICING_FETCH,
    MessageKind.LOAD_CONTROL_FETCH,
})

RESPONSE_KINDS = frozenset({
    MessageKind.FLOW_RESERVATION_RESPONSE,
    MessageKind.FLOW_RESERVATION_LIST_RESPONSE,
    MessageKind.PRICING_RESPONSE,
    MessageKind.LOAD_CONTROL_RESPONSE,
})


class Direction(enum.Enum):
    CHARGE = "charge"
    DISCHARGE = "discharge"

    @property
    def sign(self) -> int:
        return 1 if self is Direction.CHARGE else -1


class Verdict(enum.Enum):
    BENIGN = "Benign"
    UNEXPECTED_SEQUENCE = "UnexpectedSequence"
    INCONSISTENT_FREQUENCY = "InconsistentFrequency"
    INVALID_SUBSCRIPTION = "InvalidSubscription"
    INCONSISTENT_POWER = "InconsistentPower"
    UNKNOWN_SOURCE = "UnknownSource"

    @property
    def anomalous(self) -> bool:
        return self is not Verdict.BENIGN


@dataclass(frozen=True)
class FlowReservation:
    """A subscription window for one EV.

    Construction does not enforce the invariants so that malformed responses
    can be represented and rejected by the validators; call :meth:`validate`.
    """

    ev: str
    window_start: int
    window_end: int
    direction: Direction
    rated_power: float

    def validate(self, min_rated_kw: float = MIN_RATED_KW) -> None:
        if self.window_start >= self.window_end:
            raise ValueError(
                f"reservation window [{self.window_start}, {self.window_end}] is empty")
        if not math.isfinite(self.rated_power) or self.rated_power < min_rated_kw:
            raise ValueError(
                f"rated power {self.rated_power} kW below floor {min_rated_kw} kW")

    def is_valid(self, min_rated_kw: float = MIN_RATED_KW) -> bool:
        try:
            self.validate(min_rated_kw)
        except ValueError:
            return False
        return True

    def covers(self, t: int) -> bool:
        return self.window_start <= t <= self.window_end


@dataclass(frozen=True)
class Packet:
    src: str
    arrival: int
    kind: MessageKind
    dst: str = AGGREGATOR
    power_kw: Optional[float] = None
    reservation: Optional[FlowReservation] = None

    @property
    def ev(self) -> str:
        """Network identity of the EV this packet belongs to."""
        return self.dst if self.kind.from_aggregator else self.src


def _field(record: dict, name: str, kinds: tuple, what: str) -> Any:
    if name not in record:
        raise PacketParseError(f"missing field {name!r}")
    value = record[name]
    # bool is an int subclass; never accept it for numeric fields
    if isinstance(value, bool) or not isinstance(value, kinds):
        raise PacketParseError(f"field {name!r} must be {what}, got {value!r}")
    return value


def packet_from_record(record: dict, min_rated_kw: float = MIN_RATED_KW) -> Packet:
    if not isinstance(record, dict):
        raise PacketParseError("record is not a JSON object")
    src = _field(record, "src", (str,), "a non-empty string")
    if not src:
        raise PacketParseError("field 'src' must be a non-empty string")
    dst = record.get("dst", AGGREGATOR)
    if not isinstance(dst, str):
        raise PacketParseError(f"field 'dst' must be a string, got {dst!r}")
    t = _field(record, "t", (int,), "integer milliseconds")
    if t < 0:
        raise PacketParseError(f"field 't' must be non-negative, got {t}")
    kind_name = _field(record, "kind", (str,), "a string")
    try:
        kind = MessageKind(kind_name)
    except ValueError:
        raise UnsupportedKindError(f"unsupported kind {kind_name!r}") from None

    power = None
    reservation = None
    if kind is MessageKind.POWER_STATUS_UPDATE:
        power = float(_field(record, "power_kw", (int, float), "a number"))
        if not math.isfinite(power):
            raise PacketParseError("field 'power_kw' must be finite")
    elif kind.carries_reservation:
        start = _field(record, "window_start", (int,), "integer milliseconds")
        end = _field(record, "window_end", (int,), "integer milliseconds")
        direction_name = _field(record, "direction", (str,), '"charge" or "discharge"')
        try:
            direction = Direction(direction_name)
        except ValueError:
            raise PacketParseError(
                f"field 'direction' must be \"charge\" or \"discharge\", got {direction_name!r}"
            ) from None
        rated = float(_field(record, "rated_kw", (int, float), "a number"))
        ev = dst if kind.from_aggregator else src
        reservation = FlowReservation(ev, start, end, direction, rated)
        try:
            reservation.validate(min_rated_kw)
        except ValueError as exc:
            raise PacketParseError(f"invalid reservation: {exc}") from None
    return Packet(src=src, dst=dst, arrival=t, kind=kind, power_kw=power,
                  reservation=reservation)


def parse_packet(line: str, min_rated_kw: float = MIN_RATED_KW) -> Packet:
    """Parse one JSONL line into a :class:`Packet`."""
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise PacketParseError(f"malformed JSON: {exc.msg}") from None
    return packet_from_record(record, min_rated_kw)


def packet_to_record(p: Packet) -> dict:
    record: dict[str, Any] = {"src": p.src, "dst": p.dst, "t": p.arrival, "kind": p.kind.value}
    if p.power_kw is not None:
        record["power_kw"] = p.power_kw
    if p.reservation is not None:
        r = p.reservation
        record.update(window_start=r.window_start, window_end=r.window_end,
                      direction=r.direction.value, rated_kw=r.rated_power)
    return record


def serialize_packet(p: Packet) -> str:
    return json.dumps(packet_to_record(p), separators=(",", ":"))
