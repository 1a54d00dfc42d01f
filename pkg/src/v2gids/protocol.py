"""Per-EV aggregator state machine and message-sequence validation."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional

from .core import MIN_RATED_KW, Direction, FlowReservation, MessageKind, Packet, Verdict

K = MessageKind


class Phase(enum.Enum):
    NOT_SUBSCRIBED = "NotSubscribed"
    RESERVING = "Reserving"
    RESERVED = "Reserved"
    ACTIVE_CHARGING = "ActiveCharging"
    ACTIVE_DISCHARGING = "ActiveDischarging"

    @property
    def active(self) -> bool:
        return self in (Phase.ACTIVE_CHARGING, Phase.ACTIVE_DISCHARGING)

    @property
    def holds_reservation(self) -> bool:
        return self in (Phase.RESERVED, Phase.ACTIVE_CHARGING, Phase.ACTIVE_DISCHARGING)


# Table target resolved to ActiveCharging/ActiveDischarging by reservation direction.
ACTIVE = "Active"

TRACKED_KINDS = {
    Phase.NOT_SUBSCRIBED: frozenset({K.PRICING_FETCH, K.LOAD_CONTROL_FETCH}),
    Phase.RESERVING: frozenset(),
    Phase.RESERVED: frozenset({K.FLOW_RESERVATION_LIST_FETCH}),
    Phase.ACTIVE_CHARGING: frozenset({K.POWER_STATUS_UPDATE, K.FLOW_RESERVATION_LIST_FETCH}),
    Phase.ACTIVE_DISCHARGING: frozenset({K.POWER_STATUS_UPDATE, K.FLOW_RESERVATION_LIST_FETCH}),
}


def _default_rows():
    ns, rsv, rvd = Phase.NOT_SUBSCRIBED, Phase.RESERVING, Phase.RESERVED
    rows = {
        (ns, K.FLOW_RESERVATION_REQUEST): rsv,
        (ns, K.PRICING_FETCH): ns,
        (ns, K.LOAD_CONTROL_FETCH): ns,
        (rsv, K.FLOW_RESERVATION_RESPONSE): rvd,
        (rvd, K.FLOW_RESERVATION_CANCEL): ns,
        (rvd, K.FLOW_RESERVATION_LIST_FETCH): rvd,
        (rvd, K.POWER_STATUS_UPDATE): ACTIVE,
    }
    for active in (Phase.ACTIVE_CHARGING, Phase.ACTIVE_DISCHARGING):
        rows[(active, K.POWER_STATUS_UPDATE)] = active
        rows[(active, K.FLOW_RESERVATION_LIST_FETCH)] = active
        rows[(active, K.FLOW_RESERVATION_LIST_RESPONSE)] = active
        rows[(active, K.FLOW_RESERVATION_CANCEL)] = ns
    return rows


class TransitionTable:
    """Deterministic map ``(phase, kind) -> next phase``; absent pairs are rejected."""

    def __init__(self, rows: Mapping[tuple[Phase, MessageKind], Phase | str]):
        for target in rows.values():
            if target != ACTIVE and not isinstance(target, Phase):
                raise ValueError(f"bad transition target {target!r}")
        self._rows = dict(rows)

    @classmethod
    def default(cls) -> "TransitionTable":
        return cls(_default_rows())

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "TransitionTable":
        """Parse ``phase, kind, next-phase`` triples (one per line, ``#`` comments)."""
        rows = {}
        for lineno, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3:
                raise ValueError(f"line {lineno}: expected 'phase, kind, next-phase'")
            try:
                phase = Phase(parts[0])
                kind = MessageKind(parts[1])
                target = ACTIVE if parts[2] == ACTIVE else Phase(parts[2])
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
            if (phase, kind) in rows and rows[(phase, kind)] != target:
                raise ValueError(f"line {lineno}: duplicate transition for {phase.value}/{kind.value}")
            rows[(phase, kind)] = target
        return cls(rows)

    @classmethod
    def from_file(cls, path: str | Path) -> "TransitionTable":
        return cls.from_lines(Path(path).read_text().splitlines())

    def lookup(self, phase: Phase, kind: MessageKind) -> Phase | str | None:
        return self._rows.get((phase, kind))

    def admitted(self, phase: Phase) -> list[MessageKind]:
        return [k for k in MessageKind if (phase, k) in self._rows]

    def to_lines(self) -> list[str]:
        out = []
        for (phase, kind), target in self._rows.items():
            name = target if target == ACTIVE else target.value
            out.append(f"{phase.value}, {kind.value}, {name}")
        return out


DEFAULT_TABLE = TransitionTable.default()


@dataclass(frozen=True)
class AggregatorState:
    """Where one EV sits in the protocol, plus last arrivals of tracked periodic kinds."""

    phase: Phase = Phase.NOT_SUBSCRIBED
    active_reservation: Optional[FlowReservation] = None
    trackers: tuple[tuple[MessageKind, Optional[int]], ...] = (
        (K.LOAD_CONTROL_FETCH, None), (K.PRICING_FETCH, None))
    last_arrival: Optional[int] = None

    @property
    def tracked_kinds(self) -> frozenset[MessageKind]:
        return frozenset(k for k, _ in self.trackers)

    def last_seen(self, kind: MessageKind) -> Optional[int]:
        for k, t in self.trackers:
            if k is kind:
                return t
        return None


INITIAL_STATE = AggregatorState()


def _retrack(trackers, phase: Phase):
    keep = dict(trackers)
    kinds = sorted(TRACKED_KINDS[phase], key=lambda k: k.value)
    return tuple((k, keep.get(k)) for k in kinds)


def _payload_ok(state: AggregatorState, packet: Packet, min_rated_kw: float) -> bool:
    kind = packet.kind
    if kind is K.POWER_STATUS_UPDATE:
        if packet.power_kw is None:
            return False
        # the move into an active phase happens at/after the window opens
        if state.phase is Phase.RESERVED:
            res = state.active_reservation
            return res is not None and packet.arrival >= res.window_start
        return True
    if kind.carries_reservation:
        res = packet.reservation
        return res is not None and res.ev == packet.ev and res.is_valid(min_rated_kw)
    return True


def advance(state: AggregatorState, packet: Packet, table: TransitionTable = DEFAULT_TABLE,
            min_rated_kw: float = MIN_RATED_KW) -> tuple[AggregatorState, Verdict]:
    """Validate ``packet`` against ``state``.

    Rejected packets leave the state untouched.  Accepted packets move the
    phase, refresh the reservation when one is carried, and record the
    arrival of periodic kinds.
    """
    target = table.lookup(state.phase, packet.kind)
    if target is None or not _payload_ok(state, packet, min_rated_kw):
        return state, Verdict.UNEXPECTED_SEQUENCE

    reservation = state.active_reservation
    if packet.kind.carries_reservation:
        reservation = packet.reservation
    if target == ACTIVE:
        direction = reservation.direction if reservation else Direction.CHARGE
        target = (Phase.ACTIVE_CHARGING if direction is Direction.CHARGE
                  else Phase.ACTIVE_DISCHARGING)
    if not target.holds_reservation:
        reservation = None

    trackers = state.trackers
    if target is not state.phase:
        trackers = _retrack(trackers, target)
    if packet.kind.periodic and packet.kind in TRACKED_KINDS[target]:
        trackers = tuple((k, packet.arrival if k is packet.kind else t) for k, t in trackers)
    new = AggregatorState(target, reservation, trackers, packet.arrival)
    return new, Verdict.BENIGN


def idle_timeout(state: AggregatorState, now: int, timeout_ms: int = 1_800_000) -> AggregatorState:
    """Reset to ``NotSubscribed`` once the EV has been silent longer than ``timeout_ms``."""
    if state.last_arrival is None or now - state.last_arrival <= timeout_ms:
        return state
    return replace(INITIAL_STATE, last_arrival=state.last_arrival)


MAX_ENUMERATION_DEPTH = 12


def enumerate_valid_sequences(depth: int, table: TransitionTable = DEFAULT_TABLE
                              ) -> set[tuple[MessageKind, ...]]:
    """Every kind sequence of length 1..``depth`` accepted from ``NotSubscribed``.

    Works on the table alone (guards assumed satisfiable, charging direction),
    so it is independent of :func:`advance` and serves as its oracle.
    """
    if not 1 <= depth <= MAX_ENUMERATION_DEPTH:
        raise ValueError(f"depth must be in [1, {MAX_ENUMERATION_DEPTH}], got {depth}")
    out: set[tuple[MessageKind, ...]] = set()
    frontier = [((), Phase.NOT_SUBSCRIBED)]
    for _ in range(depth):
        nxt = []
        for seq, phase in frontier:
            for kind in MessageKind:
                target = table.lookup(phase, kind)
                if target is None:
                    continue
                if target == ACTIVE:
                    target = Phase.ACTIVE_CHARGING
                s = seq + (kind,)
                out.add(s)
                nxt.append((s, target))
        frontier = nxt
    return out
