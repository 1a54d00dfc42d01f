"""Timing checks on cyber traffic: periodic-message frequency and subscription windows."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

from .config import DEFAULT_PERIODS_MS
from .core import MIN_RATED_KW, FlowReservation, MessageKind, Packet, Verdict


class ContractViolation(ValueError):
    """An operation was called outside its precondition."""


@dataclass
class FrequencyTracker:
    """Nominal periods, tolerance and last accepted arrival per ``(ev, kind)``.

    Only inter-arrival gaps are inspected, so EV and aggregator clocks never
    need to agree.  With ``allow_missed`` a gap close to a whole number of
    periods counts as dropped packets rather than a wrong frequency.
    """

    periods_ms: Mapping[MessageKind, int] = field(
        default_factory=lambda: dict(DEFAULT_PERIODS_MS))
    tolerance: float = 0.10
    allow_missed: bool = False
    last_arrival: dict[tuple[str, MessageKind], int] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.tolerance < 1:
            raise ValueError("tolerance must be in [0, 1)")
        if any(p <= 0 for p in self.periods_ms.values()):
            raise ValueError("periods must be positive")

    def period(self, kind: MessageKind) -> int:
        if not kind.periodic or kind not in self.periods_ms:
            raise ContractViolation(f"{kind.value} is not a periodic kind")
        return self.periods_ms[kind]

    def gap_ok(self, kind: MessageKind, gap: int) -> bool:
        period = self.period(kind)
        slack = period * self.tolerance
        if gap < period - slack:
            return False
        if self.allow_missed:
            k = max(1, round(gap / period))
            return abs(gap - k * period) <= slack
        return gap <= period + slack

    def judge(self, kind: MessageKind, last: Optional[int], arrival: int) -> Verdict:
        """Verdict for ``arrival`` given the previous accepted arrival; no mutation."""
        self.period(kind)
        if last is None or self.gap_ok(kind, arrival - last):
            return Verdict.BENIGN
        return Verdict.INCONSISTENT_FREQUENCY

    def reset(self, ev: str, kinds=None) -> None:
        for key in [k for k in self.last_arrival if k[0] == ev and (kinds is None or k[1] in kinds)]:
            del self.last_arrival[key]


def check_frequency(tracker: FrequencyTracker, ev: str, kind: MessageKind, arrival: int) -> Verdict:
    """Check one periodic arrival; the tracker only advances on a benign verdict."""
    verdict = tracker.judge(kind, tracker.last_arrival.get((ev, kind)), arrival)
    if verdict is Verdict.BENIGN:
        tracker.last_arrival[(ev, kind)] = arrival
    return verdict


class ReservationStore:
    """Latest known reservation per EV, as relayed in (list) responses."""

    def __init__(self, min_rated_kw: float = MIN_RATED_KW):
        self.min_rated_kw = min_rated_kw
        self._by_ev: dict[str, FlowReservation] = {}

    def get(self, ev: str) -> Optional[FlowReservation]:
        return self._by_ev.get(ev)

    def put(self, reservation: FlowReservation) -> None:
        reservation.validate(self.min_rated_kw)
        self._by_ev[reservation.ev] = reservation

    def clear(self, ev: str) -> None:
        self._by_ev.pop(ev, None)

    def snapshot(self) -> dict[str, FlowReservation]:
        return dict(sorted(self._by_ev.items()))

    def __len__(self):
        return len(self._by_ev)


def update_reservation(store: ReservationStore, packet: Packet) -> ReservationStore:
    if not packet.kind.carries_reservation:
        raise ContractViolation(f"{packet.kind.value} carries no reservation")
    if packet.reservation is None:
        raise ContractViolation("response packet without reservation payload")
    store.put(packet.reservation)  # raises ValueError, leaving the store untouched
    return store


def check_subscription(store: ReservationStore, packet: Packet) -> Verdict:
    reservation = store.get(packet.ev)
    if reservation is not None and reservation.covers(packet.arrival):
        return Verdict.BENIGN
    return Verdict.INVALID_SUBSCRIPTION

