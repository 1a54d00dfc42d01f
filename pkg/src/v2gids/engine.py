"""The cyber-physical anomaly detection engine.

Packets are dispatched to a fixed pool of inspection instances, one per EV.
Each instance validates the message sequence, then (for packets that pass)
periodic frequency, the subscription window and power consistency.  The
first failing check decides the verdict; anomalous packets are dropped and
leave no trace in any engine state.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

from .config import EngineConfig
from .core import Direction, MessageKind, Packet, Verdict
from .physical import (EvInfo, LoadSample, PhysicalMonitor, SteadyStateBand,
                       expected_magnitude, validate_power)
from .protocol import (DEFAULT_TABLE, INITIAL_STATE, AggregatorState, Phase,
                       TransitionTable, advance, idle_timeout)
from .validators import FrequencyTracker, ReservationStore


@dataclass
class InspectionInstance:
    monitored: Optional[str] = None
    state: AggregatorState = INITIAL_STATE
    first_power_packet_seen: bool = False
    last_power: Optional[float] = None

    def free(self) -> None:
        self.monitored = None
        self.state = INITIAL_STATE
        self.first_power_packet_seen = False
        self.last_power = None


@dataclass(frozen=True)
class Disposition:
    packet: Packet
    verdict: Verdict
    inspect_us: float = 0.0

    @property
    def forwarded(self) -> bool:
        return self.verdict is Verdict.BENIGN


@dataclass
class MetricsSink:
    """Per-packet verdict/latency records; appends are thread-safe."""

    records: list[dict] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def append(self, d: Disposition) -> None:
        rec = {"t": d.packet.arrival, "src": d.packet.src, "kind": d.packet.kind.value,
               "verdict": d.verdict.value, "inspect_us": d.inspect_us}
        with self._lock:
            self.records.append(rec)

    def __len__(self):
        return len(self.records)


def _previous_arrival(old: AggregatorState, new: AggregatorState, kind: MessageKind) -> Optional[int]:
    if kind in old.tracked_kinds and kind in new.tracked_kinds:
        return old.last_seen(kind)
    return None


class Engine:
    def __init__(self, evs: Iterable[EvInfo], config: EngineConfig = EngineConfig(),
                 table: TransitionTable = DEFAULT_TABLE, sink: Optional[MetricsSink] = None):
        self.config = config
        self.table = table
        self.evs = {e.ev: e for e in evs}
        self.pool = [InspectionInstance() for _ in range(config.pool_size)]
        self._index: dict[str, int] = {}
        self.store = ReservationStore(config.detection.min_rated_kw)
        self.frequency = FrequencyTracker(dict(config.periods_ms), config.frequency_tolerance,
                                          config.allow_missed_periods)
        self.physical = PhysicalMonitor(self.evs.values(), config.detection,
                                        reservations=self.store.get)
        self.sink = sink if sink is not None else MetricsSink()

    # -- physical side ---------------------------------------------------
    def ingest_sample(self, sample: LoadSample) -> None:
        self.physical.ingest(sample)

    # -- dispatch --------------------------------------------------------
    def _bind(self, packet: Packet):
        """Instance index for ``packet`` plus an undo record for fresh bindings."""
        ev = packet.ev
        idx = self._index.get(ev)
        if idx is not None:
            return idx, None
        for i, inst in enumerate(self.pool):
            if inst.monitored is None:
                inst.monitored = ev
                self._index[ev] = i
                return i, (i, None)
        timeout = self.config.idle_timeout_ms
        for i, inst in enumerate(self.pool):
            last = inst.state.last_arrival
            if last is not None and packet.arrival - last > timeout:
                previous = replace(inst)
                del self._index[inst.monitored]
                self.store.clear(inst.monitored)
                inst.free()
                inst.monitored = ev
                self._index[ev] = i
                return i, (i, previous)
        return None, None

    def _unbind(self, undo) -> None:
        i, previous = undo
        inst = self.pool[i]
        del self._index[inst.monitored]
        if previous is None:
            inst.free()
        else:
            self.pool[i] = previous
            self._index[previous.monitored] = i

    def identify_instance(self, packet: Packet) -> Optional[int]:
        idx, _ = self._bind(packet)
        return idx

    # -- inspection ------------------------------------------------------
    def _power_consistent(self, inst: InspectionInstance, state: AggregatorState,
                          packet: Packet) -> bool:
        ev, t = packet.ev, packet.arrival
        params = self.config.detection
        reservation = state.active_reservation
        direction = reservation.direction if reservation else Direction.CHARGE
        mode = self.physical.mode_at(ev, t)
        if mode != 0 and mode != direction.sign:
            return False
        bands, last = {}, {}
        co = self.physical.co_resident(ev)
        for e in co:
            if e == ev:
                d = direction
            else:
                d = Direction.DISCHARGE if self.physical.mode_at(e, t) < 0 else Direction.CHARGE
                j = self._index.get(e)
                if j is not None and self.pool[j].last_power is not None:
                    last[e] = self.pool[j].last_power
            mag = expected_magnitude(self.evs[e].rated_kw, d, params)
            bands[e] = SteadyStateBand.around(mag, params.band_halfwidth_kw)
        return validate_power(packet.power_kw, t, ev, self.physical, bands,
                              not inst.first_power_packet_seen, co_resident=co,
                              last_reported=last)

    def inspect(self, idx: int, packet: Packet) -> Verdict:
        inst = self.pool[idx]
        kind = packet.kind
        state = idle_timeout(inst.state, packet.arrival, self.config.idle_timeout_ms)
        timed_out = state is not inst.state

        new_state, verdict = advance(state, packet, self.table, self.config.detection.min_rated_kw)
        if verdict.anomalous:
            return verdict
        if kind.periodic:
            last = _previous_arrival(state, new_state, kind)
            verdict = self.frequency.judge(kind, last, packet.arrival)
            if verdict.anomalous:
                return verdict
        if kind is MessageKind.POWER_STATUS_UPDATE:
            reservation = None if timed_out else self.store.get(packet.ev)
            if reservation is None or not reservation.covers(packet.arrival):
                return Verdict.INVALID_SUBSCRIPTION
            if not self._power_consistent(inst, new_state, packet):
                return Verdict.INCONSISTENT_POWER

        # commit
        if timed_out:
            self.store.clear(packet.ev)
        inst.state = new_state
        if kind.carries_reservation:
            self.store.put(packet.reservation)
        if kind is MessageKind.POWER_STATUS_UPDATE:
            inst.first_power_packet_seen = True
            inst.last_power = packet.power_kw
        elif not new_state.phase.active:
            inst.first_power_packet_seen = False
            inst.last_power = None
        if new_state.phase is Phase.NOT_SUBSCRIBED:
            self.store.clear(packet.ev)
        return Verdict.BENIGN

    def process(self, packet: Packet) -> Disposition:
        """Dispatch, inspect and decide forward/drop for one packet."""
        start = time.perf_counter_ns() if self.config.timing else 0
        idx, undo = self._bind(packet)
        if idx is None:
            verdict = Verdict.UNKNOWN_SOURCE
        else:
            verdict = self.inspect(idx, packet)
            if verdict.anomalous and undo is not None:
                self._unbind(undo)
        elapsed = (time.perf_counter_ns() - start) / 1000.0 if self.config.timing else 0.0
        d = Disposition(packet, verdict, elapsed)
        self.sink.append(d)
        return d

    def snapshot(self) -> dict:
        """Comparable view of all mutable engine state."""
        instances = {}
        for inst in self.pool:
            if inst.monitored is not None:
                instances[inst.monitored] = (inst.state, inst.first_power_packet_seen,
                                             inst.last_power)
        return {
            "instances": dict(sorted(instances.items())),
            "reservations": self.store.snapshot(),
            "physical": self.physical.snapshot(),
        }
