"""Scenario synthesis: household loads, EV sessions, benign packet traces and
labelled attack injection."""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .config import DEFAULT_PERIODS_MS, DetectionParams
from .core import (AGGREGATOR, Direction, FlowReservation, MessageKind, Packet,
                   packet_from_record, packet_to_record)
from .physical import EfficiencyParams, EvInfo, LoadSample, derive_discharge_profile
from .protocol import DEFAULT_TABLE, INITIAL_STATE, Phase, advance, idle_timeout

K = MessageKind
BENIGN = "benign"
MINUTE = 60_000


class BoundsError(ValueError):
    pass


class CapacityError(ValueError):
    pass


class IngestionError(ValueError):
    pass


# --------------------------------------------------------------------------
# scenario description

@dataclass(frozen=True)
class ChargeEvent:
    """One EV session.

    ``start`` is the sample at which the EV starts drawing power; the
    reserved window opens when the ramp reaches rated power and lasts
    ``duration_min`` minutes.
    """

    start: int
    duration_min: int
    direction: Direction = Direction.CHARGE
    rereserve: bool = False


@dataclass(frozen=True)
class EvSpec:
    ev: str
    household: str
    rated_kw: float
    events: tuple[ChargeEvent, ...] = ()


@dataclass(frozen=True)
class HouseholdSpec:
    """Constant baseline plus a periodic rectangular AC load, optional PV and noise."""

    household: str
    baseline_kw: float = 0.5
    ac_kw: float = 1.5
    ac_period_min: int = 40
    ac_on_min: int = 12
    ac_phase_min: int = 0
    pv_peak_kw: float = 0.0
    noise_kw: float = 0.0


@dataclass(frozen=True)
class Scenario:
    households: tuple[HouseholdSpec, ...]
    evs: tuple[EvSpec, ...]
    horizon_ms: int = 24 * 60 * MINUTE
    step_ms: int = MINUTE
    periods_ms: Mapping[MessageKind, int] = field(default_factory=lambda: dict(DEFAULT_PERIODS_MS))
    seed: int = 0
    ramp_minutes: int = 2
    tail_minutes: int = 20
    reservation_lead_ms: int = 5 * MINUTE
    cancel_delay_ms: int = 2 * MINUTE
    steady_jitter_kw: float = 0.0
    detection: DetectionParams = field(default_factory=DetectionParams)

    def __post_init__(self):
        names = [e.ev for e in self.evs]
        if len(set(names)) != len(names):
            raise ValueError("EV ids must be unique")
        houses = {h.household for h in self.households}
        for e in self.evs:
            if e.household not in houses:
                raise ValueError(f"EV {e.ev} refers to unknown household {e.household}")
        if not 0 <= self.steady_jitter_kw <= 0.5:
            raise ValueError("steady jitter must be within the 0.5 kW band")

    @property
    def n_samples(self) -> int:
        return self.horizon_ms // self.step_ms

    @property
    def ramp_samples(self) -> int:
        return max(1, -(-self.ramp_minutes * MINUTE // self.step_ms))

    def registry(self) -> list[EvInfo]:
        return [EvInfo(e.ev, e.household, e.rated_kw) for e in self.evs]

    def window(self, event: ChargeEvent) -> tuple[int, int]:
        ws = event.start + (self.ramp_samples - 1) * self.step_ms
        return ws, ws + event.duration_min * MINUTE


# --------------------------------------------------------------------------
# physical profiles

def generate_ev_profile(rated: float, event: ChargeEvent, step_ms: int = MINUTE,
                        ramp_minutes: int = 2, *, tail_minutes: int = 20,
                        high_rated_threshold_kw: float = 6.0, jitter_kw: float = 0.0,
                        rng: Optional[np.random.Generator] = None,
                        efficiency: EfficiencyParams = EfficiencyParams()) -> np.ndarray:
    """Sampled power of one session, starting at the event's first sample.

    Linear ramp to rated, plateau through the reserved window, then a
    two-sample drop for high-rated EVs or a slow linear tail otherwise.
    Discharge sessions are negated and scaled by the round-trip efficiency.
    """
    if event.duration_min <= 0:
        raise ValueError("event duration must be positive")
    ramp = max(1, -(-ramp_minutes * MINUTE // step_ms))
    plateau = event.duration_min * MINUTE // step_ms
    if rated >= high_rated_threshold_kw:
        decay = ramp
    else:
        decay = max(ramp + 1, -(-tail_minutes * MINUTE // step_ms))
    up = rated * np.arange(1, ramp + 1) / ramp
    flat = np.full(plateau, float(rated))
    if jitter_kw:
        rng = rng or np.random.default_rng(0)
        flat = flat + rng.uniform(-jitter_kw, jitter_kw, size=plateau)
    down = rated * np.arange(decay - 1, -1, -1) / decay
    profile = np.concatenate([up, flat, down])
    if event.direction is Direction.DISCHARGE:
        profile = -derive_discharge_profile(profile.clip(min=0), efficiency)
    return profile


def event_energy_kwh(rated: float, event: ChargeEvent, step_ms: int = MINUTE, ramp_minutes: int = 2,
                     *, tail_minutes: int = 20, high_rated_threshold_kw: float = 6.0) -> float:
    """Intended grid-side energy of a charging session: a trapezoid of the
    ramp, the reserved duration and the decay."""
    ramp = max(1, -(-ramp_minutes * MINUTE // step_ms))
    if rated >= high_rated_threshold_kw:
        decay = ramp
    else:
        decay = max(ramp + 1, -(-tail_minutes * MINUTE // step_ms))
    plateau = event.duration_min * MINUTE // step_ms
    return rated * (plateau + (ramp + decay) / 2) * step_ms / 3_600_000


@dataclass
class EvLoadProfile:
    """An EV's power over the whole horizon and its session windows ``[start, end)`` (indices)."""

    power: np.ndarray
    windows: list[tuple[int, int]]


def generate_household_load(base: np.ndarray, ev_profiles: Mapping[str, EvLoadProfile],
                            start_times: Mapping[str, Sequence[int]]
                            ) -> tuple[np.ndarray, dict[str, EvLoadProfile]]:
    """Slide each EV's session windows to new start indices and add them to the base load.

    Durations are preserved; EVs absent from ``start_times`` are not part of
    the household.
    """
    base = np.asarray(base, dtype=float)
    n = len(base)
    aggregate = base.copy()
    shifted = {}
    for ev, starts in start_times.items():
        prof = ev_profiles[ev]
        if len(starts) != len(prof.windows):
            raise ValueError(f"{ev}: {len(starts)} start times for {len(prof.windows)} windows")
        new = np.zeros(n)
        windows = []
        for (old_start, old_end), new_start in zip(prof.windows, starts):
            new_end = new_start + (old_end - old_start)
            if new_start < 0 or new_end > n:
                raise BoundsError(f"{ev}: window [{new_start}, {new_end}) exceeds horizon {n}")
            new[new_start:new_end] += prof.power[old_start:old_end]
            windows.append((new_start, new_end))
        shifted[ev] = EvLoadProfile(new, windows)
        aggregate += new
    return aggregate, shifted


def base_load(spec: HouseholdSpec, n: int, step_ms: int, rng: np.random.Generator) -> np.ndarray:
    minutes = np.arange(n) * step_ms / MINUTE
    load = np.full(n, spec.baseline_kw)
    if spec.ac_kw > 0 and spec.ac_period_min > 0:
        phase = (minutes - spec.ac_phase_min) % spec.ac_period_min
        load += np.where(phase < spec.ac_on_min, spec.ac_kw, 0.0)
    if spec.pv_peak_kw > 0:
        hours = (minutes / 60.0) % 24
        load -= spec.pv_peak_kw * np.clip(np.sin(np.pi * (hours - 6.0) / 12.0), 0, None)
    if spec.noise_kw > 0:
        load += rng.uniform(-spec.noise_kw, spec.noise_kw, size=n)
    return load


def _house_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, index])


def synthesize_loads(scenario: Scenario) -> tuple[dict[str, np.ndarray], dict[str, EvLoadProfile]]:
    """Aggregated household loads and per-EV profiles for a scenario.

    Each EV's sessions are first laid out back-to-back as a recorded
    profile, then slid to the scenario start times.
    """
    n = scenario.n_samples
    step = scenario.step_ms
    det = scenario.detection
    eff = EfficiencyParams(det.eta_charge, det.eta_discharge)
    evs_by_house: dict[str, list[EvSpec]] = {}
    for e in scenario.evs:
        evs_by_house.setdefault(e.household, []).append(e)
    loads, profiles = {}, {}
    for hi, house in enumerate(scenario.households):
        rng = _house_rng(scenario.seed, hi)
        base = base_load(house, n, step, rng)
        recorded, starts = {}, {}
        for e in evs_by_house.get(house.household, []):
            jitter_rng = np.random.default_rng([scenario.seed, 2, hash_id(e.ev)])
            pieces, windows, cursor = [], [], 0
            for ev_event in e.events:
                prof = generate_ev_profile(e.rated_kw, ev_event, step, scenario.ramp_minutes,
                                           tail_minutes=scenario.tail_minutes,
                                           high_rated_threshold_kw=det.high_rated_threshold_kw,
                                           jitter_kw=scenario.steady_jitter_kw,
                                           rng=jitter_rng, efficiency=eff)
                pieces.append(prof)
                windows.append((cursor, cursor + len(prof)))
                cursor += len(prof)
            power = np.concatenate(pieces) if pieces else np.zeros(0)
            recorded[e.ev] = EvLoadProfile(power, windows)
            starts[e.ev] = [ev_event.start // step for ev_event in e.events]
        aggregate, shifted = generate_household_load(base, recorded, starts)
        loads[house.household] = aggregate
        profiles.update(shifted)
    return loads, profiles


def hash_id(name: str) -> int:
    """Stable small integer from an id (``hash`` is salted per process)."""
    return int.from_bytes(name.encode()[:8].ljust(8, b"\0"), "little") % (2**31)


def load_samples(scenario: Scenario, loads: Mapping[str, np.ndarray]) -> list[LoadSample]:
    out = []
    for i in range(scenario.n_samples):
        t = i * scenario.step_ms
        for house in scenario.households:
            out.append(LoadSample(house.household, t, round(float(loads[house.household][i]), 6)))
    return out


# --------------------------------------------------------------------------
# cyber traces

@dataclass
class LabeledTrace:
    packets: list[Packet]
    labels: list[str]
    loads: list[LoadSample]
    evs: list[EvInfo]

    def __post_init__(self):
        if len(self.packets) != len(self.labels):
            raise ValueError("labels must align with packets")

    def copy(self) -> "LabeledTrace":
        return LabeledTrace(list(self.packets), list(self.labels), self.loads, self.evs)

    def without_labelled(self) -> "LabeledTrace":
        keep = [i for i, lab in enumerate(self.labels) if lab == BENIGN]
        return LabeledTrace([self.packets[i] for i in keep], [BENIGN] * len(keep),
                            self.loads, self.evs)


def _ns_fetches(start: int, end: int, periods) -> list[Packet]:
    """Pricing / load-control polling while not subscribed, in ``[start, end)``."""
    out = []
    for kind, offset in ((K.PRICING_FETCH, 0), (K.LOAD_CONTROL_FETCH, 2000)):
        t = start + offset
        while t < end:
            out.append((t, kind))
            t += periods[kind]
    return out


def _session_packets(scenario: Scenario, ev: EvSpec, event: ChargeEvent,
                     profile: np.ndarray) -> tuple[list, int, int]:
    """Packets of one session, plus the first and last timestamps it occupies."""
    periods = scenario.periods_ms
    ws, we = scenario.window(event)
    res = FlowReservation(ev.ev, ws, we, event.direction, ev.rated_kw)
    out = []

    def emit(t, kind, **kw):
        src, dst = (AGGREGATOR, ev.ev) if kind.from_aggregator else (ev.ev, AGGREGATOR)
        out.append(Packet(src=src, dst=dst, arrival=t, kind=kind, **kw))

    t = ws - scenario.reservation_lead_ms
    first = t
    if event.rereserve:
        emit(t, K.FLOW_RESERVATION_REQUEST)
        emit(t + 1000, K.FLOW_RESERVATION_RESPONSE, reservation=res)
        emit(t + 2000, K.FLOW_RESERVATION_CANCEL)
        t += 3000
    emit(t, K.FLOW_RESERVATION_REQUEST)
    emit(t + 1000, K.FLOW_RESERVATION_RESPONSE, reservation=res)
    fetch = t + 2000
    while fetch <= we:
        emit(fetch, K.FLOW_RESERVATION_LIST_FETCH)
        if fetch > ws:
            emit(fetch + 500, K.FLOW_RESERVATION_LIST_RESPONSE, reservation=res)
        fetch += periods[K.FLOW_RESERVATION_LIST_FETCH]
    step = scenario.step_ms
    tp = ws
    while tp <= we:
        power = float(abs(profile[tp // step]))
        emit(tp, K.POWER_STATUS_UPDATE, power_kw=round(power, 6))
        tp += periods[K.POWER_STATUS_UPDATE]
    cancel = we + scenario.cancel_delay_ms
    emit(cancel, K.FLOW_RESERVATION_CANCEL)
    return out, first, cancel


def _order_key(p: Packet, ev_rank: Mapping[str, int]):
    return (p.arrival, ev_rank[p.ev])


def generate_packet_trace(scenario: Scenario) -> LabeledTrace:
    """Benign cyber trace and matching household loads for a scenario."""
    loads, profiles = synthesize_loads(scenario)
    periods = scenario.periods_ms
    packets: list[Packet] = []
    rank = {e.ev: i for i, e in enumerate(scenario.evs)}
    for e in scenario.evs:
        # stagger polling phases deterministically per EV
        offset = (rank[e.ev] * 7919) % 60 * 1000
        cursor = offset
        for event in sorted(e.events, key=lambda x: x.start):
            session, first, last = _session_packets(scenario, e, event, profiles[e.ev].power)
            if first <= cursor:
                raise ValueError(f"{e.ev}: session at {event.start} overlaps previous activity")
            for t, kind in _ns_fetches(cursor, first - 1000, periods):
                packets.append(Packet(src=e.ev, arrival=t, kind=kind))
            packets.extend(session)
            cursor = last + 1000
        for t, kind in _ns_fetches(cursor, scenario.horizon_ms, periods):
            packets.append(Packet(src=e.ev, arrival=t, kind=kind))
    packets.sort(key=lambda p: _order_key(p, rank))
    return LabeledTrace(packets, [BENIGN] * len(packets), load_samples(scenario, loads),
                        scenario.registry())


# --------------------------------------------------------------------------
# random scenarios

def _busy_edges(load: np.ndarray, threshold: float) -> np.ndarray:
    """Mask of indices near a step larger than ``threshold`` in ``load``."""
    dp = np.abs(np.diff(load, prepend=load[0]))
    mask = dp > threshold
    near = mask.copy()
    for shift in (1, 2, 3):
        near[shift:] |= mask[:-shift]
        near[:-shift] |= mask[shift:]
    return near


def random_scenario(n_evs: int = 50, n_households: int = 10, hours: float = 24, seed: int = 0, *,
                    ratings: Sequence[float] = (3.0, 3.3, 3.6, 6.0, 6.6, 7.2),
                    discharge_share: float = 0.25, rereserve_share: float = 0.15,
                    simultaneous_share: float = 0.1, sessions: tuple[int, int] = (1, 2),
                    detection: DetectionParams = DetectionParams(),
                    base_loads: Optional[Mapping[str, np.ndarray]] = None) -> Scenario:
    """A randomized but reproducible scenario whose sessions stay detectable.

    Session starts and high-rated stops are kept clear of base-load steps
    and of other EVs' edges in the same household, except for deliberate
    simultaneous starts.
    """
    rng = np.random.default_rng([seed, 0])
    step = MINUTE
    n = int(hours * 60)
    houses = []
    for h in range(n_households):
        name = f"h{h + 1:03d}"
        period = int(rng.integers(30, 61))
        houses.append(HouseholdSpec(
            household=name,
            baseline_kw=round(float(rng.uniform(0.3, 1.0)), 3),
            ac_kw=round(float(rng.uniform(0.8, 1.5)), 3),
            ac_period_min=period,
            ac_on_min=int(rng.integers(8, period // 2 + 1)),
            ac_phase_min=int(rng.integers(0, period)),
            pv_peak_kw=round(float(rng.uniform(0.0, 2.5)), 3) if rng.random() < 0.5 else 0.0,
            noise_kw=0.02,
        ))
    proto = Scenario(tuple(houses), (), horizon_ms=n * step, step_ms=step, seed=seed,
                     detection=detection)
    ramp = proto.ramp_samples
    lead = proto.reservation_lead_ms // step
    cancel = proto.cancel_delay_ms // step
    timer = detection.constant_charging_minutes
    slack = detection.reservation_slack_minutes

    # per household: where base-load steps, session starts, high-rated stops
    # and low-rated tails already sit
    masks: dict[str, dict[str, np.ndarray]] = {}
    for hi, house in enumerate(houses):
        base = (np.asarray(base_loads[house.household], dtype=float) if base_loads
                else base_load(house, n, step, _house_rng(seed, hi)))
        masks[house.household] = {"base": _busy_edges(base, 0.5), "onset": np.zeros(n, bool),
                                   "stop": np.zeros(n, bool), "tail": np.zeros(n, bool)}
    # (start index, direction) of every session start per household
    onsets: dict[str, list[tuple[int, Direction]]] = {h.household: [] for h in houses}

    evs = []
    for k in range(n_evs):
        house = houses[k % n_households].household
        rated = float(rng.choice(ratings))
        high = rated >= detection.high_rated_threshold_kw
        m = masks[house]
        n_sessions = int(rng.integers(sessions[0], sessions[1] + 1))
        events = []
        free_from = lead + 10
        for _ in range(n_sessions):
            max_dur = (timer - ramp - 5) if not high else 240
            duration = int(rng.integers(30, max(31, max_dur + 1)))
            tail = ramp if high else max(ramp + 1, proto.tail_minutes)
            span_end = ramp + duration + max(tail, cancel) + 5
            if not high:
                span_end = max(span_end, timer + 5)
            placed = None
            direction = Direction.DISCHARGE if rng.random() < discharge_share else Direction.CHARGE
            simultaneous = bool(onsets[house]) and rng.random() < simultaneous_share
            for _attempt in range(200):
                if simultaneous:
                    # pair up with a co-resident session that starts alone, same direction
                    counts = {}
                    for o, _ in onsets[house]:
                        counts[o] = counts.get(o, 0) + 1
                    single = [x for x in onsets[house] if counts[x[0]] == 1]
                    if not single:
                        simultaneous = False
                        continue
                    start, direction = single[int(rng.integers(len(single)))]
                else:
                    start = int(rng.integers(free_from, max(free_from + 1, n - span_end - 5)))
                region = slice(start - 2, start + ramp + 2)
                stop = start + ramp + duration
                stop_region = slice(stop - 2, stop + ramp + 3)
                tail_region = slice(stop - 2, stop + tail + 3)
                # a slow tail drifts the two-point sums of starts it overlaps
                onset_clash = m["base"] | m["stop"] | m["tail"]
                if not simultaneous:
                    onset_clash = onset_clash | m["onset"]
                if (start < free_from or start + span_end >= n - 5
                        or onset_clash[region].any()
                        or (high and (m["base"] | m["onset"] | m["stop"])[stop_region].any())
                        or (not high and m["onset"][tail_region].any())):
                    simultaneous = False
                    continue
                if not simultaneous and any(abs(start - o) < slack + ramp + 8
                                            for o, _ in onsets[house]):
                    continue
                placed = start
                break
            if placed is None:
                break
            events.append(ChargeEvent(placed * step, duration, direction,
                                      rereserve=bool(rng.random() < rereserve_share)))
            onsets[house].append((placed, direction))
            m["onset"][placed - 2:placed + ramp + 2] = True
            stop = placed + ramp + duration
            if high:
                m["stop"][stop - 2:stop + ramp + 3] = True
            else:
                m["tail"][stop - 2:stop + tail + 3] = True
            free_from = placed + span_end + lead + 15
        evs.append(EvSpec(f"ev{k + 1:03d}", house, rated, tuple(events)))
    return replace(proto, evs=tuple(evs))


# --------------------------------------------------------------------------
# scenario files

def scenario_to_dict(s: Scenario) -> dict:
    return {
        "seed": s.seed, "horizon_ms": s.horizon_ms, "step_ms": s.step_ms,
        "periods_ms": {k.value: v for k, v in s.periods_ms.items()},
        "ramp_minutes": s.ramp_minutes, "tail_minutes": s.tail_minutes,
        "reservation_lead_ms": s.reservation_lead_ms, "cancel_delay_ms": s.cancel_delay_ms,
        "steady_jitter_kw": s.steady_jitter_kw,
        "detection": asdict(s.detection),
        "households": [asdict(h) for h in s.households],
        "evs": [{"ev": e.ev, "household": e.household, "rated_kw": e.rated_kw,
                 "events": [{"start": x.start, "duration_min": x.duration_min,
                             "direction": x.direction.value, "rereserve": x.rereserve}
                            for x in e.events]} for e in s.evs],
    }


def scenario_from_dict(d: Mapping) -> Scenario:
    """Explicit scenario (``households`` and ``evs`` lists) or random parameters."""
    detection = DetectionParams(**d.get("detection", {}))
    if isinstance(d.get("evs"), list):
        periods = dict(DEFAULT_PERIODS_MS)
        periods.update({MessageKind(k): int(v) for k, v in d.get("periods_ms", {}).items()})
        evs = tuple(EvSpec(e["ev"], e["household"], float(e["rated_kw"]), tuple(
            ChargeEvent(int(x["start"]), int(x["duration_min"]), Direction(x.get("direction", "charge")),
                        bool(x.get("rereserve", False))) for x in e.get("events", [])))
            for e in d["evs"])
        extra = {k: d[k] for k in ("horizon_ms", "step_ms", "seed", "ramp_minutes", "tail_minutes",
                                   "reservation_lead_ms", "cancel_delay_ms", "steady_jitter_kw")
                 if k in d}
        return Scenario(tuple(HouseholdSpec(**h) for h in d["households"]), evs,
                        periods_ms=periods, detection=detection, **extra)
    return random_scenario(int(d.get("evs", 50)), int(d.get("households", 10)),
                           float(d.get("hours", 24)), int(d.get("seed", 0)), detection=detection)


# --------------------------------------------------------------------------
# attack injection

class AttackKind(enum.Enum):
    OVER_REPORT = "over_report"
    UNDER_REPORT = "under_report"
    OUT_OF_SEQUENCE = "out_of_sequence"
    BEYOND_SUBSCRIPTION = "beyond_subscription"
    WRONG_PERIODICITY = "wrong_periodicity"

    @property
    def table_row(self) -> int:
        return list(AttackKind).index(self) + 1

    @property
    def label(self) -> str:
        return f"attack-{self.table_row}"


ATTACK_LABELS = tuple(k.label for k in AttackKind)


@dataclass(frozen=True)
class AttackSpec:
    kind: AttackKind
    count: int
    seed: int = 0
    magnitude_kw: float = 1.0
    delta: float = 0.5


@dataclass
class _Site:
    index: int
    packet: Packet
    first: bool = False
    last: bool = False
    reservation: Optional[FlowReservation] = None


def _walk(trace: LabeledTrace, periods, idle_ms: int = 1_800_000):
    """Replay benign packets per EV through the protocol model.

    Returns per-EV lists of ``(index, packet, phase_after)`` plus the
    periodic runs (consecutive same-kind packets within one phase stint).
    """
    per_ev: dict[str, list] = {}
    states: dict[str, object] = {}
    for i, (p, lab) in enumerate(zip(trace.packets, trace.labels)):
        if lab != BENIGN:
            continue
        st = idle_timeout(states.get(p.ev, INITIAL_STATE), p.arrival, idle_ms)
        new, verdict = advance(st, p, DEFAULT_TABLE)
        if verdict.anomalous:
            raise ValueError(f"packet {i} of the base trace is not a valid sequence step")
        states[p.ev] = new
        per_ev.setdefault(p.ev, []).append((i, p, new))
    runs = []
    for ev, items in per_ev.items():
        current: dict[MessageKind, list] = {}
        prev_phase = Phase.NOT_SUBSCRIBED
        for i, p, st in items:
            group = st.phase.active or st.phase is Phase.RESERVED
            prev_group = prev_phase.active or prev_phase is Phase.RESERVED
            if st.phase is not prev_phase and not (group and prev_group):
                runs.extend(current.values())
                current = {}
            if p.kind.periodic:
                current.setdefault(p.kind, []).append(i)
            prev_phase = st.phase
        runs.extend(current.values())
    return per_ev, runs


def _psu_sites(trace: LabeledTrace, per_ev) -> list[_Site]:
    sites = []
    for ev, items in per_ev.items():
        session: list[_Site] = []
        for i, p, st in items:
            if p.kind is K.POWER_STATUS_UPDATE:
                session.append(_Site(i, p, reservation=st.active_reservation))
            elif p.kind is K.FLOW_RESERVATION_CANCEL or p.kind is K.FLOW_RESERVATION_REQUEST:
                if session:
                    session[0].first = True
                    session[-1].last = True
                    sites.extend(session)
                session = []
        if session:
            session[0].first = True
            session[-1].last = True
            sites.extend(session)
    return sorted(sites, key=lambda s: s.index)


def _choose(rng, sites: list, count: int, what: str) -> list:
    if count > len(sites):
        raise CapacityError(f"{count} {what} injections requested, only {len(sites)} sites")
    picks = sorted(rng.choice(len(sites), size=count, replace=False)) if count else []
    return [sites[i] for i in picks]


def _rebuild(trace: LabeledTrace, packets: list[Packet], labels: list[str]) -> LabeledTrace:
    rank = {e.ev: i for i, e in enumerate(trace.evs)}
    order = sorted(range(len(packets)),
                   key=lambda i: (packets[i].arrival, rank.get(packets[i].ev, len(rank)), i))
    return LabeledTrace([packets[i] for i in order], [labels[i] for i in order],
                        trace.loads, trace.evs)


def _unexpected_packet(rng, ev: str, phase: Phase, t: int, reservation) -> Packet:
    admitted = set(DEFAULT_TABLE.admitted(phase))
    if phase is Phase.RESERVED:
        admitted.add(K.POWER_STATUS_UPDATE)
    choices = [k for k in MessageKind if k not in admitted]
    kind = choices[int(rng.integers(len(choices)))]
    src, dst = (AGGREGATOR, ev) if kind.from_aggregator else (ev, AGGREGATOR)
    power = 3.0 if kind is K.POWER_STATUS_UPDATE else None
    res = None
    if kind.carries_reservation:
        res = reservation or FlowReservation(ev, t, t + 60 * MINUTE, Direction.CHARGE, 3.0)
        res = replace(res, ev=ev)
    return Packet(src=src, dst=dst, arrival=t, kind=kind, power_kw=power, reservation=res)


def inject_attack(trace: LabeledTrace, spec: AttackSpec,
                  periods: Mapping[MessageKind, int] = DEFAULT_PERIODS_MS) -> LabeledTrace:
    """Return a copy of ``trace`` with ``spec.count`` labelled attack packets."""
    rng = np.random.default_rng([spec.seed, spec.kind.table_row])
    packets, labels = list(trace.packets), list(trace.labels)
    label = spec.kind.label
    per_ev, runs = _walk(trace, periods)

    if spec.kind in (AttackKind.OVER_REPORT, AttackKind.UNDER_REPORT):
        sites = [s for s in _psu_sites(trace, per_ev) if not s.first]
        for s in _choose(rng, sites, spec.count, label):
            p = s.packet
            if spec.kind is AttackKind.OVER_REPORT:
                power = p.power_kw + spec.magnitude_kw
            else:
                power = max(0.0, p.power_kw - spec.magnitude_kw)
            packets[s.index] = replace(p, power_kw=round(power, 6))
            labels[s.index] = label

    elif spec.kind is AttackKind.BEYOND_SUBSCRIPTION:
        period = periods[K.POWER_STATUS_UPDATE]
        sites = []
        for s in _psu_sites(trace, per_ev):
            if s.last and s.reservation is not None:
                t = s.reservation.window_end + period
                later = [q for _, q, _ in per_ev[s.packet.ev] if q.arrival > s.packet.arrival]
                if later and later[0].arrival > t:
                    sites.append((s, t))
        for s, t in _choose(rng, sites, spec.count, label):
            packets.append(replace(s.packet, arrival=t))
            labels.append(label)

    elif spec.kind is AttackKind.OUT_OF_SEQUENCE:
        gaps = []
        for ev, items in sorted(per_ev.items()):
            for (i, p, st), (_, q, _) in zip(items, items[1:]):
                if q.arrival - p.arrival > 2:
                    gaps.append((ev, p, q, st))
        for ev, p, q, st in _choose(rng, gaps, spec.count, label):
            t = int(rng.integers(p.arrival + 1, q.arrival))
            packets.append(_unexpected_packet(rng, ev, st.phase, t, st.active_reservation))
            labels.append(label)

    elif spec.kind is AttackKind.WRONG_PERIODICITY:
        sites = []
        for run in runs:
            sites.extend(run[1:-1])
        for i in _choose(rng, sorted(sites), spec.count, label):
            p = packets[i]
            shift = int(round(spec.delta * periods[p.kind]))
            sign = 1 if rng.random() < 0.5 else -1
            packets[i] = replace(p, arrival=p.arrival + sign * shift)
            labels[i] = label
    else:  # pragma: no cover
        raise ValueError(spec.kind)

    return _rebuild(trace, packets, labels)


# --------------------------------------------------------------------------
# files

LOAD_HEADER = ["timestamp_ms", "household_id", "power_kw"]


def write_load_csv(samples: Iterable[LoadSample], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(LOAD_HEADER)
    for s in samples:
        w.writerow([s.t, s.household, repr(float(s.p))])


def read_load_csv(fh) -> list[LoadSample]:
    reader = csv.reader(fh)
    header = next(reader, None)
    if header != LOAD_HEADER:
        raise IngestionError(f"row 1: expected header {','.join(LOAD_HEADER)}, got {header}")
    out = []
    for rowno, row in enumerate(reader, start=2):
        if len(row) != 3:
            raise IngestionError(f"row {rowno}: expected 3 fields, got {len(row)}")
        try:
            t = int(row[0])
            p = float(row[2])
        except ValueError:
            raise IngestionError(f"row {rowno}: bad number in {row}") from None
        if not row[1] or t < 0 or not np.isfinite(p):
            raise IngestionError(f"row {rowno}: invalid values {row}")
        out.append(LoadSample(row[1], t, p))
    return out


@dataclass
class ProfileSet:
    """Household load profiles on a common uniform time grid."""

    step_ms: int
    start_ms: int
    households: dict[str, np.ndarray]

    def samples(self) -> list[LoadSample]:
        n = min(len(v) for v in self.households.values())
        return [LoadSample(h, self.start_ms + i * self.step_ms, float(v[i]))
                for i in range(n) for h, v in self.households.items()]


def ingest_real_profiles(source, replication: int = 1) -> ProfileSet:
    """Read a load CSV (path, open file, or CSV text containing newlines) into
    uniform household profiles.

    With ``replication > 1`` each household is copied under new ids
    (``<id>_r<k>``) to stand in for more homes on the same feeder.
    """
    if replication < 1:
        raise ValueError("replication must be >= 1")
    if isinstance(source, str) and "\n" in source:
        samples = read_load_csv(io.StringIO(source))
    elif isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            samples = read_load_csv(fh)
    else:
        samples = read_load_csv(source)
    if not samples:
        raise IngestionError("row 2: no data rows")
    rows: dict[str, list[tuple[int, float, int]]] = {}
    for rowno, s in enumerate(samples, start=2):
        rows.setdefault(s.household, []).append((s.t, s.p, rowno))
    step = None
    start = None
    profiles = {}
    for house, vals in rows.items():
        vals.sort()
        for (t0, _, _), (t1, _, rowno) in zip(vals, vals[1:]):
            d = t1 - t0
            if step is None:
                step = d
            if d != step or d <= 0:
                raise IngestionError(f"row {rowno}: non-uniform timestamps for household {house}")
        if start is None:
            start = vals[0][0]
        elif vals[0][0] != start:
            raise IngestionError(f"row {vals[0][2]}: household {house} starts at a different time")
        profiles[house] = np.array([p for _, p, _ in vals])
    out = {}
    for house, prof in profiles.items():
        if replication == 1:
            out[house] = prof
        else:
            for k in range(replication):
                out[f"{house}_r{k}"] = prof.copy()
    return ProfileSet(step or MINUTE, start or 0, out)


def write_trace_dir(trace: LabeledTrace, out: str | Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trace.jsonl", "w") as fh:
        for p in trace.packets:
            fh.write(json.dumps(packet_to_record(p), separators=(",", ":")) + "\n")
    with open(out / "labels.jsonl", "w") as fh:
        for i, lab in enumerate(trace.labels):
            fh.write(json.dumps({"index": i, "label": lab}, separators=(",", ":")) + "\n")
    with open(out / "load.csv", "w", newline="") as fh:
        write_load_csv(trace.loads, fh)
    with open(out / "evs.json", "w") as fh:
        json.dump([asdict(e) for e in trace.evs], fh, indent=1)
        fh.write("\n")


def read_trace_dir(path: str | Path) -> LabeledTrace:
    path = Path(path)
    packets = []
    with open(path / "trace.jsonl") as fh:
        for line in fh:
            if line.strip():
                packets.append(packet_from_record(json.loads(line)))
    labels = [BENIGN] * len(packets)
    labels_path = path / "labels.jsonl"
    if labels_path.exists():
        with open(labels_path) as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    labels[int(rec["index"])] = rec["label"]
    with open(path / "load.csv", newline="") as fh:
        loads = read_load_csv(fh)
    with open(path / "evs.json") as fh:
        evs = [EvInfo(**e) for e in json.load(fh)]
    return LabeledTrace(packets, labels, loads, evs)
