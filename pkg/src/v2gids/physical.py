"""Physical side: first-difference filtering of household load, EV charge-state
identification from load spikes, and cyber/physical power consistency."""

from __future__ import annotations

import bisect
import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .config import DetectionParams
from .core import Direction, FlowReservation


class ResamplingRequired(ValueError):
    """Samples are not uniformly spaced."""


class ConfigurationError(KeyError):
    """An EV is missing from the scenario registry."""


@dataclass(frozen=True)
class LoadSample:
    household: str
    t: int
    p: float


@dataclass(frozen=True)
class FilteredSample:
    household: str
    t: int
    dp: float


@dataclass(frozen=True)
class EfficiencyParams:
    eta1: float = 0.92
    eta2: float = 0.92

    def __post_init__(self):
        for name in ("eta1", "eta2"):
            eta = getattr(self, name)
            if not 0 < eta <= 1:
                raise ValueError(f"{name}={eta} outside (0, 1]")

    @property
    def factor(self) -> float:
        return self.eta1 * self.eta2


@dataclass(frozen=True)
class SteadyStateBand:
    min_kw: float
    max_kw: float

    def __post_init__(self):
        if not 0 < self.min_kw < self.max_kw:
            raise ValueError(f"invalid band [{self.min_kw}, {self.max_kw}]")

    @classmethod
    def around(cls, rated_kw: float, halfwidth_kw: float = 0.5) -> "SteadyStateBand":
        return cls(rated_kw - halfwidth_kw, rated_kw + halfwidth_kw)

    @property
    def center(self) -> float:
        return (self.min_kw + self.max_kw) / 2


def _uniform_step(times: Sequence[int], household: str) -> Optional[int]:
    if len(times) < 2:
        return None
    steps = np.diff(np.asarray(times, dtype=np.int64))
    if steps[0] <= 0 or np.any(steps != steps[0]):
        raise ResamplingRequired(f"household {household}: samples are not uniformly spaced")
    return int(steps[0])


def high_pass_filter(samples: Sequence[LoadSample]) -> list[FilteredSample]:
    """First difference of each household's load; the first sample maps to 0.

    Mixed-household input is filtered per household, keeping input order.
    """
    if not samples:
        raise ValueError("need at least one sample")
    by_house: dict[str, list[int]] = {}
    for idx, s in enumerate(samples):
        by_house.setdefault(s.household, []).append(idx)
    out: list[Optional[FilteredSample]] = [None] * len(samples)
    for house, idxs in by_house.items():
        _uniform_step([samples[i].t for i in idxs], house)
        p = np.array([samples[i].p for i in idxs], dtype=float)
        dp = np.diff(p, prepend=p[0])
        for i, d in zip(idxs, dp):
            out[i] = FilteredSample(house, samples[i].t, float(d))
    return out  # type: ignore[return-value]


class ChargeStateSeries:
    """Piecewise-constant charge state per EV, stored as change points.

    Internally a *mode* is kept: +1 charging, -1 discharging, 0 idle; the
    charge state is ``abs(mode)``.
    """

    def __init__(self):
        self._times: dict[str, list[int]] = {}
        self._modes: dict[str, list[int]] = {}

    def set(self, ev: str, t: int, mode: int) -> None:
        times = self._times.setdefault(ev, [])
        modes = self._modes.setdefault(ev, [])
        if times and t < times[-1]:
            raise ValueError("charge states must be recorded in time order")
        if modes and modes[-1] == mode:
            return
        if times and times[-1] == t:
            modes[-1] = mode
            if len(modes) > 1 and modes[-2] == mode:
                times.pop()
                modes.pop()
            return
        times.append(t)
        modes.append(mode)

    def mode_at(self, ev: str, t: int) -> int:
        times = self._times.get(ev)
        if not times:
            return 0
        if t >= times[-1]:
            return self._modes[ev][-1]
        i = bisect.bisect_right(times, t) - 1
        return self._modes[ev][i] if i >= 0 else 0

    def state_at(self, ev: str, t: int) -> int:
        return abs(self.mode_at(ev, t))

    def changes(self, ev: str) -> list[tuple[int, int]]:
        return list(zip(self._times.get(ev, []), (abs(m) for m in self._modes.get(ev, []))))

    def sampled(self, ev: str, times: Iterable[int]) -> list[tuple[int, int]]:
        return [(t, self.state_at(ev, t)) for t in times]

    def evs(self) -> list[str]:
        return sorted(self._times)

    def __eq__(self, other):
        return (isinstance(other, ChargeStateSeries)
                and self._times == other._times and self._modes == other._modes)


def expected_magnitude(rated_kw: float, direction: Direction, params: DetectionParams) -> float:
    """Steady grid-side power magnitude of an EV session."""
    if direction is Direction.CHARGE:
        return rated_kw
    return rated_kw * params.discharge_factor


def identify_charge_states(filtered: Sequence[FilteredSample], ev_rated: float,
                           params: DetectionParams = DetectionParams(), *,
                           ev: str = "ev", direction: Direction = Direction.CHARGE,
                           initial_level: Optional[float] = None,
                           step_ms: Optional[int] = None) -> ChargeStateSeries:
    """Charge states of one EV from the filtered load of its household.

    High-rated EVs flip on at a positive spike (current plus next point)
    matching the rated power and off at a matching negative spike (current
    plus previous point).  Lower-rated EVs only have detectable starts and
    stay on for a fixed charging period afterwards.  Discharge sessions are
    the mirror image with the discharge magnitude.
    """
    if ev_rated < params.min_rated_kw:
        raise ValueError(f"rated power {ev_rated} kW below {params.min_rated_kw} kW")
    n = len(filtered)
    series = ChargeStateSeries()
    if n == 0:
        return series
    dp = [f.dp for f in filtered]
    times = [f.t for f in filtered]
    step = step_ms or _uniform_step(times, filtered[0].household) or 60_000
    period = max(1, -(-params.constant_charging_minutes * 60_000 // step))

    sign = direction.sign
    signature = sign * expected_magnitude(ev_rated, direction, params)
    tol = params.event_tolerance(signature)
    high = ev_rated >= params.high_rated_threshold_kw

    state = 0
    if initial_level is not None and abs(initial_level - signature) <= params.band_halfwidth_kw:
        state = 1
    timer_end = period if state and not high else None
    used: set[int] = set()
    for i in range(n):
        if high:
            if state == 0:
                if i not in used and params.is_spike(sign * dp[i]):
                    change = dp[i] + (dp[i + 1] if i + 1 < n else 0.0)
                    if abs(change - signature) <= tol:
                        state = 1
                        used.add(i + 1)
            elif i not in used and params.is_spike(-sign * dp[i]):
                change = dp[i] + (dp[i - 1] if i > 0 and i - 1 not in used else 0.0)
                if abs(change + signature) <= tol:
                    state = 0
        else:
            if timer_end is not None and i >= timer_end:
                state, timer_end = 0, None
            if i not in used and params.is_spike(sign * dp[i]):
                change = dp[i] + (dp[i + 1] if i + 1 < n else 0.0)
                if abs(change - signature) <= tol:
                    state, timer_end = 1, i + period
                    used.add(i + 1)
        series.set(ev, times[i], sign * state)
    return series


@dataclass(frozen=True)
class EvInfo:
    ev: str
    household: str
    rated_kw: float


ReservationLookup = Callable[[str], Optional[FlowReservation]]


class _House:
    __slots__ = ("name", "evs", "times", "p", "dp", "decided", "used", "mode", "timer_end")

    def __init__(self, name: str, evs: list[EvInfo]):
        self.name = name
        self.evs = evs
        self.times: list[int] = []
        self.p: list[float] = []
        self.dp: list[float] = []
        self.decided = 0  # next index whose state is still undecided
        self.used: set[int] = set()
        self.mode = {e.ev: 0 for e in evs}
        self.timer_end: dict[str, int] = {}


class PhysicalMonitor:
    """Streams household load and keeps per-EV charge states up to date.

    A generalisation of :func:`identify_charge_states` to households with
    several EVs: a spike is matched against sums of co-resident EV
    signatures, so simultaneous starts are attributed jointly.  When a
    reservation lookup is supplied, only EVs holding a reservation of the
    matching direction near the spike are start candidates, and an EV is
    only a stop candidate near or after the end of its window.

    Index ``i`` is decided once sample ``i + 1`` arrives, so queries at time
    ``t`` only ever see states derivable from samples stamped ``<= t``.
    """

    def __init__(self, evs: Iterable[EvInfo], params: DetectionParams = DetectionParams(),
                 reservations: Optional[ReservationLookup] = None, step_ms: int = 60_000,
                 max_joint: int = 3):
        self.params = params
        self.reservations = reservations
        self.step_ms = step_ms
        self.max_joint = max_joint
        self.ev_info: dict[str, EvInfo] = {}
        houses: dict[str, list[EvInfo]] = {}
        for info in evs:
            if info.ev in self.ev_info:
                raise ValueError(f"duplicate EV {info.ev}")
            self.ev_info[info.ev] = info
            houses.setdefault(info.household, []).append(info)
        self.houses = {h: _House(h, sorted(v, key=lambda e: e.ev)) for h, v in houses.items()}
        self.series = ChargeStateSeries()
        self._period = max(1, -(-params.constant_charging_minutes * 60_000 // step_ms))
        self._slack = params.reservation_slack_minutes * 60_000

    def household_of(self, ev: str) -> str:
        try:
            return self.ev_info[ev].household
        except KeyError:
            raise ConfigurationError(f"unknown EV {ev!r}") from None

    def co_resident(self, ev: str) -> list[str]:
        return [e.ev for e in self.houses[self.household_of(ev)].evs]

    def ingest(self, sample: LoadSample) -> None:
        house = self.houses.get(sample.household)
        if house is None:
            # households without EVs carry no charge state
            return
        if house.times:
            step = sample.t - house.times[-1]
            if step != self.step_ms:
                raise ResamplingRequired(
                    f"household {sample.household}: step {step} ms, expected {self.step_ms} ms")
            house.dp.append(sample.p - house.p[-1])
        else:
            house.dp.append(0.0)
        house.times.append(sample.t)
        house.p.append(sample.p)
        while house.decided < len(house.times) - 1:
            self._decide(house, house.decided)
            house.decided += 1

    def state_at(self, ev: str, t: int) -> int:
        self.household_of(ev)
        return self.series.state_at(ev, t)

    def mode_at(self, ev: str, t: int) -> int:
        self.household_of(ev)
        return self.series.mode_at(ev, t)

    def _start_direction(self, ev: str, t: int, restart: bool) -> Optional[Direction]:
        """Direction an EV could start in at ``t``, or None if it is no candidate.

        A restart (an EV already on) needs a window opening around ``t``.
        """
        if self.reservations is None:
            return Direction.CHARGE
        res = self.reservations(ev)
        if res is None:
            return None
        end = res.window_start + self._slack if restart else res.window_end
        if not res.window_start - self._slack <= t <= end:
            return None
        return res.direction

    def _may_stop(self, ev: str, t: int) -> bool:
        """An EV still inside its reserved window (minus slack) is not a stop candidate."""
        if self.reservations is None:
            return True
        res = self.reservations(ev)
        return res is None or t >= res.window_end - self._slack

    def _edge_distance(self, ev: str, t: int, start: bool) -> int:
        """How far ``t`` is from the reserved window edge an event would mark."""
        res = self.reservations(ev) if self.reservations is not None else None
        if res is None:
            return 0
        return abs(t - (res.window_start if start else res.window_end))

    def _decide(self, house: _House, i: int) -> None:
        params = self.params
        t = house.times[i]
        for ev, end in list(house.timer_end.items()):
            if i >= end:
                del house.timer_end[ev]
                house.mode[ev] = 0
                self.series.set(ev, t, 0)
        x = house.dp[i]
        if i in house.used or not params.is_spike(abs(x)):
            return
        forward = x + house.dp[i + 1]
        backward = x + (house.dp[i - 1] if i > 0 and i - 1 not in house.used else 0.0)

        # (ev, new_mode, signature, is_restart, distance to window edge) candidates whose spike sign agrees with x
        starts, stops = [], []
        for info in house.evs:
            high = info.rated_kw >= params.high_rated_threshold_kw
            mode = house.mode[info.ev]
            if mode == 0 or not high:
                d = self._start_direction(info.ev, t, restart=mode != 0)
                if d is not None and d.sign * x > 0 and (mode == 0 or mode == d.sign):
                    sig = d.sign * expected_magnitude(info.rated_kw, d, params)
                    starts.append((info.ev, d.sign, sig, mode != 0,
                                   self._edge_distance(info.ev, t, start=True)))
            if mode != 0 and high and -mode * x > 0 and self._may_stop(info.ev, t):
                d = Direction.CHARGE if mode > 0 else Direction.DISCHARGE
                sig = -mode * expected_magnitude(info.rated_kw, d, params)
                stops.append((info.ev, 0, sig, False, self._edge_distance(info.ev, t, start=False)))

        best = None
        for group, change, is_start in ((starts, forward, True), (stops, backward, False)):
            for size in range(1, min(len(group), self.max_joint) + 1):
                for combo in itertools.combinations(group, size):
                    total = sum(c[2] for c in combo)
                    resid = abs(change - total)
                    if resid > params.event_tolerance(total):
                        continue
                    restarts = sum(c[3] for c in combo)
                    distance = sum(c[4] for c in combo)
                    key = (restarts, resid, size, not is_start, distance,
                           tuple(c[0] for c in combo))
                    if best is None or key < best[0]:
                        best = (key, combo, is_start)
        if best is None:
            return
        _, combo, is_start = best
        for ev, new_mode, *_ in combo:
            house.mode[ev] = new_mode
            self.series.set(ev, t, new_mode)
            if is_start and self.ev_info[ev].rated_kw < params.high_rated_threshold_kw:
                house.timer_end[ev] = i + self._period
            elif not is_start:
                house.timer_end.pop(ev, None)
        if is_start:
            house.used.add(i + 1)
        # indices before i are never looked at again except i-1 via `backward`
        house.used = {u for u in house.used if u >= i - 1}

    def snapshot(self) -> dict:
        return {
            "series": {ev: self.series.changes(ev) for ev in self.series.evs()},
            "houses": {h: (len(x.times), dict(x.mode), dict(x.timer_end))
                       for h, x in sorted(self.houses.items())},
        }


def validate_power(reported: float, t: int, ev: str, series, bands: Mapping[str, SteadyStateBand],
                   first_packet: bool, *, co_resident: Sequence[str] = (),
                   last_reported: Optional[Mapping[str, float]] = None) -> bool:
    """Is the reported power consistent with the physical charge state at ``t``?

    ``series`` is anything with ``mode_at(ev, t)``.  When other EVs of the
    same household are also active, the household total (this report plus
    the latest accepted reports of the others) is checked against the sum of
    their steady powers instead.
    """
    if ev not in bands:
        raise ConfigurationError(f"unknown EV {ev!r}")
    mode = series.mode_at(ev, t)
    if mode == 0:
        return False
    band = bands[ev]
    effective = reported
    others = [e for e in co_resident if e != ev and series.mode_at(e, t) != 0]
    if others:
        last_reported = last_reported or {}
        deviation = 0.0
        for e in others:
            if e not in bands:
                raise ConfigurationError(f"unknown EV {e!r}")
            m = series.mode_at(e, t)
            deviation += m * (last_reported.get(e, bands[e].center) - bands[e].center)
        effective = reported + mode * deviation
    if effective < band.min_kw:
        return first_packet
    return effective <= band.max_kw


def derive_discharge_profile(charge_profile, params: EfficiencyParams = EfficiencyParams()) -> np.ndarray:
    """Discharge power magnitudes from charge power magnitudes: ``|P_c| * eta1 * eta2``."""
    p = np.asarray(charge_profile, dtype=float)
    if np.any(p < 0):
        raise ValueError("charge profile values must be non-negative")
    return np.abs(p) * params.eta1 * params.eta2
