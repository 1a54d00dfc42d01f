import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import MIN
from v2gids.config import DetectionParams
from v2gids.core import Direction, FlowReservation
from v2gids.physical import (ChargeStateSeries, ConfigurationError, EfficiencyParams, EvInfo,
                             LoadSample, PhysicalMonitor, ResamplingRequired, SteadyStateBand,
                             derive_discharge_profile, high_pass_filter, identify_charge_states,
                             validate_power)


def samples(values, house="h1", step=MIN, t0=0):
    return [LoadSample(house, t0 + i * step, float(v)) for i, v in enumerate(values)]


def dps(values):
    return [f.dp for f in high_pass_filter(samples(values))]


def test_filter_example():
    assert dps([5, 5, 8, 8]) == [0, 0, 3, 0]


def test_single_spike_on_step():
    assert dps([0.4, 0.4, 3.4, 3.4]) == pytest.approx([0, 0, 3.0, 0])


def test_negative_values():
    assert dps([0.5, -1.0, -1.0, 0.2]) == pytest.approx([0, -1.5, 0, 1.2])


@given(st.floats(-20, 20, allow_nan=False), st.integers(1, 200))
def test_constant_profile_filters_to_zero(level, n):
    assert dps([level] * n) == [0.0] * n


@given(st.lists(st.floats(-20, 20, allow_nan=False), min_size=1, max_size=100))
def test_filter_sums_back_to_the_profile(values):
    assert np.allclose(np.cumsum(dps(values)) + values[0], values)


def test_filter_is_per_household():
    mixed = []
    for i in range(3):
        mixed += [LoadSample("a", i * MIN, float(i)), LoadSample("b", i * MIN, 10.0 * i)]
    out = high_pass_filter(mixed)
    assert [f.dp for f in out if f.household == "a"] == [0, 1, 1]
    assert [f.dp for f in out if f.household == "b"] == [0, 10, 10]


def test_non_uniform_samples():
    with pytest.raises(ResamplingRequired):
        high_pass_filter([LoadSample("h", 0, 1), LoadSample("h", MIN, 1), LoadSample("h", 3 * MIN, 1)])
    with pytest.raises(ValueError):
        high_pass_filter([])


def states(values, rated, **kw):
    filt = high_pass_filter(samples(values))
    series = identify_charge_states(filt, rated, **kw)
    return [series.state_at("ev", f.t) for f in filt]


def test_three_kw_spike_turns_state_on():
    assert states([0.5, 0.5, 3.5, 3.5], 3.0) == [0, 0, 1, 1]


def test_six_kw_negative_spike_turns_state_off():
    assert states([0.5, 6.5, 6.5, 0.5, 0.5], 6.0) == [0, 1, 1, 0, 0]


def test_two_sample_ramp_is_one_event():
    # start at index 1 (forward sum 1.5 + 1.5); index 2 is consumed
    assert states([0, 1.5, 3.0, 3.0], 3.0) == [0, 1, 1, 1]
    # 6 kW stop spread over two samples (backward sum)
    assert states([0, 3, 6, 6, 3, 0, 0], 6.0) == [0, 1, 1, 1, 1, 0, 0]


def test_low_rated_stays_on_for_constant_period():
    period = 120
    n = 200
    profile = np.zeros(n)
    profile[10:90] = 3.0
    profile[90:110] = np.linspace(3.0, 0.0, 20)  # slow decay, no negative spike
    st_ = states(profile, 3.0)
    assert st_[9] == 0 and all(st_[10:10 + period]) and not any(st_[10 + period:])


def test_low_rated_restart_extends_timer():
    profile = np.zeros(300)
    profile[10:50] = 3.0
    profile[100:150] = 3.0
    st_ = states(profile, 3.0)
    assert all(st_[10:220]) and not any(st_[220:])


def test_discharge_is_mirrored():
    d = 6.0 * 0.8464
    st_ = states([0, -d, -d, -d, 0, 0], 6.0, direction=Direction.DISCHARGE)
    assert st_ == [0, 1, 1, 1, 0, 0]


def test_wrong_size_spike_is_ignored():
    assert states([0, 4.5, 4.5], 3.0) == [0, 0, 0]


def test_initial_level_seeds_state():
    assert states([3.0, 3.0], 3.0, initial_level=3.0) == [1, 1]


def test_rated_floor():
    with pytest.raises(ValueError):
        identify_charge_states(high_pass_filter(samples([0, 0])), 2.0)


def test_series_change_points():
    s = ChargeStateSeries()
    for t, m in [(0, 0), (1, 1), (2, 1), (3, 0)]:
        s.set("e", t, m)
    assert s.changes("e") == [(0, 0), (1, 1), (3, 0)]
    assert s.sampled("e", [0, 1, 2, 3, 4]) == [(0, 0), (1, 1), (2, 1), (3, 0), (4, 0)]
    with pytest.raises(ValueError):
        s.set("e", 2, 1)


# -- AC interference -------------------------------------------------------

def with_ac(rated, ac_step, params):
    """EV ramp (two samples) with a coincident AC on/off step at the first ramp sample."""
    base = np.full(12, 0.5)
    if ac_step < 0:
        base[:4] += -ac_step
    else:
        base[4:] += ac_step
    ev = np.zeros(12)
    ev[4] = rated / 2
    ev[5:] = rated
    return states(base + ev, rated, params=params)[6]


@pytest.mark.parametrize("ac_step", [1.5, -1.5])
def test_ac_step_defeats_three_kw_but_not_six_kw(ac_step):
    params = DetectionParams()
    assert with_ac(3.0, ac_step, params) == 0
    assert with_ac(6.0, ac_step, params) == 1
    assert with_ac(3.0, 0.0, params) == 1


def test_literal_half_kw_event_range_defeats_both():
    """With start/stop acceptance narrowed to the +-0.5 kW steady band, a
    coincident 1.5 kW step masks 6 kW starts too."""
    params = DetectionParams(event_relative_tolerance=0.0)
    assert with_ac(3.0, 1.5, params) == 0
    assert with_ac(6.0, 1.5, params) == 0


# -- power validation -------------------------------------------------------

class Fixed:
    def __init__(self, modes):
        self.modes = modes

    def mode_at(self, ev, t):
        return self.modes.get(ev, 0)


BANDS = {"ev1": SteadyStateBand.around(3.0, 0.5)}


@pytest.mark.parametrize("mode, reported, first, ok", [
    (0, 3.0, False, False),
    (1, 1.2, True, True),
    (1, 1.2, False, False),
    (1, 3.4, False, True),
    (1, 3.6, False, False),
    (1, 3.5, False, True),
    (1, 2.5, False, True),
    (1, 3.6, True, False),
])
def test_validate_power(mode, reported, first, ok):
    assert validate_power(reported, 0, "ev1", Fixed({"ev1": mode}), BANDS, first) is ok


def test_validate_power_unknown_ev():
    with pytest.raises(ConfigurationError):
        validate_power(3.0, 0, "ev9", Fixed({}), BANDS, False)


def test_validate_power_household_total():
    bands = {"a": SteadyStateBand.around(3.0), "b": SteadyStateBand.around(6.0)}
    series = Fixed({"a": 1, "b": 1})
    # b's last report sits 0.4 kW high; a at +0.3 pushes the total past the band
    assert validate_power(3.3, 0, "a", series, bands, False, co_resident=["a", "b"],
                          last_reported={"b": 6.4}) is False
    assert validate_power(3.0, 0, "a", series, bands, False, co_resident=["a", "b"],
                          last_reported={"b": 6.4}) is True
    # without a report from b its band centre is assumed
    assert validate_power(3.4, 0, "a", series, bands, False, co_resident=["a", "b"]) is True


def test_band_must_be_proper():
    with pytest.raises(ValueError):
        SteadyStateBand(3.0, 3.0)


# -- discharge ----------------------------------------------------------------

def test_discharge_example():
    assert derive_discharge_profile([3.0])[0] == pytest.approx(2.5392, rel=1e-12)


def test_lossless_discharge():
    p = np.array([0.0, 3.0, 6.6])
    assert np.array_equal(derive_discharge_profile(p, EfficiencyParams(1.0, 1.0)), p)


def test_discharge_elementwise():
    rng = np.random.default_rng(5)
    p = rng.uniform(0, 10, 100)
    out = derive_discharge_profile(p)
    expected = [x * 0.92 * 0.92 for x in p]
    assert len(out) == 100
    for a, b in zip(out, expected):
        assert abs(a - b) <= 1e-12 * max(1.0, b)


def test_discharge_rejects_bad_input():
    with pytest.raises(ValueError):
        derive_discharge_profile([-1.0])
    with pytest.raises(ValueError):
        EfficiencyParams(0.0, 0.9)
    with pytest.raises(ValueError):
        EfficiencyParams(0.9, 1.1)


# -- streaming monitor --------------------------------------------------------

def feed(monitor, values, house="h1"):
    for s in samples(values, house):
        monitor.ingest(s)


def test_monitor_matches_single_ev_detector():
    rng = np.random.default_rng(1)
    profile = 0.5 + rng.uniform(-0.03, 0.03, 400)
    profile[20] += 1.5
    profile[21:150] += 3.0
    profile[150:170] += np.linspace(3.0, 0.0, 20)
    profile[200] += 3.3
    profile[201:260] += 6.6
    profile[260] += 3.3
    for rated in (3.0, 6.6):
        mon = PhysicalMonitor([EvInfo("ev", "h1", rated)])
        feed(mon, profile)
        pure = identify_charge_states(high_pass_filter(samples(profile)), rated, ev="ev")
        for i in range(len(profile) - 1):
            assert mon.state_at("ev", i * MIN) == pure.state_at("ev", i * MIN), (rated, i)


def test_simultaneous_starts_are_attributed_jointly():
    mon = PhysicalMonitor([EvInfo("a", "h1", 3.0), EvInfo("b", "h1", 3.0)])
    feed(mon, [0.5] * 5 + [3.5] + [6.5] * 10)
    assert mon.state_at("a", 5 * MIN) == 1 and mon.state_at("b", 5 * MIN) == 1


def test_reservations_gate_start_candidates():
    resv = {"b": FlowReservation("b", 10 * MIN, 60 * MIN, Direction.CHARGE, 3.3)}
    mon = PhysicalMonitor([EvInfo("a", "h1", 3.3), EvInfo("b", "h1", 3.3)],
                          reservations=resv.get)
    feed(mon, [0.5] * 9 + [2.15] + [3.8] * 10)
    assert mon.state_at("a", 10 * MIN) == 0 and mon.state_at("b", 10 * MIN) == 1


def test_reservation_direction_selects_discharge():
    resv = {"a": FlowReservation("a", 3 * MIN, 12 * MIN, Direction.DISCHARGE, 6.0)}
    mon = PhysicalMonitor([EvInfo("a", "h1", 6.0)], reservations=resv.get)
    d = 6.0 * 0.8464
    feed(mon, [1.0] * 3 + [1.0 - d] * 10 + [1.0] * 5)
    assert mon.mode_at("a", 3 * MIN) == -1
    assert mon.mode_at("a", 12 * MIN) == -1
    assert mon.mode_at("a", 13 * MIN) == 0


def test_stop_inside_window_is_not_attributed():
    """Two identical EVs on; the one whose window is still open keeps charging."""
    resv = {"a": FlowReservation("a", 2 * MIN, 200 * MIN, Direction.CHARGE, 6.0),
            "b": FlowReservation("b", 12 * MIN, 30 * MIN, Direction.CHARGE, 6.0)}
    mon = PhysicalMonitor([EvInfo("a", "h1", 6.0), EvInfo("b", "h1", 6.0)],
                          reservations=resv.get)
    feed(mon, [0.5] * 2 + [6.5] * 10 + [12.5] * 19 + [6.5] * 10)
    assert mon.state_at("b", 31 * MIN) == 0 and mon.state_at("a", 31 * MIN) == 1


def test_monitor_is_causal():
    """A state at t never depends on samples after t + one step."""
    profile = [0.5] * 5 + [2.0, 3.5] + [3.5] * 20
    full = PhysicalMonitor([EvInfo("a", "h1", 3.0)])
    feed(full, profile)
    for cut in range(1, len(profile)):
        part = PhysicalMonitor([EvInfo("a", "h1", 3.0)])
        feed(part, profile[:cut])
        t = (cut - 1) * MIN
        # everything the partial monitor has decided agrees with the full run
        for i in range(cut - 1):
            assert part.state_at("a", i * MIN) == full.state_at("a", i * MIN)
        assert part.state_at("a", t) in (0, full.state_at("a", t))


def test_monitor_errors():
    mon = PhysicalMonitor([EvInfo("a", "h1", 3.0)])
    with pytest.raises(ConfigurationError):
        mon.state_at("zz", 0)
    mon.ingest(LoadSample("h1", 0, 1.0))
    with pytest.raises(ResamplingRequired):
        mon.ingest(LoadSample("h1", 2 * MIN, 1.0))
    mon.ingest(LoadSample("elsewhere", 0, 1.0))  # households without EVs are ignored
    with pytest.raises(ValueError):
        PhysicalMonitor([EvInfo("a", "h1", 3.0), EvInfo("a", "h2", 3.0)])
