"""Acceptance suite.  Each test prints one PASS/FAIL line for its criterion,
and the lines are repeated in the terminal summary."""

import itertools
import random
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from helpers import K, packets_for
from v2gids.cli import main
from v2gids.config import DetectionParams, EngineConfig
from v2gids.core import Direction
from v2gids.datagen import (ATTACK_LABELS, AttackKind, AttackSpec, ChargeEvent, MINUTE,
                            generate_ev_profile, generate_packet_trace, inject_attack,
                            random_scenario)
from v2gids.harness import run_trace
from v2gids.physical import (EfficiencyParams, LoadSample, derive_discharge_profile,
                             high_pass_filter, identify_charge_states)
from v2gids.protocol import INITIAL_STATE, advance, enumerate_valid_sequences

OFF = EngineConfig(timing=False)
SEEDS = range(5)


def record(name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    print(line)
    ACCEPTANCE.append(line)
    assert ok, line


# -- zero false positives ----------------------------------------------------

def test_zero_false_positives():
    rows = []
    for seed in range(20):
        start = time.perf_counter()
        trace = generate_packet_trace(random_scenario(50, 10, 24, seed))
        report = run_trace(trace, OFF).report
        rows.append((seed, report.false_positives, report.packets, time.perf_counter() - start))
    fp = sum(r[1] for r in rows)
    small = [r[0] for r in rows if r[2] < 10_000]
    slow = [r[0] for r in rows if r[3] >= 60]
    record("zero false positives", fp == 0 and not small and not slow,
           f"{len(rows)} scenarios (50 EVs, 10 households, 24 h), FP {fp}, "
           f"packets {min(r[2] for r in rows)}..{max(r[2] for r in rows)}, "
           f"slowest {max(r[3] for r in rows):.1f} s")


# -- per-class detection ------------------------------------------------------

@pytest.fixture(scope="module")
def clean_traces():
    # 100 EVs so every class, including beyond-subscription (about one site
    # per session), has room for 100 injections per seed
    return {seed: generate_packet_trace(random_scenario(100, 20, 24, 100 + seed))
            for seed in SEEDS}


@pytest.mark.parametrize("kind", list(AttackKind), ids=lambda k: k.label)
def test_per_class_detection(kind, clean_traces):
    injected = detected = fn = fp = 0
    for seed, trace in clean_traces.items():
        attacked = inject_attack(trace, AttackSpec(kind, 100, seed=seed, magnitude_kw=1.0,
                                                   delta=0.5))
        report = run_trace(attacked, OFF).report
        c = report.classes[kind.label]
        injected += c.injected
        detected += c.detected
        fn += c.false_negatives
        fp += report.false_positives
    record(f"detection {kind.label} ({kind.value})", fn == 0 and injected >= 500 and fp == 0,
           f"{injected} injected over {len(SEEDS)} seeds, detected {detected}, FN {fn}, FP {fp}")


# -- sequence oracle ----------------------------------------------------------

def accepted(kinds) -> bool:
    state = INITIAL_STATE
    for p in packets_for(kinds):
        state, verdict = advance(state, p)
        if verdict.anomalous:
            return False
    return True


def test_sequence_oracle_equivalence():
    alphabet = list(K)
    disagreements = 0
    exhaustive = 0
    for depth in range(1, 6):
        valid = enumerate_valid_sequences(depth)
        for seq in itertools.product(alphabet, repeat=depth):
            exhaustive += 1
            if accepted(seq) != (seq in valid):
                disagreements += 1
    valid8 = enumerate_valid_sequences(8)
    valid_list = sorted((s for s in valid8 if len(s) >= 6), key=lambda s: [k.value for k in s])
    rng = random.Random(7)
    sampled = 0
    for i in range(100_000):
        if i % 2 and valid_list:
            # perturb a valid sequence so both outcomes are well represented
            seq = list(rng.choice(valid_list))
            if rng.random() < 0.5:
                seq[rng.randrange(len(seq))] = rng.choice(alphabet)
        else:
            seq = [rng.choice(alphabet) for _ in range(rng.randint(6, 8))]
        sampled += 1
        if accepted(seq) != (tuple(seq) in valid8):
            disagreements += 1
    record("sequence oracle equivalence", disagreements == 0,
           f"{exhaustive} exhaustive (depth <= 5) + {sampled} sampled (depth 6-8), "
           f"{disagreements} disagreements")


# -- discharge derivation -----------------------------------------------------

def test_discharge_derivation():
    rng = np.random.default_rng(3)
    profile = rng.uniform(0, 7.2, 1000)
    derived = derive_discharge_profile(profile, EfficiencyParams(0.92, 0.92))
    nz = profile != 0
    ratio = derived[nz] / profile[nz]
    exact = float(np.max(np.abs(ratio - 0.8464) / 0.8464))
    rounded = float(np.max(np.abs(ratio - 0.846) / 0.846))
    record("discharge derivation", exact <= 1e-9 and rounded <= 1e-3,
           f"max rel. error vs 0.8464 {exact:.1e}, vs 0.846 {rounded:.1e}")


# -- filter and event properties ----------------------------------------------

def _states(values, rated, direction=Direction.CHARGE, params=DetectionParams()):
    samples = [LoadSample("h", i * MINUTE, float(v)) for i, v in enumerate(values)]
    series = identify_charge_states(high_pass_filter(samples), rated, params, direction=direction)
    return [abs(m) for _, m in series.sampled("ev", [s.t for s in samples])]


def _ac_case(rated, ac_step, params):
    base = np.full(12, 0.5)
    if ac_step < 0:
        base[:4] += -ac_step
    else:
        base[4:] += ac_step
    ev = np.zeros(12)
    ev[4] = rated / 2
    ev[5:] = rated
    return _states(base + ev, rated, params=params)[6]


def test_filter_and_event_properties():
    rng = np.random.default_rng(11)
    constant_ok = all(
        all(f.dp == 0 for f in high_pass_filter(
            [LoadSample("h", i * MINUTE, level) for i in range(int(n))]))
        for level, n in zip(rng.uniform(-20, 20, 200), rng.integers(1, 300, 200)))

    starts = stops = start_hits = stop_hits = 0
    for rated in (3.0, 3.3, 3.6, 6.0, 6.6, 7.2):
        for direction in Direction:
            for lead in range(3, 40, 3):
                for minutes in (20, 45, 90):
                    profile = generate_ev_profile(rated, ChargeEvent(0, minutes, direction))
                    values = np.concatenate([np.zeros(lead), profile, np.zeros(40)]) + 0.4
                    st = _states(values, rated, direction)
                    starts += 1
                    start_hits += st[lead + 1] == 1
                    if rated >= 6.0:
                        stops += 1
                        end = lead + len(profile)
                        stop_hits += st[end - 2] == 1 and st[end] == 0

    params = DetectionParams()
    dichotomy = all(_ac_case(3.0, s, params) == 0 and _ac_case(6.0, s, params) == 1
                    for s in (1.5, -1.5)) and _ac_case(3.0, 0.0, params) == 1
    ok = constant_ok and start_hits == starts and stop_hits == stops and dichotomy
    record("filter/event properties", ok,
           f"constant -> 0 {constant_ok}; start recall {start_hits}/{starts}; "
           f"stop recall (>= 6 kW) {stop_hits}/{stops}; AC dichotomy with +-0.5 kW band "
           f"{'holds' if dichotomy else 'broken'}")
    literal = DetectionParams(event_relative_tolerance=0.0)
    both = _ac_case(3.0, 1.5, literal) == 0 and _ac_case(6.0, 1.5, literal) == 0
    note = ("[NOTE] with start/stop acceptance also narrowed to +-0.5 kW the 1.5 kW step "
            f"{'defeats both 3 kW and 6 kW' if both else 'behaves differently'}; "
            "the default widens event acceptance to 25% of rated")
    print(note)
    ACCEPTANCE.append(note)


# -- latency ------------------------------------------------------------------

def test_latency_budget():
    trace = generate_packet_trace(random_scenario(400, 80, 6, 42))
    run = run_trace(trace, EngineConfig(timing=True))
    lat = run.report.latency
    ok = lat is not None and lat.p999_us < 2e6 and lat.max_us < 2e6 and len(trace.evs) == 400
    record("latency budget", ok,
           f"400 EVs, {lat.n} packets, p99.9 {lat.p999_us:.0f} us, max {lat.max_us:.0f} us, "
           f"mean {lat.mean_us:.1f} us (budget 2 s)")
    stretch = (f"[NOTE] stretch (max < 0.165 s, mean < 0.014 s) "
               f"{'met' if lat.meets_stretch else 'not met'} on this machine")
    print(stretch)
    ACCEPTANCE.append(stretch)


# -- intrusion tolerance -------------------------------------------------------

@pytest.mark.parametrize("kind", list(AttackKind), ids=lambda k: k.label)
def test_intrusion_tolerance(kind):
    mismatched = []
    for seed in SEEDS:
        clean = generate_packet_trace(random_scenario(20, 4, 24, 200 + seed))
        attacked = inject_attack(clean, AttackSpec(kind, 10, seed=seed))
        with_attacks = run_trace(attacked, OFF).engine.snapshot()
        without = run_trace(attacked.without_labelled(), OFF).engine.snapshot()
        if with_attacks != without:
            mismatched.append(seed)
    record(f"intrusion tolerance {kind.label}", not mismatched,
           f"{len(SEEDS)} seeds, final state differs for seeds {mismatched or 'none'}")


# -- determinism --------------------------------------------------------------

def test_determinism(tmp_path):
    scenario = tmp_path / "sc.json"
    scenario.write_text('{"seed": 9, "evs": 20, "households": 4, "hours": 12}')
    config = tmp_path / "cfg.ini"
    config.write_text("timing = off\n")
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        assert main(["generate", "--scenario", str(scenario), "--out", str(d / "trace")]) == 0
        for n, attack in enumerate(ATTACK_LABELS):
            assert main(["inject", "--trace", str(d / "trace"), "--attack", attack,
                         "--count", "5", "--seed", str(n)]) == 0
        assert main(["run", "--trace", str(d / "trace"), "--config", str(config),
                     "--report", str(d / "report.json")]) == 0
        files = ["trace/trace.jsonl", "trace/labels.jsonl", "trace/load.csv", "trace/evs.json",
                 "report.json", "report.verdicts.jsonl"]
        outputs.append({f: (d / f).read_bytes() for f in files})
    differing = [f for f in outputs[0] if outputs[0][f] != outputs[1][f]]
    record("determinism", not differing,
           f"{len(outputs[0])} files compared byte for byte, differing: {differing or 'none'}")
