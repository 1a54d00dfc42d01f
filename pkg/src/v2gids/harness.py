"""End-to-end runner: stream a labelled trace through the engine, then score
accuracy per attack class and per-packet inspection latency."""

from __future__ import annotations

import gc
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

from .config import EngineConfig
from .core import Verdict
from .datagen import (ATTACK_LABELS, BENIGN, AttackKind, AttackSpec, LabeledTrace, Scenario,
                      generate_packet_trace, inject_attack)
from .engine import Disposition, Engine
from .protocol import DEFAULT_TABLE, TransitionTable

BUDGET_S = 2.0
STRETCH_MAX_S = 0.165
STRETCH_MEAN_S = 0.014

EXPECTED_VERDICT = {
    AttackKind.OVER_REPORT.label: Verdict.INCONSISTENT_POWER,
    AttackKind.UNDER_REPORT.label: Verdict.INCONSISTENT_POWER,
    AttackKind.OUT_OF_SEQUENCE.label: Verdict.UNEXPECTED_SEQUENCE,
    AttackKind.BEYOND_SUBSCRIPTION.label: Verdict.INVALID_SUBSCRIPTION,
    AttackKind.WRONG_PERIODICITY.label: Verdict.INCONSISTENT_FREQUENCY,
}


class ValidationError(ValueError):
    """Trace, registry and config do not fit together."""


class AlignmentError(ValueError):
    pass


class InsufficientData(ValueError):
    pass


@dataclass
class ClassStats:
    injected: int = 0
    detected: int = 0
    false_negatives: int = 0
    misclassified: int = 0


@dataclass
class Accuracy:
    false_positives: int
    classes: dict[str, ClassStats]
    benign: int = 0

    @property
    def false_negatives(self) -> int:
        return sum(c.false_negatives for c in self.classes.values())


def compute_accuracy(verdicts: Sequence[Verdict | str], labels: Sequence[str]) -> Accuracy:
    """FP over benign labels; detections, FN and misclassifications per attack label."""
    if len(verdicts) != len(labels):
        raise AlignmentError(f"{len(verdicts)} verdicts for {len(labels)} labels")
    classes = {lab: ClassStats() for lab in ATTACK_LABELS}
    fp = benign = 0
    for v, lab in zip(verdicts, labels):
        v = Verdict(v)
        if lab == BENIGN:
            benign += 1
            fp += v.anomalous
            continue
        stats = classes.setdefault(lab, ClassStats())
        stats.injected += 1
        expected = EXPECTED_VERDICT.get(lab)
        if v is expected:
            stats.detected += 1
        else:
            stats.false_negatives += 1
            if v.anomalous:
                stats.misclassified += 1
    return Accuracy(fp, classes, benign)


@dataclass(frozen=True)
class LatencyStats:
    """Per-packet inspection time in microseconds."""

    n: int
    mean_us: float
    max_us: float
    p999_us: float

    @property
    def within_budget(self) -> bool:
        return self.max_us < BUDGET_S * 1e6

    @property
    def meets_stretch(self) -> bool:
        return self.max_us < STRETCH_MAX_S * 1e6 and self.mean_us < STRETCH_MEAN_S * 1e6


def nearest_rank(sorted_values: Sequence[float], q: float) -> float:
    n = len(sorted_values)
    return sorted_values[max(0, math.ceil(q * n) - 1)]


def measure_latency(durations_us: Sequence[float], min_samples: int = 1000) -> LatencyStats:
    if len(durations_us) < min_samples:
        raise InsufficientData(f"{len(durations_us)} samples, need at least {min_samples}")
    ordered = sorted(durations_us)
    return LatencyStats(len(ordered), sum(ordered) / len(ordered), ordered[-1],
                        nearest_rank(ordered, 0.999))


@dataclass
class RunReport:
    classes: dict[str, ClassStats]
    false_positives: int
    benign_packets: int
    packets: int
    evs: int
    latency: Optional[LatencyStats]
    wall_time_s: float
    verdict_counts: dict[str, int] = field(default_factory=dict)

    @property
    def false_negatives(self) -> int:
        return sum(c.false_negatives for c in self.classes.values())

    def to_dict(self) -> dict:
        d = {
            "packets": self.packets,
            "evs": self.evs,
            "benign_packets": self.benign_packets,
            "false_positives": self.false_positives,
            "false_negatives": self.false_negatives,
            "classes": {k: asdict(v) for k, v in sorted(self.classes.items())},
            "verdict_counts": dict(sorted(self.verdict_counts.items())),
            "latency_us": None,
            "wall_time_s": self.wall_time_s,
        }
        if self.latency is not None:
            lat = self.latency
            d["latency_us"] = {"n": lat.n, "mean": lat.mean_us, "max": lat.max_us,
                               "p99.9": lat.p999_us, "budget_s": BUDGET_S,
                               "within_budget": lat.within_budget,
                               "meets_stretch": lat.meets_stretch}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunReport":
        lat = d.get("latency_us")
        latency = None
        if lat:
            latency = LatencyStats(lat["n"], lat["mean"], lat["max"], lat["p99.9"])
        return cls({k: ClassStats(**v) for k, v in d["classes"].items()}, d["false_positives"],
                   d["benign_packets"], d["packets"], d["evs"], latency, d["wall_time_s"],
                   dict(d.get("verdict_counts", {})))

    def to_text(self) -> str:
        lines = [f"packets {self.packets}  evs {self.evs}  wall {self.wall_time_s:.2f} s",
                 f"false positives {self.false_positives} / {self.benign_packets} benign"]
        for name, c in sorted(self.classes.items()):
            lines.append(f"{name:<10} injected {c.injected:>5}  detected {c.detected:>5}  "
                         f"FN {c.false_negatives:>4}  misclassified {c.misclassified:>4}")
        if self.latency is None:
            lines.append("latency: not measured (timing off or too few packets)")
        else:
            lat = self.latency
            lines.append(f"latency mean {lat.mean_us:.1f} us  p99.9 {lat.p999_us:.1f} us  "
                         f"max {lat.max_us:.1f} us  "
                         f"({'within' if lat.within_budget else 'OVER'} the {BUDGET_S:g} s budget)")
        return "\n".join(lines) + "\n"


@dataclass
class Run:
    trace: LabeledTrace
    dispositions: list[Disposition]
    report: RunReport
    engine: Engine

    @property
    def verdicts(self) -> list[Verdict]:
        return [d.verdict for d in self.dispositions]


def validate_inputs(trace: LabeledTrace, config: EngineConfig) -> None:
    """Raise before any processing when trace, registry and config disagree."""
    known = {e.ev for e in trace.evs}
    houses = {e.household for e in trace.evs}
    for i, p in enumerate(trace.packets):
        if p.ev not in known:
            raise ValidationError(f"packet {i}: EV {p.ev!r} is not in the scenario registry")
    if len(known) > config.pool_size:
        raise ValidationError(f"{len(known)} EVs exceed the inspection pool of {config.pool_size}")
    load_houses = {s.household for s in trace.loads}
    missing = houses - load_houses
    if missing:
        raise ValidationError(f"no load samples for households {sorted(missing)}")
    for i, (a, b) in enumerate(zip(trace.packets, trace.packets[1:]), start=1):
        if b.arrival < a.arrival:
            raise ValidationError(f"packet {i} is out of time order")


def _step_ms(trace: LabeledTrace) -> int:
    times = sorted({s.t for s in trace.loads})
    return times[1] - times[0] if len(times) > 1 else 60_000


def run_trace(trace: LabeledTrace, config: EngineConfig = EngineConfig(),
              table: TransitionTable = DEFAULT_TABLE) -> Run:
    """Stream a trace through a fresh engine.

    Load samples stamped ``<= t`` are ingested before the packet arriving at
    ``t``.  Latency covers dispatch and inspection only.
    """
    validate_inputs(trace, config)
    engine = Engine(trace.evs, config, table)
    engine.physical.step_ms = _step_ms(trace)
    loads = sorted(trace.loads, key=lambda s: s.t)
    # the preloaded trace is long-lived; keep the cyclic collector from
    # rescanning it mid-run, which shows up as spurious per-packet latency
    gc.collect()
    gc.freeze()
    try:
        start = time.perf_counter()
        out = []
        j = 0
        for p in trace.packets:
            while j < len(loads) and loads[j].t <= p.arrival:
                engine.ingest_sample(loads[j])
                j += 1
            out.append(engine.process(p))
        wall = time.perf_counter() - start if config.timing else 0.0
    finally:
        gc.unfreeze()
    report = build_report(trace, out, wall, timing=config.timing)
    return Run(trace, out, report, engine)


def build_report(trace: LabeledTrace, dispositions: Sequence[Disposition], wall_time_s: float,
                 timing: bool = True) -> RunReport:
    verdicts = [d.verdict for d in dispositions]
    acc = compute_accuracy(verdicts, trace.labels)
    latency = None
    if timing:
        durations = [d.inspect_us for d in dispositions]
        if len(durations) != len(trace.packets):
            raise AssertionError("one duration per processed packet")
        try:
            latency = measure_latency(durations)
        except InsufficientData:
            latency = None
    counts: dict[str, int] = {}
    for v in verdicts:
        counts[v.value] = counts.get(v.value, 0) + 1
    return RunReport(acc.classes, acc.false_positives, acc.benign, len(trace.packets),
                     len(trace.evs), latency, round(wall_time_s, 6), counts)


def run_simulation(scenario: Scenario, attacks: Sequence[AttackSpec] = (),
                   config: EngineConfig = EngineConfig(),
                   table: TransitionTable = DEFAULT_TABLE) -> RunReport:
    """Generate the scenario's trace, inject ``attacks`` in order and score the engine."""
    trace = generate_packet_trace(scenario)
    for spec in attacks:
        trace = inject_attack(trace, spec, scenario.periods_ms)
    return run_trace(trace, config, table).report


def write_verdicts(dispositions: Sequence[Disposition], fh) -> None:
    for i, d in enumerate(dispositions):
        rec = {"index": i, "verdict": d.verdict.value, "inspect_us": d.inspect_us}
        fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_verdicts(fh) -> list[tuple[Verdict, float]]:
    out = []
    for line in fh:
        if line.strip():
            rec = json.loads(line)
            out.append((Verdict(rec["verdict"]), float(rec.get("inspect_us", 0.0))))
    return out
