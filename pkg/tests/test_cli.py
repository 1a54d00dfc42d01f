import json

import pytest

from v2gids.cli import attack_kind, main
from v2gids.datagen import AttackKind


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "sc.json").write_text(json.dumps({"seed": 2, "evs": 8, "households": 3,
                                                  "hours": 10}))
    (tmp_path / "cfg.ini").write_text("timing = off\nfrequency_tolerance = 0.10\n")
    return tmp_path


def test_full_pipeline(workdir, capsys):
    w = workdir
    assert main(["generate", "--scenario", str(w / "sc.json"), "--out", str(w / "tr")]) == 0
    assert main(["inject", "--trace", str(w / "tr"), "--attack", "under_report", "--count", "4",
                 "--seed", "1"]) == 0
    assert main(["run", "--trace", str(w / "tr"), "--config", str(w / "cfg.ini"),
                 "--report", str(w / "rep.json")]) == 0
    report = json.loads((w / "rep.json").read_text())
    assert report["classes"]["attack-2"]["detected"] == 4
    assert report["false_positives"] == 0
    assert (w / "rep.verdicts.jsonl").exists()
    capsys.readouterr()
    assert main(["report", "--report", str(w / "rep.json"), "--format", "json"]) == 0
    assert json.loads(capsys.readouterr().out) == report
    assert main(["report", "--report", str(w / "rep.json"), "--format", "text"]) == 0
    assert "attack-2" in capsys.readouterr().out


def test_inject_to_other_directory(workdir):
    w = workdir
    main(["generate", "--scenario", str(w / "sc.json"), "--out", str(w / "tr")])
    before = (w / "tr" / "trace.jsonl").read_text()
    assert main(["inject", "--trace", str(w / "tr"), "--attack", "attack-3", "--count", "2",
                 "--out", str(w / "tr2")]) == 0
    assert (w / "tr" / "trace.jsonl").read_text() == before
    assert len((w / "tr2" / "trace.jsonl").read_text().splitlines()) == len(before.splitlines()) + 2


@pytest.mark.parametrize("name", ["over_report", "OverReport", "attack-1", "1"])
def test_attack_names(name):
    assert attack_kind(name) is AttackKind.OVER_REPORT


def test_validation_errors_exit_nonzero(workdir, capsys):
    w = workdir
    main(["generate", "--scenario", str(w / "sc.json"), "--out", str(w / "tr")])
    assert main(["inject", "--trace", str(w / "tr"), "--attack", "4", "--count", "100000"]) != 0
    (w / "bad.ini").write_text("no_such_key = 1\n")
    assert main(["run", "--trace", str(w / "tr"), "--config", str(w / "bad.ini"),
                 "--report", str(w / "r.json")]) != 0
    (w / "mismatch.ini").write_text("period_power_status_s = 30\n")
    assert main(["run", "--trace", str(w / "tr"), "--config", str(w / "mismatch.ini"),
                 "--report", str(w / "r.json")]) != 0
    assert not (w / "r.json").exists()
    assert "error:" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["inject", "--trace", str(w / "tr"), "--attack", "teleport", "--count", "1"])
    assert exc.value.code != 0


def test_custom_table(workdir):
    w = workdir
    main(["generate", "--scenario", str(w / "sc.json"), "--out", str(w / "tr")])
    (w / "table.txt").write_text("NotSubscribed, PricingFetch, NotSubscribed\n")
    assert main(["run", "--trace", str(w / "tr"), "--config", str(w / "cfg.ini"),
                 "--report", str(w / "rep.json"), "--table", str(w / "table.txt")]) == 0
    report = json.loads((w / "rep.json").read_text())
    assert report["verdict_counts"]["UnexpectedSequence"] > 0
