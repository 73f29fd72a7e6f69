import json

import pytest

from xheep_sim import cli
from xheep_sim.report import validate_report
from xheep_sim.scenario import ScenarioError, load_scenario, parse_scenario, run_scenario, validate_scenario
from xheep_sim.sweep import parse_axis_value, run_point, sweep, to_csv

SMALL = '''
[scenario]
name = "small"

[platform]
bank_count = 4
bank_size = "8 KiB"
frequency = "{freq}"
voltage = "0.8 V"

[[preload]]
address = "bank1"
random_words = 32
seed = 3

[[phase]]
name = "copy"
program_text = """
LOOP 4 i
  LOAD bank1+32*i 8
  COMPUTE 12
  STORE bank2+32*i 8
ENDLOOP
HALT
"""
power = {{ bank3 = "off" }}
stop = {{ until = "halted" }}

[[phase]]
name = "idle"
frequency = "{idle}"
power = {{ cpu = "off", bank2 = "retention" }}
stop = {{ duration = "2 ms" }}

[report]
json = "out/report.json"
csv = "out/energy.csv"
'''


def small(tmp_path, freq="100 MHz", idle="1 MHz", name="small"):
    path = tmp_path / f"{name}.scenario"
    path.write_text(SMALL.format(freq=freq, idle=idle))
    return path


def issues_of(text):
    try:
        return validate_scenario(parse_scenario(text, source="t.scenario"))
    except ScenarioError as exc:
        return exc.issues


def test_shipped_scenario_validates():
    scn = load_scenario("heepocrates")
    assert [ph.name for ph in scn.phases] == ["acquisition", "processing"]
    assert not validate_scenario(scn)


def test_small_scenario_runs_and_writes_outputs(tmp_path):
    res = run_scenario(load_scenario(small(tmp_path)))
    assert not res.faulted
    data = json.loads((tmp_path / "out/report.json").read_text())
    validate_report(data)
    assert [p["name"] for p in data["phases"]] == ["copy", "idle"]
    assert data["phases"][1]["wall_time_s"] == pytest.approx(2e-3)
    csv_text = (tmp_path / "out/energy.csv").read_text()
    assert csv_text.splitlines()[0].startswith("domain")
    assert res.platform.banks[2].psm.state.value == "retention"
    idle = res.report.phase("idle")
    assert idle["domains"]["cpu"]["energy_j"] == 0
    assert idle["domains"]["bank3"]["energy_j"] == 0


def test_runs_are_deterministic(tmp_path):
    a = run_scenario(load_scenario(small(tmp_path)), write_outputs=False).report.to_json()
    b = run_scenario(load_scenario(small(tmp_path)), write_outputs=False).report.to_json()
    assert a == b


def test_missing_unit_is_reported(tmp_path):
    with pytest.raises(ScenarioError) as exc:
        load_scenario(small(tmp_path, freq="100"))
    assert [i.location for i in exc.value.issues] == ["platform.frequency"]
    assert "unit" in exc.value.issues[0].message


def test_every_problem_is_listed():
    text = '''
[scenario]
name = "broken"
[platform]
frequency = "100 MHz"
voltage = "0.8 V"
xaif = { slave_ports = 3, master_ports = 4, interrupt_lines = 1, power_domains = 3 }
[[accelerator]]
kind = "cgra"
window = "0x50000000"
[[accelerator]]
kind = "imc"
window = "0x50000000"
[[phase]]
name = "p"
frequency = "200 MHz"
program_text = """COMPUTE 5
FROB
HALT
"""
power = { bank9 = "off", cpu = "retention" }
stop = { until = "halted" }
'''
    issues = issues_of(text)
    by_loc = {i.location: i.message for i in issues}
    assert "overlap" in by_loc["accelerator[1]"]
    assert "f_max" in by_loc["phase[0]"]
    assert any(loc.endswith(":2:1") for loc in by_loc)
    assert "phase[0].power.bank9" in by_loc
    assert "phase[0].power.cpu" in by_loc
    assert len(issues) == 5


def test_xaif_capacity_problem_is_reported():
    text = '''
[platform]
frequency = "100 MHz"
voltage = "0.8 V"
[[accelerator]]
kind = "cgra"
[[phase]]
name = "p"
program_text = "HALT"
'''
    issues = issues_of(text)
    assert issues and "XAIF capacity" in issues[0].message


def test_cli_exit_codes(tmp_path, capsys):
    good = small(tmp_path)
    assert cli.main(["validate", str(good)]) == 0
    assert json.loads(capsys.readouterr().out)["valid"] is True
    assert cli.main(["validate", str(small(tmp_path, idle="200 MHz", name="fast"))]) == 2
    out = json.loads(capsys.readouterr().out)
    assert out["valid"] is False and out["errors"][0]["location"] == "phase[1]"
    assert cli.main(["validate", str(tmp_path / "nope.scenario")]) == 2
    capsys.readouterr()
    assert cli.main(["run", str(good), "-q", "--json", str(tmp_path / "r.json")]) == 0
    validate_report(json.loads((tmp_path / "r.json").read_text()))
    faulty = tmp_path / "faulty.scenario"
    faulty.write_text('[platform]\nfrequency = "10 MHz"\nvoltage = "0.8 V"\n'
                      '[[phase]]\nname = "p"\nprogram_text = "LOAD 0x1f000000\\nHALT"\n')
    assert cli.main(["run", str(faulty), "-q"]) == 1
    assert cli.main(["sweep", str(good), "--axis", "topology", "--values", ""]) == 2


def test_cli_trace(tmp_path, capsys):
    out = tmp_path / "trace.csv"
    assert cli.main(["trace", str(small(tmp_path)), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("cycle,master") and len(lines) > 60


def test_sweep_rows_equal_standalone_runs(tmp_path):
    scn = load_scenario(small(tmp_path))
    rows = sweep(scn, "topology", ["one-at-a-time", "fully-connected"])
    for row in rows:
        alone = run_point(scn, "topology", parse_axis_value("topology", row["value"]))
        assert alone == row
    assert rows[0]["total_cycles"] > rows[1]["total_cycles"]
    assert sweep(scn, "topology", ["one-at-a-time", "fully-connected"], jobs=2) == rows
    text = to_csv(rows)
    assert text.count("\n") == 3


def test_sweep_operating_points(tmp_path):
    scn = load_scenario(small(tmp_path))
    rows = sweep(scn, "operating_point", ["0.8 V @ 100 MHz", "1.2 V @ 400 MHz"])
    # the idle phase lasts 2 ms of wall time; the copy phase is frequency-independent
    assert rows[0]["total_cycles"] - 200_000 == rows[1]["total_cycles"] - 800_000
    assert rows[1]["wall_time_s"] < rows[0]["wall_time_s"]
    assert rows[0]["value"] == "0.8 V @ 100 MHz"


def test_sweep_rejects_bad_axis(tmp_path):
    from xheep_sim.errors import ConfigurationError
    scn = load_scenario(small(tmp_path))
    with pytest.raises(ConfigurationError):
        sweep(scn, "colour", ["red"])
    with pytest.raises(ConfigurationError):
        parse_axis_value("operating_point", "fast")
