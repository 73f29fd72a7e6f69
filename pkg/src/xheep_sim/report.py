"""Energy report assembly and JSON/CSV export."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from .power import always_on_split

SCHEMA_VERSION = 1


@dataclass
class EnergyReport:
    scenario: str
    total_cycles: int
    wall_time_s: float
    total_energy_j: float
    truncated: bool = False
    faulted: bool = False
    wall_time_exact: str = "0"
    domains: dict = field(default_factory=dict)
    phases: list = field(default_factory=list)
    always_on_leakage_split: dict = field(default_factory=dict)
    bus: dict = field(default_factory=dict)
    cpus: dict = field(default_factory=dict)
    events: list = field(default_factory=list)
    calibration: str = ""

    @property
    def average_power_w(self) -> float:
        return self.total_energy_j / self.wall_time_s if self.wall_time_s else 0.0

    def phase(self, name: str) -> dict:
        for p in self.phases:
            if p["name"] == name:
                return p
        raise KeyError(name)

    def domain_energy_sum(self) -> float:
        return sum(d["energy_j"] for d in self.domains.values())

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "scenario": self.scenario,
            "calibration": self.calibration,
            "truncated": self.truncated,
            "faulted": self.faulted,
            "total_cycles": self.total_cycles,
            "wall_time_s": self.wall_time_s,
            "wall_time_exact": self.wall_time_exact,
            "total_energy_j": self.total_energy_j,
            "average_power_w": self.average_power_w,
            "domains": self.domains,
            "phases": self.phases,
            "always_on_leakage_split": self.always_on_leakage_split,
            "bus": self.bus,
            "cpus": self.cpus,
            "events": self.events,
        }

    def to_json(self, indent: Optional[int] = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EnergyReport":
        keys = ("scenario", "total_cycles", "wall_time_s", "total_energy_j", "truncated", "faulted",
                "wall_time_exact", "domains", "phases", "always_on_leakage_split", "bus", "cpus",
                "events", "calibration")
        return cls(**{k: d[k] for k in keys if k in d})

    def to_csv(self) -> str:
        """Domain x phase energy matrix (joules) with totals and phase summaries."""
        buf = io.StringIO()
        w = csv.writer(buf)
        names = [p["name"] for p in self.phases]
        w.writerow(["domain"] + names + ["total"])
        for dom in self.domains:
            row = [p["domains"].get(dom, {}).get("energy_j", 0.0) for p in self.phases]
            w.writerow([dom] + [f"{x:.9e}" for x in row] + [f"{self.domains[dom]['energy_j']:.9e}"])
        w.writerow(["total"] + [f"{p['energy_j']:.9e}" for p in self.phases] + [f"{self.total_energy_j:.9e}"])
        w.writerow(["cycles"] + [p["cycles"] for p in self.phases] + [self.total_cycles])
        w.writerow(["wall_time_s"] + [f"{p['wall_time_s']:.9e}" for p in self.phases]
                   + [f"{self.wall_time_s:.9e}"])
        w.writerow(["average_power_w"] + [f"{p['average_power_w']:.9e}" for p in self.phases]
                   + [f"{self.average_power_w:.9e}"])
        return buf.getvalue()

    def write(self, json_path=None, csv_path=None) -> None:
        for path, text in ((json_path, self.to_json), (csv_path, self.to_csv)):
            if path:
                path = Path(path)
                path.parent.mkdir(parents=True, exist_ok=True)
                with open(path, "w", newline="") as fh:
                    fh.write(text())


def _tally_dict(t) -> dict:
    return {
        "energy_j": t.energy_j,
        "leakage_j": t.leak_j,
        "clock_j": t.clock_j,
        "activity_j": t.activity_j,
        "dynamic_j": t.clock_j + t.activity_j,
        "residency_cycles": dict(t.cycles),
        "activity_units": t.activity_units,
        "features": {"leak_s": dict(t.leak_feature), "clock": t.clock_feature,
                     "activity": t.activity_feature},
    }


def build_report(platform, scenario: str = "ad-hoc", truncated: bool = False) -> EnergyReport:
    acct = platform.energy
    totals = acct.domain_totals()         # flushes
    phases = []
    for ph in acct.phases:
        wall = float(ph.wall_time)
        phases.append({
            "name": ph.name,
            "cycles": ph.cycles,
            "wall_time_s": wall,
            "energy_j": ph.energy_j,
            "average_power_w": ph.energy_j / wall if wall else 0.0,
            "operating_points": [{"voltage_v": v, "frequency_hz": f} for v, f in ph.operating_points],
            "domains": {n: _tally_dict(t) for n, t in ph.domains.items()},
        })
    split = always_on_split(acct.calibration)
    ao_leak = sum(split.values())
    wall = platform.clock.wall_time
    faulted = any(e.get("kind") in ("cpu-trap", "dma-error", "cgra-error") for e in _events(platform))
    cpus = {c.name: c.stats() for c in platform.cpus}
    return EnergyReport(
        scenario=scenario,
        total_cycles=platform.clock.cycle_count,
        wall_time_s=float(wall),
        wall_time_exact=str(wall),
        total_energy_j=acct.total_energy_j,
        truncated=truncated,
        faulted=faulted,
        domains={n: _tally_dict(t) for n, t in totals.items()},
        phases=phases,
        always_on_leakage_split={
            **{f"{k}_w": v for k, v in split.items()},
            **{f"{k}_fraction": (v / ao_leak if ao_leak else 0.0) for k, v in split.items()},
        },
        bus=platform.bus.stats(platform.clock.cycle_count),
        cpus=cpus,
        events=_events(platform),
        calibration=acct.calibration.name,
    )


def _events(platform) -> list:
    out = []
    for e in platform.events:
        if isinstance(e, dict):
            out.append(dict(e))
        else:
            out.append({"cycle": e.cycle, "kind": e.kind, "source": e.source, "detail": e.detail})
    return out


def load_schema() -> dict:
    text = resources.files("xheep_sim").joinpath("data/schema/energy_report.schema.json").read_text()
    return json.loads(text)


def validate_report(data: dict) -> None:
    """Raise ``jsonschema.ValidationError`` if ``data`` violates the shipped schema."""
    import jsonschema
    jsonschema.validate(data, load_schema())
