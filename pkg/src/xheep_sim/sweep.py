"""Design-space sweeps over one platform axis.

Every point builds a fresh platform from the base scenario, so points share
no state and can run in worker processes. Rows come back in axis order
regardless of completion order.
"""

from __future__ import annotations

import copy
import csv
import io
import pickle
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Iterable, Optional

from .errors import ConfigurationError
from .interconnect import WORD_BYTES, AddressingMode, StreamMaster, Topology, read_stream
from .kernel import Simulator
from .platform import Platform, PlatformConfig
from .scenario import Scenario, run_scenario
from .units import parse_quantity

AXES = ("ports", "topology", "addressing", "bank_count", "cpu_profile", "operating_point")

COLUMNS = ("axis", "value", "topology", "addressing", "bank_count", "cpu_profile", "voltage_v",
           "frequency_hz", "total_cycles", "wall_time_s", "energy_j", "average_power_w",
           "bits_per_cycle", "grants", "faulted", "truncated")


def parse_axis_value(axis: str, text: str):
    text = str(text).strip()
    if axis in ("ports", "bank_count"):
        return int(text, 0)
    if axis == "topology":
        return Topology(text)
    if axis == "addressing":
        return AddressingMode(text)
    if axis == "cpu_profile":
        return text
    if axis == "operating_point":
        try:
            v, f = text.split("@")
        except ValueError:
            raise ConfigurationError(f"operating point must look like '0.8 V @ 170 MHz', got {text!r}") from None
        return parse_quantity(v.strip(), "voltage"), parse_quantity(f.strip(), "frequency")
    raise ConfigurationError(f"unknown sweep axis {axis!r}; choose from {list(AXES)}")


def port_bandwidth(config: PlatformConfig, n: int, window: int = 256, warmup: int = 8) -> float:
    """Bits per cycle sustained by ``n`` streaming masters, each reading its own bank."""
    if n <= 0:
        raise ConfigurationError("port count must be at least 1")
    banks = max(config.bank_count, 1 << (n - 1).bit_length())
    platform = Platform(replace(config, bank_count=banks))
    words = config.bank_size // WORD_BYTES
    for i in range(n):
        if config.addressing is AddressingMode.CONTIGUOUS:
            base, stride = platform.bank_base(i), WORD_BYTES
        else:
            base, stride = platform.bank_base(i), WORD_BYTES * banks
        platform.add_stream_master(StreamMaster(f"stream{i}", read_stream(base, stride, words,
                                                                         4 * (warmup + window))))
    sim = Simulator(platform, fast_forward=False)
    for _ in range(warmup):
        sim.step()
    before = platform.bus.total_grants
    for _ in range(window):
        sim.step()
    return (platform.bus.total_grants - before) * 32 / window


def point_scenario(base: Scenario, axis: str, value) -> Scenario:
    scn = copy.copy(base)
    if axis == "operating_point":
        v, f = value
        scn.platform = replace(base.platform, voltage_v=v, frequency_hz=f)
        scn.phases = [replace(ph, voltage_v=v, frequency_hz=f, fll_bypass=False) for ph in base.phases]
    else:
        scn.platform = replace(base.platform, **{axis: value})
    return scn


def _row(axis: str, value, cfg: PlatformConfig) -> dict:
    row = dict.fromkeys(COLUMNS, "")
    shown = value.value if hasattr(value, "value") else value
    if axis == "operating_point":
        shown = f"{float(value[0]):g} V @ {float(value[1]) / 1e6:g} MHz"
    row.update(axis=axis, value=shown, topology=cfg.topology.value, addressing=cfg.addressing.value,
               bank_count=cfg.bank_count, cpu_profile=cfg.cpu_profile,
               voltage_v=float(cfg.voltage_v), frequency_hz=float(cfg.frequency_hz))
    return row


def run_point(base: Scenario, axis: str, value) -> dict:
    if axis == "ports":
        row = _row(axis, value, base.platform)
        row["bits_per_cycle"] = port_bandwidth(base.platform, value)
        return row
    scn = point_scenario(base, axis, value)
    result = run_scenario(scn, write_outputs=False)
    rep = result.report
    row = _row(axis, value, scn.platform)
    row.update(total_cycles=rep.total_cycles, wall_time_s=rep.wall_time_s, energy_j=rep.total_energy_j,
               average_power_w=rep.average_power_w, bits_per_cycle=rep.bus["bits_per_cycle"],
               grants=rep.bus["grants"], faulted=rep.faulted, truncated=rep.truncated)
    return row


def sweep(base: Scenario, axis: str, values: Iterable, jobs: int = 1) -> list[dict]:
    if axis not in AXES:
        raise ConfigurationError(f"unknown sweep axis {axis!r}; choose from {list(AXES)}")
    values = [parse_axis_value(axis, v) if isinstance(v, str) else v for v in values]
    if not values:
        raise ConfigurationError(f"sweep axis {axis!r} has no values")
    if jobs > 1 and len(values) > 1 and _picklable(base):
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run_point, [base] * len(values), [axis] * len(values), values))
    return [run_point(base, axis, v) for v in values]


def _picklable(obj) -> bool:
    # programmatic scenarios carry closures and stay in-process
    try:
        pickle.dumps(obj)
    except (pickle.PicklingError, AttributeError, TypeError):
        return False
    return True


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def write_csv(rows: list[dict], path: Optional[str]) -> str:
    text = to_csv(rows)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text
