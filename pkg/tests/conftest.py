import json

import numpy as np
import pytest

from fsp_lidar.cluster import VehicleClass
from fsp_lidar.synth import SynthSceneParams, VehicleSpec, synth_scene


def truck_scene_params(seed=1, n_frames=30, with_truck=True) -> SynthSceneParams:
    trucks = (VehicleSpec(VehicleClass.LONG_TRUCK, (150.0, 2.0), 15.0),) if with_truck else ()
    cars = (VehicleSpec(VehicleClass.NON_TRUCK, (120.0, -3.5), 12.0),
            VehicleSpec(VehicleClass.NON_TRUCK, (80.0, -3.5), 12.0))
    return SynthSceneParams(seed=seed, n_frames=n_frames, truck_specs=trucks, car_specs=cars)


@pytest.fixture(scope="session")
def truck_scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("truck_scene")
    return synth_scene(truck_scene_params(), out)


@pytest.fixture(scope="session")
def cars_scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("cars_scene")
    return synth_scene(truck_scene_params(with_truck=False), out)


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def brute_nearest(queries, cloud):
    """Exhaustive nearest distance, chunked to bound memory.

    Squared terms are summed x, y, z in that order, as a plain loop would.
    """
    queries = np.asarray(queries, dtype=np.float64)
    cloud = np.asarray(cloud, dtype=np.float64)
    out = np.empty(len(queries))
    for s in range(0, len(queries), 512):
        q = queries[s:s + 512]
        d2 = np.square(q[:, 0:1] - cloud[:, 0])
        d2 += np.square(q[:, 1:2] - cloud[:, 1])
        d2 += np.square(q[:, 2:3] - cloud[:, 2])
        out[s:s + 512] = np.sqrt(d2.min(axis=1))
    return out


# one summary line per acceptance criterion, shown at the end of the run
ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
