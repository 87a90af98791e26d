import math

import numpy as np
import pytest

from ghostsweep.grid import GridConfig
from ghostsweep.synth import SceneSpec, synth_scene


def ascii_pcd(rows, fields=("x", "y", "z"), sizes=None, types=None, version="0.7",
              viewpoint="0 0 0 1 0 0 0", data="ascii"):
    """Hand-rolled PCD text, independent of the writer under test."""
    n = len(rows)
    sizes = sizes or ["4"] * len(fields)
    types = types or ["F"] * len(fields)
    head = [
        f"VERSION {version}",
        "FIELDS " + " ".join(fields),
        "SIZE " + " ".join(sizes),
        "TYPE " + " ".join(types),
        "COUNT " + " ".join("1" for _ in fields),
        f"WIDTH {n}",
        "HEIGHT 1",
        f"VIEWPOINT {viewpoint}",
        f"POINTS {n}",
        f"DATA {data}",
    ]
    body = [" ".join(str(v) for v in r) for r in rows]
    return "\n".join(head + body) + "\n"


def naive_encode(xyz, config: GridConfig, ground):
    """Triple loop voxelizer used as the encoding oracle."""
    n1, n2 = config.dims
    ground = np.broadcast_to(np.asarray(ground, dtype=np.float64), (n1, n2))
    words = [[0] * n2 for _ in range(n1)]
    below = oob = 0
    for x, y, z in np.asarray(xyz, dtype=np.float64).tolist():
        i = math.floor((x - config.origin[0]) / config.res_g)
        j = math.floor((y - config.origin[1]) / config.res_g)
        if not (0 <= i < n1 and 0 <= j < n2):
            oob += 1
            continue
        k = math.floor((z - ground[i][j]) / config.res_h)
        if k < 0:
            below += 1
            continue
        words[i][j] |= 1 << min(k, config.n_bit - 1)
    return words, below, oob


def small_config(n1=8, n2=8, n_bit=16, res_g=1.0, res_h=0.5, **kw):
    return GridConfig(res_g=res_g, res_h=res_h, n_bit=n_bit, origin=(0.0, 0.0), dims=(n1, n2),
                      z_floor=0.0, **kw)


@pytest.fixture(scope="session")
def default_scene():
    return synth_scene(SceneSpec(), seed=0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
