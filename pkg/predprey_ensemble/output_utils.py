import csv
import json
import logging
import os
from datetime import datetime, timezone
from typing import Iterable, List

import numpy as np

from predprey_ensemble.samplers import Trajectory

logger = logging.getLogger(__name__)


def _to_builtin(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, (set, tuple)):
        return list(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def write_json(path: str, payload: dict) -> str:
    """Writes payload with sorted keys so repeated runs give identical bytes."""
    with open(path, "w", newline="\n") as f:
        json.dump(payload, f, sort_keys=True, indent=2, default=_to_builtin)
        f.write("\n")
    logger.info(f"Wrote {path}")
    return path


def trajectory_rows(traj: Trajectory) -> Iterable[List[str]]:
    shape = traj.grid_shape
    index = list(np.ndindex(*shape))
    for k, t in enumerate(traj.times):
        for cell in index:
            yield [repr(float(t))] + [str(c) for c in cell] + [repr(float(traj.f[k][cell])), repr(float(traj.g[k][cell]))]


def write_trajectory_csv(path: str, traj: Trajectory) -> str:
    """
    Columns time,cell_x[,cell_y],f,g; one row per recorded time and cell.
    """
    header = ["time", "cell_x", "f", "g"] if len(traj.grid_shape) == 1 else ["time", "cell_x", "cell_y", "f", "g"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(trajectory_rows(traj))
    logger.info(f"Wrote {path}. times={len(traj.times)}, cells={traj.n_cells}")
    return path


def read_trajectory_csv(path: str) -> Trajectory:
    """Inverse of write_trajectory_csv (densities only, no metadata)."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    data = np.array(rows)
    n_axes = len(header) - 3
    cells = data[:, 1:1 + n_axes].astype(int)
    shape = tuple(cells.max(axis=0) + 1)
    times = np.unique(data[:, 0])
    f = data[:, -2].reshape((len(times),) + shape)
    g = data[:, -1].reshape((len(times),) + shape)
    return Trajectory(times=times, f=f, g=g, metadata={})


def write_manifest(out_dir: str, payload: dict, artifacts: List[str]) -> str:
    manifest = dict(payload)
    manifest["artifacts"] = sorted(os.path.basename(a) for a in artifacts)
    manifest["timestamp"] = datetime.now(timezone.utc).isoformat()
    return write_json(os.path.join(out_dir, "manifest.json"), manifest)
