from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np
from loguru import logger

from kinetic import __version__
from kinetic.errors import ConfigurationError
from kinetic.grid import Distribution, SpatialLattice, VelocityGrid

# little-endian header: dim, n, R, n_x, L_x, time_tag
HEADER = np.dtype(
    [
        ("dim", "<i8"),
        ("n", "<i8"),
        ("radius", "<f8"),
        ("n_x", "<i8"),
        ("length", "<f8"),
        ("time_tag", "<f8"),
    ]
)
VALUES = np.dtype("<f8")


def format_float(value: float) -> str:
    """Shortest decimal that round-trips a 64-bit float."""
    return repr(float(value))


def write_distribution(path: Path, f: Distribution) -> Path:
    header = np.zeros(1, dtype=HEADER)
    header["dim"] = f.grid.dim
    header["n"] = f.grid.n
    header["radius"] = f.grid.radius
    header["n_x"] = 0 if f.spatial is None else f.spatial.n_x
    header["length"] = 0.0 if f.spatial is None else f.spatial.length
    header["time_tag"] = f.time_tag
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(f.values, dtype=VALUES).tobytes())
    return path


def read_distribution(path: Path) -> Distribution:
    raw = path.read_bytes()
    if len(raw) < HEADER.itemsize:
        raise ConfigurationError(f"{path}: truncated distribution container")
    header = np.frombuffer(raw[: HEADER.itemsize], dtype=HEADER)[0]
    grid = VelocityGrid(n=int(header["n"]), radius=float(header["radius"]), dim=int(header["dim"]))
    n_x = int(header["n_x"])
    spatial = SpatialLattice(n_x=n_x, length=float(header["length"])) if n_x > 0 else None
    shape = grid.shape if spatial is None else (n_x, *grid.shape)
    values = np.frombuffer(raw[HEADER.itemsize :], dtype=VALUES)
    if values.size != int(np.prod(shape)):
        raise ConfigurationError(f"{path}: expected {int(np.prod(shape))} values, found {values.size}")
    return Distribution(grid=grid, values=values.reshape(shape).copy(), time_tag=float(header["time_tag"]), spatial=spatial)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_float(x) if isinstance(x, (float, np.floating)) else x for x in row])
    return path


def read_csv(path: Path) -> tuple[list[str], np.ndarray]:
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(x) for x in row] for row in reader]
    return header, np.asarray(rows, dtype=float).reshape(len(rows), len(header))


def write_series(path: Path, times: Sequence[float], columns: Mapping[str, Sequence[float]]) -> Path:
    names = list(columns)
    rows = zip(times, *(columns[name] for name in names))
    return write_csv(path, ["time", *names], ([float(x) for x in row] for row in rows))


def export_slice_csv(path: Path, f: Distribution, axis: int = 0, x_index: Optional[int] = None) -> Path:
    """1D cut through the lattice center along one velocity axis, for plotting."""
    grid = f.grid
    values = f.values if f.spatial is None else f.values[x_index or 0]
    center = [grid.n // 2] * grid.dim
    index = tuple(slice(None) if a == axis else center[a] for a in range(grid.dim))
    return write_csv(path, [f"v{axis + 1}", "f"], zip(grid.axis.tolist(), values[index].tolist()))


def write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
    return path


def read_json(path: Path) -> Any:
    return json.loads(path.read_text(encoding="utf-8"))


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serialisable")


def write_manifest(
    directory: Path,
    command: str,
    config_hash: str,
    signatures: Mapping[str, str],
    artifacts: Sequence[str],
    extra: Optional[Mapping[str, Any]] = None,
) -> Path:
    payload = {
        "command": command,
        "config_hash": config_hash,
        "code_version": __version__,
        "signatures": dict(signatures),
        "artifacts": sorted(artifacts),
        **(dict(extra) if extra else {}),
    }
    path = write_json(directory / "manifest.json", payload)
    logger.info(f"manifest written to {path}")
    return path
