"""File formats: serialized models, observation CSVs, config files.

The model file is versioned JSON whose floats round-trip bit-exactly.
Observation data travels in a long CSV (one row per station and
period); ingestion applies a complete-case filter and reports dropped
stations.  All CSV output renders floats with 17 significant digits.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .basis import KnotGrid
from .covariance import CovParams
from .deformation import CoefPair, DeformationMap
from .errors import DataError
from .estimation import Dataset, DeformModel, FitDiagnostics

__all__ = [
    "SCHEMA_VERSION",
    "DATA_HEADER",
    "save_model",
    "load_model",
    "ingest",
    "write_long_csv",
    "read_grid_csv",
    "write_prediction_csv",
    "write_deformed_grid_csv",
    "read_config",
    "fmt",
]

SCHEMA_VERSION = 1
DATA_HEADER = ["station_id", "x1", "x2", "time", "value"]

# config keys accepted by the simulate/compare harnesses and the fit
CONFIG_KEYS = {
    "k1": int,
    "k2": int,
    "epsilon": float,
    "tol": float,
    "max_outer": int,
    "ridge": float,
    "seed": int,
    "t": int,
    "swirl_strength": float,
    "swirl_radius": float,
    "sigma2": float,
    "phi": float,
    "nugget": float,
    "grid_n": int,
}


def fmt(x: float) -> str:
    """Full-precision decimal rendering (17 significant digits)."""
    return f"{float(x):.17g}"


def save_model(model: DeformModel, path) -> None:
    """Write a fitted model as versioned JSON (row-major arrays)."""
    d = model.diagnostics
    payload = {
        "schema_version": SCHEMA_VERSION,
        "domain": {
            "x1_min": model.grid.x1_min,
            "x1_max": model.grid.x1_max,
            "x2_min": model.grid.x2_min,
            "x2_max": model.grid.x2_max,
        },
        "k1": model.grid.k1,
        "k2": model.grid.k2,
        "theta1": model.coef.theta1.tolist(),
        "theta2": model.coef.theta2.tolist(),
        "sigma2": model.cov.sigma2,
        "phi": model.cov.phi,
        "nugget": model.cov.nugget,
        "mean": model.mean,
        "diagnostics": {
            "loglik": list(d.loglik),
            "constraint_margins": list(d.margins),
            "init_stress": d.init_stress,
            "iterations": d.iterations,
            "converged": d.converged,
            "messages": list(d.messages),
        },
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_model(path) -> DeformModel:
    """Read a model file, rejecting unknown schema versions."""
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read model file {path}: {e}") from None
    version = payload.get("schema_version")
    if version != SCHEMA_VERSION:
        raise DataError(
            f"unsupported model schema version {version!r} (expected {SCHEMA_VERSION})"
        )
    try:
        dom = payload["domain"]
        grid = KnotGrid(
            dom["x1_min"], dom["x1_max"], dom["x2_min"], dom["x2_max"],
            payload["k1"], payload["k2"],
        )
        coef = CoefPair(
            np.array(payload["theta1"], dtype=float),
            np.array(payload["theta2"], dtype=float),
            validated=True,
        )
        cov = CovParams(payload["sigma2"], payload["phi"], payload["nugget"])
        d = payload["diagnostics"]
        diag = FitDiagnostics(
            loglik=list(d["loglik"]),
            margins=list(d["constraint_margins"]),
            init_stress=d["init_stress"],
            iterations=d["iterations"],
            converged=d["converged"],
            messages=list(d["messages"]),
        )
        return DeformModel(grid=grid, coef=coef, cov=cov, mean=payload["mean"], diagnostics=diag)
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"malformed model file {path}: {e}") from None


def _parse_float(text: str, line_no: int, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f"line {line_no}: cannot parse {column} value {text!r}") from None


def ingest(path) -> Dataset:
    """Read a long-format observation CSV into a complete-case Dataset.

    Expects the exact header station_id,x1,x2,time,value.  Stations are
    deduplicated by id (coordinate conflicts are errors), duplicate
    (station, time) rows are errors, and any station missing one of the
    observed periods is dropped (recorded in ``dropped_ids``).  Missing
    values may be spelled as an empty field or ``nan``; they drop the
    station through the complete-case rule.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file {path} does not exist")
    coords: dict[str, tuple[float, float]] = {}
    values: dict[str, dict[str, float]] = {}
    times: list[str] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if [h.strip() for h in header] != DATA_HEADER:
            raise DataError(
                f"{path}: header must be {','.join(DATA_HEADER)}, got {','.join(header)}"
            )
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != 5:
                raise DataError(f"line {line_no}: expected 5 fields, got {len(row)}")
            sid, x1s, x2s, time_label, value_s = (f.strip() for f in row)
            if not sid or not time_label:
                raise DataError(f"line {line_no}: empty station id or time label")
            x1 = _parse_float(x1s, line_no, "x1")
            x2 = _parse_float(x2s, line_no, "x2")
            if sid in coords:
                if coords[sid] != (x1, x2):
                    raise DataError(
                        f"line {line_no}: station {sid!r} reappears with different coordinates"
                    )
            else:
                coords[sid] = (x1, x2)
                values[sid] = {}
            if time_label in values[sid]:
                raise DataError(f"line {line_no}: duplicate (station, time) pair "
                                f"({sid!r}, {time_label!r})")
            if time_label not in times:
                times.append(time_label)
            if value_s == "" or value_s.lower() == "nan":
                value = float("nan")
            else:
                value = _parse_float(value_s, line_no, "value")
            values[sid][time_label] = value

    times = sorted(times)
    if len(times) < 2:
        raise DataError(f"{path}: need at least 2 time periods, found {len(times)}")
    complete, dropped = [], []
    for sid in sorted(coords):
        series = values[sid]
        if all(t in series and np.isfinite(series[t]) for t in times):
            complete.append(sid)
        else:
            dropped.append(sid)
    if len(complete) < 4:
        raise DataError(
            f"{path}: only {len(complete)} complete stations (need >= 4); "
            f"dropped {len(dropped)}"
        )
    sites = np.array([coords[sid] for sid in complete])
    z = np.array([[values[sid][t] for t in times] for sid in complete])
    return Dataset(
        sites=sites, replicates=z, ids=tuple(complete), times=tuple(times),
        dropped_ids=tuple(dropped),
    )


def write_long_csv(path, sites, ids, times, values) -> None:
    """Write observations in the long format understood by ingest."""
    sites = np.asarray(sites, dtype=float)
    values = np.asarray(values, dtype=float)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DATA_HEADER)
        for i, sid in enumerate(ids):
            for j, t in enumerate(times):
                writer.writerow([sid, fmt(sites[i, 0]), fmt(sites[i, 1]), t,
                                 fmt(values[i, j])])


def read_grid_csv(path) -> np.ndarray:
    """Read prediction sites from a CSV with header x1,x2."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"grid file {path} does not exist")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if [h.strip() for h in header] != ["x1", "x2"]:
            raise DataError(f"{path}: header must be x1,x2")
        pts = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != 2:
                raise DataError(f"line {line_no}: expected 2 fields, got {len(row)}")
            pts.append([_parse_float(row[0], line_no, "x1"),
                        _parse_float(row[1], line_no, "x2")])
    if not pts:
        raise DataError(f"{path}: no prediction sites")
    return np.array(pts)


def write_prediction_csv(path, pred_sites, mean, variance) -> None:
    pred_sites = np.asarray(pred_sites, dtype=float)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x1", "x2", "mean", "variance"])
        for p, m, v in zip(pred_sites, mean, variance):
            writer.writerow([fmt(p[0]), fmt(p[1]), fmt(m), fmt(v)])


def write_deformed_grid_csv(path, dmap: DeformationMap, n_side: int = 21) -> None:
    """Regular n x n grid of geographic points and their deformed images."""
    grid = dmap.grid
    g1 = np.linspace(grid.x1_min, grid.x1_max, n_side)
    g2 = np.linspace(grid.x2_min, grid.x2_max, n_side)
    xx, yy = np.meshgrid(g1, g2, indexing="ij")
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    images = dmap(pts)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gx1", "gx2", "dx1", "dx2"])
        for p, q in zip(pts, images):
            writer.writerow([fmt(p[0]), fmt(p[1]), fmt(q[0]), fmt(q[1])])


def read_config(path) -> dict:
    """Parse a flat key = value config file (# starts a comment)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file {path} does not exist")
    out: dict = {}
    for line_no, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"config line {line_no}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip().lower()
        value = value.strip()
        if key not in CONFIG_KEYS:
            raise DataError(f"config line {line_no}: unknown key {key!r}")
        try:
            out[key] = CONFIG_KEYS[key](value)
        except ValueError:
            raise DataError(
                f"config line {line_no}: cannot parse {key} value {value!r}"
            ) from None
    return out
