"""File formats: trajectories, spectra, zero-span traces, fit results, tables.

Binary trajectory layout (little endian)::

    8 bytes   magic b"OPTOTRJ1"
    4 bytes   uint32 length L of the JSON header
    L bytes   UTF-8 JSON {"dt", "t0", "names", "count", "metadata"}
    ...       one float64 column of ``count`` values per name, in order

CSV files start with ``#`` comment lines (provenance, metadata) followed by a
header row.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path

import numpy as np

from .fitting import FitResult
from .sim import Trajectory
from .spectral import Spectrum, ZeroSpanTrace

MAGIC = b"OPTOTRJ1"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        # JSON has no inf/nan; keep them readable
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def dumps_json(obj):
    return json.dumps(_jsonable(obj), indent=2, sort_keys=False)


def provenance_line(scenario_hash=None):
    from . import __version__
    line = f"# optocool {__version__}"
    if scenario_hash:
        line += f" scenario-sha256={scenario_hash}"
    return line


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------

def write_trajectory(traj: Trajectory, path, fmt=None, provenance=None):
    """Write ``traj`` as binary (default, or suffix ``.otr``/``.bin``) or CSV (``.csv``)."""
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix.lower() == ".csv" else "binary")
    names = traj.series_names
    if fmt == "csv":
        cols = [traj.t] + [getattr(traj, n) for n in names]
        with open(path, "w", newline="") as fh:
            fh.write((provenance or provenance_line()) + "\n")
            fh.write(f"# dt={traj.dt!r}\n")
            w = csv.writer(fh)
            w.writerow(["t"] + names)
            for row in zip(*cols):
                w.writerow([repr(float(v)) for v in row])
        return path
    if fmt != "binary":
        raise ValueError("fmt must be 'binary' or 'csv'")
    header = json.dumps(dict(dt=traj.dt, t0=traj.t0, names=names, count=len(traj),
                             metadata=_jsonable(traj.metadata))).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for n in names:
            fh.write(np.ascontiguousarray(getattr(traj, n), dtype="<f8").tobytes())
    return path


def read_trajectory(path):
    """Inverse of :func:`write_trajectory` for either format."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC))
    if head == MAGIC:
        with open(path, "rb") as fh:
            fh.seek(len(MAGIC))
            (n_header,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(n_header))
            count = header["count"]
            cols = {}
            for name in header["names"]:
                cols[name] = np.frombuffer(fh.read(8 * count), dtype="<f8").astype(float)
                if len(cols[name]) != count:
                    raise ValueError(f"truncated trajectory file: {path}")
        return Trajectory(header["dt"], t0=header.get("t0", 0.0),
                          metadata=header.get("metadata", {}), **cols)
    comments, header, data = _read_csv(path)
    dt = None
    for c in comments:
        if c.startswith("dt="):
            dt = float(c[3:])
    cols = {name: data[:, i] for i, name in enumerate(header)}
    t = cols.pop("t")
    if dt is None:
        dt = float(t[1] - t[0])
    return Trajectory(dt, t0=float(t[0]), **cols)


# --------------------------------------------------------------------------
# spectra, traces, tables
# --------------------------------------------------------------------------

def write_table(path, header, rows, comments=(), provenance=None):
    """CSV with a provenance comment line, further ``# key=value`` lines and a header row."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write((provenance or provenance_line()) + "\n")
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _read_csv(path):
    comments, rows, header = [], [], None
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                comments.append(line[1:].strip())
                continue
            if header is None:
                header = next(csv.reader([line]))
                continue
            if line.strip():
                rows.append(next(csv.reader([line])))
    if not rows:
        return comments, header, np.empty((0, len(header or [])))
    try:
        data = np.array(rows, dtype=float)
    except ValueError:
        data = np.array([[_cell(v) for v in r] for r in rows], dtype=object)
    return comments, header, data


def _cell(v):
    try:
        return float(v)
    except ValueError:
        return v


def read_table(path):
    """Return (comments, header, array) of a CSV written by :func:`write_table`.

    The array is float when every cell is numeric, otherwise an object array
    holding floats and strings.
    """
    return _read_csv(path)


def write_spectrum_csv(s: Spectrum, path, provenance=None):
    return write_table(path, ["freq_hz", "psd_m2_per_hz"], zip(s.freq, s.psd),
                       comments=[f"resolution_bw={s.resolution_bw!r}",
                                 f"n_averages={s.n_averages}"], provenance=provenance)


def read_spectrum_csv(path):
    comments, _, data = _read_csv(path)
    meta = _kv(comments)
    return Spectrum(data[:, 0], data[:, 1], int(meta.get("n_averages", 1)),
                    float(meta.get("resolution_bw", data[1, 0] - data[0, 0])))


def write_trace_csv(trace: ZeroSpanTrace, path, provenance=None):
    return write_table(path, ["t_s", "temperature_k"], zip(trace.t, trace.temperature),
                       comments=[f"center_freq={trace.center_freq!r}",
                                 f"bandwidth={trace.bandwidth!r}"], provenance=provenance)


def read_trace_csv(path):
    comments, _, data = _read_csv(path)
    meta = _kv(comments)
    return ZeroSpanTrace(data[:, 0], data[:, 1], float(meta["center_freq"]),
                         float(meta["bandwidth"]))


def _kv(comments):
    out = {}
    for c in comments:
        if "=" in c and not c.startswith("optocool"):
            k, v = c.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def write_fit_json(fit: FitResult, path):
    Path(path).write_text(dumps_json(fit.to_dict()) + "\n")
    return path


def read_fit_json(path):
    d = json.loads(Path(path).read_text())
    return FitResult(d["params"], d["stderr"], d["residual_norm"], d["converged"], d["n_iter"],
                     d.get("flags", []), d.get("derived", {}))
