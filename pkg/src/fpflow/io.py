"""File formats: ASCII PLY and CSV point clouds, per-point fields, traces, reports."""

import csv
import json
import os
from pathlib import Path

import numpy as np

from ._validation import check_points
from .exceptions import ParseError
from .geometry import PointCloud

_PLY_FLOAT = {"float", "float32", "double", "float64"}
_PLY_TYPES = _PLY_FLOAT | {"char", "uchar", "short", "ushort", "int", "uint",
                          "int8", "uint8", "int16", "uint16", "int32", "uint32"}


def _fmt(v):
    return format(float(v), ".17g")


def save_ply(cloud, path):
    """Write an ASCII PLY with ``x y z`` double properties (17 significant digits)."""
    X = check_points(cloud, min_points=1)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {X.shape[0]}",
        "property double x",
        "property double y",
        "property double z",
        "end_header",
    ]
    lines += [" ".join(_fmt(v) for v in row) for row in X]
    Path(path).write_text("\n".join(lines) + "\n")


def load_ply(path):
    """Read the ``vertex`` element of an ASCII PLY file."""
    with open(path, "r") as fh:
        text = fh.read().splitlines()
    if not text or text[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", line=1)
    elements = []  # (name, count, [props])
    lineno = 1
    end = None
    for lineno in range(2, len(text) + 1):
        tok = text[lineno - 1].split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise ParseError(f"unsupported PLY format {' '.join(tok[1:])!r}", line=lineno)
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise ParseError("malformed element line", line=lineno)
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before any element", line=lineno)
            if tok[1:2] == ["list"]:
                elements[-1][2].append(("list", tok[-1]))
            elif len(tok) == 3 and tok[1] in _PLY_TYPES:
                elements[-1][2].append((tok[1], tok[2]))
            else:
                raise ParseError(f"malformed property line {' '.join(tok)!r}", line=lineno)
        elif tok[0] == "end_header":
            end = lineno
            break
        else:
            raise ParseError(f"unexpected header keyword {tok[0]!r}", line=lineno)
    if end is None:
        raise ParseError("missing end_header", line=lineno)
    row = end
    X = None
    for name, count, props in elements:
        if name != "vertex":
            row += count
            continue
        names = [p[1] for p in props]
        try:
            cols = [names.index(c) for c in "xyz"]
        except ValueError:
            raise ParseError("vertex element lacks x, y or z", line=end) from None
        if any(p[0] == "list" for p in props):
            raise ParseError("list properties on vertices are not supported", line=end)
        X = np.empty((count, 3))
        for j in range(count):
            row += 1
            if row > len(text):
                raise ParseError(f"expected {count} vertices, file ended", line=row)
            vals = text[row - 1].split()
            if len(vals) != len(props):
                raise ParseError(f"expected {len(props)} values, got {len(vals)}", line=row)
            try:
                X[j] = [float(vals[c]) for c in cols]
            except ValueError:
                raise ParseError("non-numeric vertex value", line=row) from None
        break
    if X is None:
        raise ParseError("no vertex element", line=end)
    return PointCloud(X, {"source": str(path)})


def save_csv(cloud, path):
    """Write headerless ``x,y,z`` rows."""
    X = check_points(cloud, min_points=1)
    with open(path, "w") as fh:
        for row in X:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def load_csv(path):
    rows = []
    with open(path, "r", newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != 3:
                raise ParseError(f"expected 3 columns, got {len(rec)}", line=lineno)
            try:
                rows.append([float(c) for c in rec])
            except ValueError:
                raise ParseError("non-numeric value", line=lineno) from None
    if not rows:
        raise ParseError("empty point file", line=1)
    return PointCloud(np.array(rows), {"source": str(path)})


def load_cloud(path):
    """Load a point cloud from ``.ply`` or ``.csv``."""
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return load_ply(path)
    if suffix in (".csv", ".txt"):
        return load_csv(path)
    raise ParseError(f"unknown point-cloud extension {suffix!r}", line=None)


def save_cloud(cloud, path):
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return save_ply(cloud, path)
    if suffix in (".csv", ".txt"):
        return save_csv(cloud, path)
    raise ParseError(f"unknown point-cloud extension {suffix!r}", line=None)


def save_field(values, path):
    """Per-point scalars as ``index,value`` rows."""
    v = np.asarray(values, dtype=float).ravel()
    with open(path, "w") as fh:
        for i, x in enumerate(v):
            fh.write(f"{i},{_fmt(x)}\n")


def load_field(path):
    idx, vals = [], []
    with open(path, "r", newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec:
                continue
            if len(rec) != 2:
                raise ParseError(f"expected 'index,value', got {len(rec)} columns", line=lineno)
            try:
                idx.append(int(rec[0]))
                vals.append(float(rec[1]))
            except ValueError:
                raise ParseError("malformed field row", line=lineno) from None
    out = np.empty(len(vals))
    if sorted(idx) != list(range(len(vals))):
        raise ParseError("field indices are not 0..N-1", line=None)
    out[idx] = vals
    return out


def write_rows(rows, path, columns=None):
    """Write a list of dicts as CSV with a header."""
    rows = list(rows)
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in columns])


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return _fmt(v)
    return v


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else None
    return obj


def dump_operators_coo(ops, directory):
    """Write ``MG1``..``MG3`` and ``ML`` as ``row col value`` text files."""
    os.makedirs(directory, exist_ok=True)
    for name, M in zip(("MG1", "MG2", "MG3", "ML"), (*ops.MG, ops.ML)):
        C = M.tocoo()
        with open(os.path.join(directory, f"{name}.coo"), "w") as fh:
            for r, c, v in zip(C.row, C.col, C.data):
                fh.write(f"{r} {c} {_fmt(v)}\n")


class SnapshotWriter:
    """Callback writing ``step_{k:06}.ply`` and ``step_{k:06}.s.csv`` every ``stride`` steps."""

    def __init__(self, directory, stride=1):
        self.directory = Path(directory)
        self.stride = int(stride)
        self.directory.mkdir(parents=True, exist_ok=True)

    def write(self, step, X, s):
        save_ply(X, self.directory / f"step_{step:06d}.ply")
        save_field(s, self.directory / f"step_{step:06d}.s.csv")

    def __call__(self, state):
        if self.stride > 0 and state.step % self.stride == 0:
            self.write(state.step, state.X[0], state.s[0])
