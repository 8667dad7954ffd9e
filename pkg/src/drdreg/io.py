"""File formats: binary dataset container, structured result files, and
key=value config parsing.

The dataset container is a short text header followed by raw little-endian
float64 payloads, which round-trips bit-exactly.  Result files are
human-readable key-value and table sections.  All writes go through a
write-then-rename so failures never leave partial files.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .kernels import LocationGrid
from .prior import Dataset

MAGIC = "DRDDATA"
VERSION = 1


class FormatError(ValueError):
    """File does not conform to the documented container format."""


def atomic_write_bytes(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-drdreg-")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode())


# ---------------------------------------------------------------------------
# Dataset container
# ---------------------------------------------------------------------------


def write_dataset(path: str, data: Dataset) -> None:
    """Serialize a dataset (and ground truth, when present) to the container."""
    if not np.all(np.isfinite(data.X)) or not np.all(np.isfinite(data.y)):
        raise FormatError("dataset contains non-finite values")
    shape = " ".join(str(int(s)) for s in _grid_shape(data.grid))
    has_w = int(data.w_true is not None)
    header = (
        f"{MAGIC} {VERSION}\n"
        f"n {data.n}\n"
        f"p {data.p}\n"
        f"shape {shape}\n"
        f"has_y 1\n"
        f"has_w {has_w}\n"
        f"end\n"
    )
    blob = bytearray(header.encode())
    blob += np.ascontiguousarray(data.X, dtype="<f8").tobytes()
    blob += np.ascontiguousarray(data.y, dtype="<f8").tobytes()
    if has_w:
        blob += np.ascontiguousarray(data.w_true, dtype="<f8").tobytes()
    atomic_write_bytes(path, bytes(blob))


def read_dataset(path: str) -> Dataset:
    with open(path, "rb") as handle:
        raw = handle.read()
    try:
        end = raw.index(b"end\n") + 4
    except ValueError:
        raise FormatError("missing header terminator") from None
    lines = raw[:end].decode().splitlines()
    if not lines or not lines[0].startswith(f"{MAGIC} "):
        raise FormatError("bad magic string")
    version = int(lines[0].split()[1])
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    fields = {}
    for line in lines[1:-1]:
        key, _, value = line.partition(" ")
        fields[key] = value
    n = int(fields["n"])
    p = int(fields["p"])
    shape = tuple(int(s) for s in fields["shape"].split())
    has_y = fields["has_y"] == "1"
    has_w = fields["has_w"] == "1"
    if int(np.prod(shape)) != p:
        raise FormatError("declared shape does not match p")

    expected = n * p + (n if has_y else 0) + (p if has_w else 0)
    payload = np.frombuffer(raw[end:], dtype="<f8")
    if payload.size != expected:
        raise FormatError(
            f"payload holds {payload.size} values, expected {expected}"
        )
    if not np.all(np.isfinite(payload)):
        raise FormatError("payload contains non-finite values")
    X = payload[: n * p].reshape(n, p).copy()
    offset = n * p
    y = payload[offset : offset + n].copy() if has_y else np.zeros(n)
    offset += n if has_y else 0
    w = payload[offset : offset + p].copy() if has_w else None
    return Dataset(X=X, y=y, grid=_grid_from_shape(shape), w_true=w)


def _grid_shape(grid: LocationGrid) -> tuple:
    if grid.ndim == 1:
        return (grid.p,)
    raise FormatError("only 1-D grids are serialized")


def _grid_from_shape(shape: tuple) -> LocationGrid:
    if len(shape) != 1:
        raise FormatError("only 1-D grids are supported in the container")
    return LocationGrid.regular_1d(shape[0])


def import_csv_dataset(path: str) -> Dataset:
    """CSV interoperability path: feature columns with the response last."""
    table = np.loadtxt(path, delimiter=",", ndmin=2)
    if table.shape[1] < 2:
        raise FormatError("need at least one feature column plus the response")
    X, y = table[:, :-1], table[:, -1]
    return Dataset(X=X, y=y, grid=LocationGrid.regular_1d(X.shape[1]))


def import_weights_csv(path: str, p: int) -> np.ndarray:
    """Single-column CSV of p reals (external baseline estimates)."""
    w = np.loadtxt(path, delimiter=",", ndmin=1)
    if w.ndim != 1 or w.shape[0] != p:
        raise FormatError(f"expected a single column of {p} reals")
    return np.asarray(w, dtype=float)


# ---------------------------------------------------------------------------
# Result files: key-value plus table sections
# ---------------------------------------------------------------------------


def format_result(header: dict, sections: dict) -> str:
    """Render a result document: header pairs, then '[name]' table sections.

    Floats are rendered with repr so values round-trip exactly.
    """
    lines = ["# drdreg result v1"]
    for key, value in header.items():
        lines.append(f"{key} {_fmt(value)}")
    for name, rows in sections.items():
        lines.append(f"[{name}]")
        for row in rows:
            if isinstance(row, (list, tuple)):
                lines.append(" ".join(_fmt(v) for v in row))
            else:
                lines.append(_fmt(row))
    return "\n".join(lines) + "\n"


def parse_result(text: str) -> tuple[dict, dict]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("# drdreg result"):
        raise FormatError("not a drdreg result document")
    header: dict = {}
    sections: dict = {}
    current = None
    for line in lines[1:]:
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        elif current is None:
            key, _, value = line.partition(" ")
            header[key] = value
        else:
            sections[current].append(line.split())
    return header, sections


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (np.floating,)):
        return repr(float(value))
    return str(value)


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


def parse_config_file(path: str) -> dict:
    """key=value lines; '#' starts a comment; values stay strings."""
    out = {}
    with open(path, "r") as handle:
        for raw in handle:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out
