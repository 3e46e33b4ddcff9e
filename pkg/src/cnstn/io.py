"""Versioned CSV tables, checkpoints and content hashes."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

CHECKPOINT_SCHEMA = "checkpoint/1.0"


class SchemaError(ValueError):
    pass


def check_schema_line(line: str, expected: str) -> None:
    """Accept ``# schema: name/MAJOR.minor`` when name and major version match."""
    prefix = "# schema:"
    if not line.startswith(prefix):
        raise SchemaError(f"missing schema line, got {line[:40]!r}")
    found = line[len(prefix):].strip()
    name, _, version = found.partition("/")
    exp_name, _, exp_version = expected.partition("/")
    if name != exp_name:
        raise SchemaError(f"schema {name!r} where {exp_name!r} was expected")
    if version.split(".")[0] != exp_version.split(".")[0]:
        raise SchemaError(f"unsupported major version {version!r} for {name}")


def write_table(path: str | Path, schema: str, columns: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {schema}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def read_table(path: str | Path, schema: str) -> tuple[list[str], np.ndarray]:
    lines = Path(path).read_text().splitlines()
    check_schema_line(lines[0], schema)
    rows = list(csv.reader(lines[1:]))
    return rows[0], np.array([[float(x) for x in r] for r in rows[1:]])


def blob_hash(data: bytes) -> str:
    """Git-style object id: sha1 of ``blob <len>\\0`` + data."""
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# -- checkpoints ----------------------------------------------------------------
#
# <name>.json holds the header; <name>.bin holds little-endian float64 arrays in
# the order listed under "arrays".  Each complex cube is stored in full (all
# wavevectors, fft ordering, row-major) with real and imaginary parts
# interleaved.


def write_checkpoint(stem: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    stem = Path(stem)
    layout = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if np.iscomplexobj(arr):
            flat = np.ascontiguousarray(arr, dtype="<c16").view("<f8")
            kind = "complex"
        else:
            flat = np.ascontiguousarray(arr, dtype="<f8").ravel()
            kind = "real"
        layout.append({"name": name, "shape": list(arr.shape), "kind": kind,
                       "offset": offset, "count": int(flat.size)})
        offset += flat.size
        chunks.append(flat.ravel())
    blob = np.concatenate(chunks).astype("<f8").tobytes() if chunks else b""
    full = dict(header, schema=CHECKPOINT_SCHEMA, arrays=layout, data_file=stem.name + ".bin",
                data_hash=blob_hash(blob))
    stem.with_suffix(".bin").write_bytes(blob)
    stem.with_suffix(".json").write_text(json.dumps(full, indent=2, sort_keys=True))


def read_checkpoint(stem: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    stem = Path(stem)
    header = json.loads(stem.with_suffix(".json").read_text())
    check_schema_line(f"# schema: {header.get('schema', '')}", CHECKPOINT_SCHEMA)
    blob = stem.with_suffix(".bin").read_bytes()
    if blob_hash(blob) != header["data_hash"]:
        raise SchemaError("checkpoint data does not match its header hash")
    data = np.frombuffer(blob, dtype="<f8")
    arrays = {}
    for entry in header["arrays"]:
        flat = data[entry["offset"]: entry["offset"] + entry["count"]]
        if entry["kind"] == "complex":
            arrays[entry["name"]] = flat.view("<c16").reshape(entry["shape"]).copy()
        else:
            arrays[entry["name"]] = flat.reshape(entry["shape"]).copy()
    return header, arrays
