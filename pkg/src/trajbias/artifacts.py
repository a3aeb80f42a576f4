"""Reproducible on-disk artifacts: fixed-timestamp npz, digests, atomic writes."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)


class MissingArtifactError(FileNotFoundError):
    def __init__(self, stage, path, hint=""):
        self.stage = stage
        self.path = Path(path)
        msg = f"stage '{stage}' needs {self.path}, which does not exist"
        super().__init__(msg + (f" (run '{hint}' first)" if hint else ""))


def save_npz(path, **arrays):
    """Like ``np.savez`` but byte-identical for identical arrays (no wall-clock in the zip)."""
    path = Path(path)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
            data = io.BytesIO()
            np.lib.format.write_array(data, np.asanyarray(arrays[name]), allow_pickle=False)
            zf.writestr(info, data.getvalue())
    atomic_write_bytes(path, buf.getvalue())


def json_bytes(obj):
    return (json.dumps(obj, sort_keys=True, indent=1) + "\n").encode()


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write_bytes(path, json_bytes(obj))


def read_json(path):
    return json.loads(Path(path).read_text())


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def digest_of(obj):
    """sha256 of the canonical JSON form of ``obj``."""
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_csv(path, rows, header_lines=(), fieldnames=None):
    """CSV with ``# key=value`` comment lines before the column header."""
    out = io.StringIO()
    for line in header_lines:
        out.write(f"# {line}\n")
    fieldnames = fieldnames or (list(rows[0]) if rows else [])
    w = csv.DictWriter(out, fieldnames=fieldnames, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _cell(v) for k, v in r.items()})
    atomic_write_bytes(path, out.getvalue().encode())


def read_csv(path):
    """Rows (as dicts of strings) and the ``# key=value`` header entries."""
    header, body = {}, []
    with open(path) as fh:
        for line in fh:
            if line.startswith("# "):
                k, _, v = line[2:].rstrip("\n").partition("=")
                header[k] = v
            else:
                body.append(line)
    return list(csv.DictReader(body)), header
