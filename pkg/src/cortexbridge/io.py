"""Readers and writers for the on-disk artifact formats.

All binary formats are little-endian and start with an ASCII magic string.

========  ==================================================================
format    layout
========  ==================================================================
BMESH 1   text; ``v x y z label`` lines then ``f i j k`` lines (0-based).
          Floats use the shortest round-trip repr, so files are bit exact.
          An empty label is written as ``-``.
BSIG1     u32 V, u32 T, f64 tr_seconds, V*T f64 (row-major)
BUV1      u32 V, V*2 f64 uv, u32 F, F*2 f64 (Re mu, Im mu), f64 energy
BDSK1     u32 H, u32 W, u32 T, f64 offset, f64 scale, H*W u8 mask,
          T*H*W f32 grids
BSTM1     u32 T, u32 G, f64 extent_deg, f64 tr_seconds, T*G*G f32 frames
BGEN1     u32 n, n bytes of UTF-8 JSON (model config), u32 P, P f32 params
========  ==================================================================

Every open goes through :func:`open_file`, which reports the path to any
active :func:`record_access` context. The pipeline uses this to prove that
a stage never touches files it should not see.
"""
from __future__ import annotations

import csv
import hashlib
import json
import struct
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .errors import FormatError

_RECORDERS: list["AccessRecorder"] = []


class AccessRecorder:
    """Collects ``(resolved path, mode)`` pairs for every file opened."""

    def __init__(self):
        self.events: list[tuple[str, str]] = []

    @property
    def paths(self) -> list[str]:
        return sorted({p for p, _ in self.events})

    def read_paths(self) -> list[str]:
        return sorted({p for p, m in self.events if "r" in m})


@contextmanager
def record_access():
    rec = AccessRecorder()
    _RECORDERS.append(rec)
    try:
        yield rec
    finally:
        _RECORDERS.remove(rec)


def open_file(path, mode="rb", **kwargs):
    path = Path(path)
    for rec in _RECORDERS:
        rec.events.append((str(path.resolve()), mode))
    return open(path, mode, **kwargs)


def sha256(path) -> str:
    h = hashlib.sha256()
    with open_file(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# small binary helpers


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def magic(self, magic: bytes):
        if self.take(len(magic)) != magic:
            raise FormatError(f"{self.what}: bad magic, expected {magic!r}")

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).astype(np.dtype(dtype).newbyteorder("="))

    def finish(self):
        if self.pos != len(self.data):
            raise FormatError(f"{self.what}: {len(self.data) - self.pos} trailing bytes")


def _le(a, dtype) -> bytes:
    return np.ascontiguousarray(a, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()


def _read_bytes(path) -> bytes:
    with open_file(path, "rb") as fh:
        return fh.read()


def _write_bytes(path, parts):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open_file(path, "wb") as fh:
        for p in parts:
            fh.write(p)


# ---------------------------------------------------------------------------
# meshes and signals


def write_mesh(path, mesh):
    lines = ["BMESH 1"]
    for (x, y, z), lab in zip(mesh.vertices.tolist(), mesh.labels.tolist()):
        lab = str(lab) if lab not in (None, "") else "-"
        if any(ch.isspace() for ch in lab):
            raise FormatError(f"label {lab!r} contains whitespace")
        lines.append(f"v {x!r} {y!r} {z!r} {lab}")
    for i, j, k in mesh.faces.tolist():
        lines.append(f"f {i} {j} {k}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open_file(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path):
    from .mesh import SurfaceMesh

    with open_file(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "BMESH 1":
        raise FormatError(f"{path}: missing 'BMESH 1' header")
    verts, labels, faces = [], [], []
    for n, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v" and len(parts) == 5:
            verts.append([float(p) for p in parts[1:4]])
            labels.append("" if parts[4] == "-" else parts[4])
        elif parts[0] == "f" and len(parts) == 4:
            faces.append([int(p) for p in parts[1:]])
        else:
            raise FormatError(f"{path}:{n}: cannot parse {line!r}")
    return SurfaceMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3), labels)


def write_signals(path, series):
    v = series.values
    _write_bytes(path, [b"BSIG1", struct.pack("<IId", v.shape[0], v.shape[1], series.tr_seconds), _le(v, np.float64)])


def read_signals(path):
    from .mesh import SignalSeries

    r = _Reader(_read_bytes(path), str(path))
    r.magic(b"BSIG1")
    nv, nt = r.u32(), r.u32()
    tr = r.f64()
    values = r.array(np.float64, nv * nt).reshape(nv, nt)
    r.finish()
    return SignalSeries(values, tr)


# ---------------------------------------------------------------------------
# parameterizations


def write_param(path, param):
    uv = np.asarray(param.uv)
    mu = np.asarray(param.mu)
    _write_bytes(
        path,
        [
            b"BUV1",
            struct.pack("<I", len(uv)),
            _le(uv, np.float64),
            struct.pack("<I", len(mu)),
            _le(np.column_stack([mu.real, mu.imag]), np.float64),
            struct.pack("<d", float(param.energy)),
        ],
    )


def read_param(path):
    from .conformal import DiskParameterization

    r = _Reader(_read_bytes(path), str(path))
    r.magic(b"BUV1")
    nv = r.u32()
    uv = r.array(np.float64, 2 * nv).reshape(nv, 2)
    nf = r.u32()
    m = r.array(np.float64, 2 * nf).reshape(nf, 2)
    energy = r.f64()
    r.finish()
    return DiskParameterization(uv, m[:, 0] + 1j * m[:, 1], energy)


# ---------------------------------------------------------------------------
# disk series


def write_disks(path, series):
    g = np.asarray(series.grids)
    t, h, w = g.shape
    _write_bytes(
        path,
        [
            b"BDSK1",
            struct.pack("<IIIdd", h, w, t, series.norm.offset, series.norm.scale),
            np.ascontiguousarray(series.mask, dtype=np.uint8).tobytes(),
            _le(g, np.float32),
        ],
    )


def read_disks(path):
    from .braindisk import DiskSeries, Normalization

    r = _Reader(_read_bytes(path), str(path))
    r.magic(b"BDSK1")
    h, w, t = r.u32(), r.u32(), r.u32()
    offset, scale = r.f64(), r.f64()
    mask = r.array(np.uint8, h * w).reshape(h, w)
    if np.any(mask > 1):
        raise FormatError(f"{path}: mask bytes must be 0 or 1")
    grids = r.array(np.float32, t * h * w).reshape(t, h, w)
    r.finish()
    return DiskSeries(grids, mask.astype(bool), Normalization(offset, scale))


# ---------------------------------------------------------------------------
# stimulus


def write_stimulus(path, stim):
    f = np.asarray(stim.frames)
    t, g, _ = f.shape
    _write_bytes(path, [b"BSTM1", struct.pack("<IIdd", t, g, stim.extent_deg, stim.tr_seconds), _le(f, np.float32)])


def read_stimulus(path):
    from .prf import StimulusMovie

    r = _Reader(_read_bytes(path), str(path))
    r.magic(b"BSTM1")
    t, g = r.u32(), r.u32()
    extent, tr = r.f64(), r.f64()
    frames = r.array(np.float32, t * g * g).reshape(t, g, g)
    r.finish()
    return StimulusMovie(frames, extent, tr)


# ---------------------------------------------------------------------------
# model checkpoints


def write_checkpoint(path, config: dict, params: np.ndarray):
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    p = np.asarray(params, dtype=np.float32).ravel()
    _write_bytes(path, [b"BGEN1", struct.pack("<I", len(blob)), blob, struct.pack("<I", p.size), _le(p, np.float32)])


def read_checkpoint(path) -> tuple[dict, np.ndarray]:
    r = _Reader(_read_bytes(path), str(path))
    r.magic(b"BGEN1")
    n = r.u32()
    try:
        config = json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: config block is not JSON") from exc
    p = r.array(np.float32, r.u32())
    r.finish()
    return config, p


# ---------------------------------------------------------------------------
# text tables


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open_file(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open_file(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open_file(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open_file(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def write_prf_csv(path, indices, params):
    rows = [(int(i), p.v1_deg, p.v2_deg, p.sigma_deg, p.beta, p.r2_percent) for i, p in zip(indices, params)]
    write_csv(path, ["index", "v1", "v2", "sigma", "beta", "r2"], rows)


def read_prf_csv(path):
    from .prf import PrfParams

    header, rows = read_csv(path)
    if header != ["index", "v1", "v2", "sigma", "beta", "r2"]:
        raise FormatError(f"{path}: unexpected pRF header {header}")
    idx = np.array([int(r[0]) for r in rows], dtype=np.int64)
    params = [PrfParams(*(float(x) for x in r[1:])) for r in rows]
    return idx, params
