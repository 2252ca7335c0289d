"""Binary artifact formats: a one-line JSON header, a newline, then a raw
little-endian payload.

    gridvol1  label volumes and masks (i32 or u8, row-major)
    memb1     membership matrices (i32 column index per row, -1 = empty row)
    vidx1     in-mask voxel coordinates (i32 triples)
    ckpt1     named float64 tensors plus a free-form manifest
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from .volume_atlas import LabelVolume, MembershipMatrix, SubjectMask, VoxelGrid, VoxelIndexList

_DTYPES = {"i32": np.dtype("<i4"), "u8": np.dtype("u1")}


class FormatError(ValueError):
    pass


def _dump(header: dict, payload: bytes) -> bytes:
    line = json.dumps(header, sort_keys=True, separators=(",", ":"))
    return line.encode("utf-8") + b"\n" + payload


def _split(data: bytes, magic: str) -> tuple[dict, bytes]:
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError("missing header line")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad header: {exc}") from None
    if header.get("magic") != magic:
        raise FormatError(f"expected magic {magic!r}, got {header.get('magic')!r}")
    return header, data[nl + 1:]


def _write(path, data: bytes) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)


# -- grid volumes -----------------------------------------------------------

def gridvol_bytes(values: np.ndarray, grid: VoxelGrid, dtype: str = "i32", **extra) -> bytes:
    if dtype not in _DTYPES:
        raise FormatError(f"unsupported dtype {dtype!r}")
    header = {"magic": "gridvol1", "dims": list(grid.dims), "spacing": list(grid.spacing), "dtype": dtype, **extra}
    arr = np.ascontiguousarray(np.asarray(values).reshape(grid.dims), dtype=_DTYPES[dtype])
    return _dump(header, arr.tobytes(order="C"))


def parse_gridvol(data: bytes) -> tuple[VoxelGrid, np.ndarray, dict]:
    header, payload = _split(data, "gridvol1")
    try:
        grid = VoxelGrid(tuple(header["dims"]), tuple(header.get("spacing", (1.0, 1.0, 1.0))))
        dt = _DTYPES[header["dtype"]]
    except KeyError as exc:
        raise FormatError(f"gridvol header missing/unsupported {exc}") from None
    if len(payload) != grid.size * dt.itemsize:
        raise FormatError(f"payload is {len(payload)} bytes, expected {grid.size * dt.itemsize}")
    values = np.frombuffer(payload, dtype=dt).reshape(grid.dims).astype(np.int64)
    return grid, values, header


def save_label_volume(path, vol: LabelVolume, dtype: str = "i32", **extra) -> None:
    _write(path, gridvol_bytes(vol.labels, vol.grid, dtype, **extra))


def load_label_volume(path) -> LabelVolume:
    grid, values, _ = parse_gridvol(Path(path).read_bytes())
    return LabelVolume(grid, values)


def save_mask(path, mask: SubjectMask, **extra) -> None:
    _write(path, gridvol_bytes(mask.member.astype(np.uint8), mask.grid, "u8", **extra))


def load_mask(path) -> SubjectMask:
    grid, values, _ = parse_gridvol(Path(path).read_bytes())
    return SubjectMask(grid, values)


# -- membership / voxel index -----------------------------------------------

def membership_bytes(m: MembershipMatrix, **extra) -> bytes:
    header = {"magic": "memb1", "rows": m.n_rows, "cols": m.n_cols, "atlas_id": m.atlas_id,
              "label_ids": list(m.label_ids), **extra}
    return _dump(header, m.col_index.astype("<i4").tobytes())


def parse_membership(data: bytes) -> MembershipMatrix:
    header, payload = _split(data, "memb1")
    rows = int(header["rows"])
    if len(payload) != 4 * rows:
        raise FormatError(f"membership payload is {len(payload)} bytes, expected {4 * rows}")
    idx = np.frombuffer(payload, dtype="<i4").astype(np.int32)
    return MembershipMatrix(idx, int(header["cols"]), header.get("atlas_id", ""), tuple(header.get("label_ids", ())))


def voxel_index_bytes(v: VoxelIndexList, **extra) -> bytes:
    header = {"magic": "vidx1", "count": v.count, **extra}
    return _dump(header, v.coords.astype("<i4").tobytes(order="C"))


def parse_voxel_index(data: bytes) -> VoxelIndexList:
    header, payload = _split(data, "vidx1")
    count = int(header["count"])
    if len(payload) != 12 * count:
        raise FormatError(f"voxel index payload is {len(payload)} bytes, expected {12 * count}")
    return VoxelIndexList(np.frombuffer(payload, dtype="<i4").reshape(count, 3))


def save_membership(path, m: MembershipMatrix, **extra) -> None:
    _write(path, membership_bytes(m, **extra))


def load_membership(path) -> MembershipMatrix:
    return parse_membership(Path(path).read_bytes())


def save_voxel_index(path, v: VoxelIndexList, **extra) -> None:
    _write(path, voxel_index_bytes(v, **extra))


def load_voxel_index(path) -> VoxelIndexList:
    return parse_voxel_index(Path(path).read_bytes())


# -- parameter checkpoints ----------------------------------------------------

def checkpoint_bytes(tensors: dict[str, np.ndarray], manifest: dict[str, Any]) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {"magic": "ckpt1", "tensors": entries, **manifest}
    return _dump(header, b"".join(chunks))


def parse_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    header, payload = _split(data, "ckpt1")
    tensors = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        start = e["offset"]
        if start + 8 * n > len(payload):
            raise FormatError(f"tensor {e['name']} runs past end of payload")
        tensors[e["name"]] = np.frombuffer(payload[start:start + 8 * n], dtype="<f8").reshape(e["shape"]).copy()
    return tensors, header


def save_checkpoint(path, tensors: dict[str, np.ndarray], manifest: dict[str, Any]) -> None:
    _write(path, checkpoint_bytes(tensors, manifest))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return parse_checkpoint(Path(path).read_bytes())
