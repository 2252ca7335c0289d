"""ROI membership matrices that are comparable across subjects.

Label volumes from any number of atlases are brought onto a subject's
reference grid by nearest-neighbour resampling, in-mask voxels are listed
in a fixed lexicographic order, and every atlas gets one global, sorted
label space shared by all subjects. A membership matrix is then one-hot
per voxel over that global column order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class InvalidInputError(ValueError):
    pass


class EmptyMaskError(ValueError):
    pass


class EmptyLabelSpaceError(ValueError):
    pass


@dataclass(frozen=True)
class VoxelGrid:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or len(spacing) != 3:
            raise InvalidInputError(f"grid needs 3 dims and 3 spacings, got {self.dims}, {self.spacing}")
        if any(d < 1 for d in dims):
            raise InvalidInputError(f"degenerate grid dims {dims}")
        if any(not s > 0 for s in spacing):
            raise InvalidInputError(f"non-positive spacing {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def size(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz


@dataclass(frozen=True)
class LabelVolume:
    grid: VoxelGrid
    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.size != self.grid.size:
            raise InvalidInputError(f"{labels.size} labels for grid of {self.grid.size} voxels")
        if not np.issubdtype(labels.dtype, np.integer):
            raise InvalidInputError(f"labels must be integers, got {labels.dtype}")
        if labels.size and labels.min() < 0:
            raise InvalidInputError("negative label")
        object.__setattr__(self, "labels", labels.reshape(self.grid.dims))

    def label_set(self, mask: "SubjectMask | None" = None) -> set[int]:
        """Non-zero labels present (inside ``mask`` when given)."""
        values = self.labels if mask is None else self.labels[mask.member]
        return {int(v) for v in np.unique(values) if v != 0}


@dataclass(frozen=True)
class SubjectMask:
    grid: VoxelGrid
    member: np.ndarray = field(repr=False)

    def __post_init__(self):
        member = np.asarray(self.member)
        if member.size != self.grid.size:
            raise InvalidInputError(f"{member.size} mask values for grid of {self.grid.size} voxels")
        if not np.isin(member, (0, 1)).all():
            raise InvalidInputError("mask values must be 0 or 1")
        object.__setattr__(self, "member", member.reshape(self.grid.dims).astype(bool))


@dataclass(frozen=True)
class VoxelIndexList:
    coords: np.ndarray = field(repr=False)  # (N_s, 3) int

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "coords", coords)

    @property
    def count(self) -> int:
        return len(self.coords)

    def validate(self, grid: VoxelGrid | None = None) -> None:
        c = self.coords
        if len(c) > 1:
            diff = c[1:] - c[:-1]
            # lexicographic strict increase: first non-zero component positive
            first = np.argmax(diff != 0, axis=1)
            lead = diff[np.arange(len(diff)), first]
            if not (lead > 0).all():
                raise InvalidInputError("voxel coords not strictly increasing in (i, j, k) order")
        if grid is not None and len(c):
            if c.min() < 0 or (c >= np.asarray(grid.dims)).any():
                raise InvalidInputError("voxel coord outside grid")


@dataclass(frozen=True)
class GlobalLabelSpace:
    atlas_id: str
    label_ids: tuple[int, ...]

    def __post_init__(self):
        ids = tuple(int(t) for t in self.label_ids)
        if list(ids) != sorted(set(ids)) or any(t <= 0 for t in ids):
            raise InvalidInputError(f"label ids must be sorted, distinct and positive: {ids}")
        object.__setattr__(self, "label_ids", ids)

    @property
    def size(self) -> int:
        return len(self.label_ids)


@dataclass(frozen=True)
class MembershipMatrix:
    """One-hot rows stored as a column index per row, -1 for an all-zero row."""

    col_index: np.ndarray = field(repr=False)
    n_cols: int
    atlas_id: str = ""
    label_ids: tuple[int, ...] = ()

    def __post_init__(self):
        idx = np.asarray(self.col_index, dtype=np.int32).reshape(-1)
        if idx.size and (idx.min() < -1 or idx.max() >= self.n_cols):
            raise InvalidInputError("column index out of range")
        object.__setattr__(self, "col_index", idx)

    @property
    def n_rows(self) -> int:
        return len(self.col_index)

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_rows, self.n_cols

    def to_dense(self, dtype=np.float64) -> np.ndarray:
        out = np.zeros(self.shape, dtype=dtype)
        rows = np.nonzero(self.col_index >= 0)[0]
        out[rows, self.col_index[rows]] = 1
        return out

    def permuted(self, order: np.ndarray) -> "MembershipMatrix":
        return MembershipMatrix(self.col_index[order], self.n_cols, self.atlas_id, self.label_ids)


def _nearest_index(pos: np.ndarray, spacing: float, n: int) -> np.ndarray:
    # round-half-down; 1e-9 absorbs float error so exact ties stay on the lower index
    x = pos / spacing
    return np.clip(np.ceil(x - 0.5 - 1e-9), 0, n - 1).astype(np.int64)


def resample_nearest(src: LabelVolume, dst_grid: VoxelGrid) -> LabelVolume:
    """Nearest-neighbour resampling of ``src`` onto ``dst_grid``.

    Voxel centres sit at ``index * spacing`` on both grids; ties go to the
    lower source index on each axis.
    """
    axes = []
    for n_dst, s_dst, n_src, s_src in zip(dst_grid.dims, dst_grid.spacing, src.grid.dims, src.grid.spacing):
        axes.append(_nearest_index(np.arange(n_dst) * s_dst, s_src, n_src))
    ix, iy, iz = np.ix_(*axes)
    return LabelVolume(dst_grid, src.labels[ix, iy, iz].copy())


def extract_mask_voxels(mask: SubjectMask) -> VoxelIndexList:
    coords = np.argwhere(mask.member)  # C order == lexicographic (i, j, k)
    if len(coords) == 0:
        raise EmptyMaskError("subject mask has no voxels set")
    return VoxelIndexList(coords)


def build_global_label_space(atlas_id: str, per_subject_label_sets: Sequence[Iterable[int]]) -> GlobalLabelSpace:
    if len(per_subject_label_sets) == 0:
        raise InvalidInputError("need at least one subject label set")
    union: set[int] = set()
    for labels in per_subject_label_sets:
        union.update(int(t) for t in labels)
    union.discard(0)
    if not union:
        raise EmptyLabelSpaceError(f"atlas {atlas_id!r}: no non-zero labels in any subject")
    return GlobalLabelSpace(atlas_id, tuple(sorted(union)))


def build_membership_matrix(vol: LabelVolume, voxels: VoxelIndexList, space: GlobalLabelSpace) -> MembershipMatrix:
    c = voxels.coords
    if len(c) and (c.min() < 0 or (c >= np.asarray(vol.grid.dims)).any()):
        raise InvalidInputError("voxel coordinate outside label volume")
    labels = vol.labels[c[:, 0], c[:, 1], c[:, 2]]
    ids = np.asarray(space.label_ids, dtype=np.int64)
    pos = np.searchsorted(ids, labels)
    pos_clipped = np.minimum(pos, len(ids) - 1)
    hit = (pos < len(ids)) & (ids[pos_clipped] == labels)
    col = np.where(hit, pos_clipped, -1)
    return MembershipMatrix(col, space.size, space.atlas_id, space.label_ids)


def normalize_coords(voxels: VoxelIndexList, grid: VoxelGrid) -> np.ndarray:
    """Map voxel indices affinely onto [-1, 1] per axis (0 for a length-1 axis)."""
    if voxels.count == 0:
        raise InvalidInputError("no voxels to normalize")
    dims = np.asarray(grid.dims, dtype=np.float64)
    denom = np.where(dims > 1, dims - 1, 1.0)
    out = 2.0 * voxels.coords / denom - 1.0
    out[:, dims == 1] = 0.0
    return out
