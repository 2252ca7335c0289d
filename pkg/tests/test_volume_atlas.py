import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from brainroi.volume_atlas import (
    EmptyLabelSpaceError,
    EmptyMaskError,
    GlobalLabelSpace,
    InvalidInputError,
    LabelVolume,
    MembershipMatrix,
    SubjectMask,
    VoxelGrid,
    VoxelIndexList,
    build_global_label_space,
    build_membership_matrix,
    extract_mask_voxels,
    normalize_coords,
    resample_nearest,
)


def naive_membership(vol, voxels, space):
    """Per-voxel, per-column double loop."""
    out = np.zeros((voxels.count, space.size))
    for i, (x, y, z) in enumerate(voxels.coords):
        label = vol.labels[x, y, z]
        for j, t in enumerate(space.label_ids):
            if label == t:
                out[i, j] = 1.0
    return out


def naive_nearest(src, dst_grid):
    out = np.zeros(dst_grid.dims, dtype=np.int64)
    for idx in np.ndindex(*dst_grid.dims):
        pick = []
        for ax in range(3):
            pos = idx[ax] * dst_grid.spacing[ax]
            centres = np.arange(src.grid.dims[ax]) * src.grid.spacing[ax]
            d = np.abs(centres - pos)
            pick.append(int(np.flatnonzero(d <= d.min() + 1e-9)[0]))  # lowest index among ties
        out[idx] = src.labels[tuple(pick)]
    return out


# -- grids / resampling -------------------------------------------------------

def test_degenerate_grid_rejected():
    with pytest.raises(InvalidInputError):
        VoxelGrid((0, 2, 2))
    with pytest.raises(InvalidInputError):
        VoxelGrid((2, 2, 2), (1.0, 0.0, 1.0))


def test_resample_identity():
    grid = VoxelGrid((3, 4, 2), (1.5, 1.0, 2.0))
    vol = LabelVolume(grid, np.random.default_rng(0).integers(0, 5, grid.size))
    out = resample_nearest(vol, grid)
    assert np.array_equal(out.labels, vol.labels)


def test_resample_half_spacing():
    src = LabelVolume(VoxelGrid((2, 1, 1)), np.array([3, 7]))
    out = resample_nearest(src, VoxelGrid((4, 1, 1), (0.5, 1.0, 1.0)))
    assert out.labels.ravel().tolist() == [3, 3, 7, 7]


def test_resample_all_background():
    src = LabelVolume(VoxelGrid((3, 3, 3)), np.zeros(27, dtype=int))
    out = resample_nearest(src, VoxelGrid((5, 2, 4), (0.7, 1.3, 0.4)))
    assert not out.labels.any()


@given(
    st.tuples(*[st.integers(1, 5)] * 3),
    st.tuples(*[st.integers(1, 5)] * 3),
    st.tuples(*[st.sampled_from([0.5, 1.0, 1.5, 2.0])] * 3),
    st.tuples(*[st.sampled_from([0.5, 1.0, 1.25, 3.0])] * 3),
    st.integers(0, 2**31 - 1),
)
def test_resample_matches_bruteforce(src_dims, dst_dims, src_sp, dst_sp, seed):
    src = LabelVolume(VoxelGrid(src_dims, src_sp),
                      np.random.default_rng(seed).integers(0, 6, int(np.prod(src_dims))))
    dst = VoxelGrid(dst_dims, dst_sp)
    out = resample_nearest(src, dst)
    assert np.array_equal(out.labels, naive_nearest(src, dst))
    assert set(np.unique(out.labels)) <= set(np.unique(src.labels))


# -- mask extraction ------------------------------------------------------------

def test_single_voxel_mask():
    grid = VoxelGrid((2, 2, 2))
    member = np.zeros(8, dtype=int)
    member[0] = 1
    v = extract_mask_voxels(SubjectMask(grid, member))
    assert v.coords.tolist() == [[0, 0, 0]] and v.count == 1


def test_full_mask_order():
    v = extract_mask_voxels(SubjectMask(VoxelGrid((2, 2, 1)), np.ones(4, dtype=int)))
    expected = sorted((i, j, k) for i in range(2) for j in range(2) for k in range(1))
    assert [tuple(c) for c in v.coords] == expected


def test_empty_mask():
    with pytest.raises(EmptyMaskError):
        extract_mask_voxels(SubjectMask(VoxelGrid((2, 2, 2)), np.zeros(8, dtype=int)))


@given(st.tuples(*[st.integers(1, 6)] * 3), st.integers(0, 2**31 - 1))
def test_mask_order_is_lexicographic(dims, seed):
    grid = VoxelGrid(dims)
    member = np.random.default_rng(seed).integers(0, 2, grid.size)
    member[seed % grid.size] = 1
    v = extract_mask_voxels(SubjectMask(grid, member))
    # traversal-independent reference: set of coords, sorted as tuples
    ref = sorted(tuple(int(c) for c in idx) for idx in zip(*np.nonzero(member.reshape(dims))))
    assert [tuple(c) for c in v.coords] == ref
    assert v.count == member.sum()
    v.validate(grid)


def test_validate_rejects_unsorted():
    with pytest.raises(InvalidInputError):
        VoxelIndexList(np.array([[0, 1, 0], [0, 0, 1]])).validate()


# -- label space ------------------------------------------------------------------

def test_label_space_union():
    assert build_global_label_space("a", [{1, 3}, {3, 5}]).label_ids == (1, 3, 5)
    assert build_global_label_space("a", [{2}]).label_ids == (2,)


def test_label_space_background_only():
    with pytest.raises(EmptyLabelSpaceError):
        build_global_label_space("a", [{0}])


@given(st.lists(st.sets(st.integers(0, 30)), min_size=1, max_size=5), st.randoms())
def test_label_space_order_free(sets, rnd):
    if not set().union(*sets) - {0}:
        return
    shuffled = list(sets)
    rnd.shuffle(shuffled)
    a = build_global_label_space("x", sets)
    assert a == build_global_label_space("x", shuffled)
    assert list(a.label_ids) == sorted(set().union(*sets) - {0})


# -- membership ---------------------------------------------------------------------

def test_membership_example():
    vol = LabelVolume(VoxelGrid((3, 1, 1)), np.array([3, 0, 5]))
    voxels = VoxelIndexList(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]]))
    m = build_membership_matrix(vol, voxels, GlobalLabelSpace("a", (3, 5)))
    assert m.to_dense().tolist() == [[1, 0], [0, 0], [0, 1]]
    assert m.col_index.tolist() == [0, -1, 1]


def test_membership_unknown_label_is_zero_row():
    vol = LabelVolume(VoxelGrid((2, 1, 1)), np.array([9, 3]))
    voxels = VoxelIndexList(np.array([[0, 0, 0], [1, 0, 0]]))
    m = build_membership_matrix(vol, voxels, GlobalLabelSpace("a", (3, 5)))
    assert m.to_dense().tolist() == [[0, 0], [1, 0]]


def test_membership_all_background():
    grid = VoxelGrid((2, 2, 2))
    vol = LabelVolume(grid, np.zeros(8, dtype=int))
    v = extract_mask_voxels(SubjectMask(grid, np.ones(8, dtype=int)))
    assert not build_membership_matrix(vol, v, GlobalLabelSpace("a", (1, 2))).to_dense().any()


def test_membership_out_of_bounds():
    vol = LabelVolume(VoxelGrid((2, 1, 1)), np.array([1, 2]))
    with pytest.raises(InvalidInputError):
        build_membership_matrix(vol, VoxelIndexList(np.array([[2, 0, 0]])), GlobalLabelSpace("a", (1,)))


@given(st.integers(0, 2**31 - 1))
def test_membership_matches_naive(seed):
    rng = np.random.default_rng(seed)
    grid = VoxelGrid(tuple(rng.integers(1, 9, 3)))
    vol = LabelVolume(grid, rng.integers(0, rng.integers(1, 20), grid.size))
    member = rng.integers(0, 2, grid.size)
    member[0] = 1
    voxels = extract_mask_voxels(SubjectMask(grid, member))
    labels = vol.label_set() | {int(rng.integers(1, 25))}
    space = build_global_label_space("a", [labels])
    m = build_membership_matrix(vol, voxels, space)
    dense = m.to_dense()
    assert np.array_equal(dense, naive_membership(vol, voxels, space))
    assert set(dense.sum(axis=1)) <= {0.0, 1.0}


def test_column_space_shared_across_subjects():
    rng = np.random.default_rng(3)
    grid = VoxelGrid((5, 5, 5))
    atlas = LabelVolume(grid, rng.integers(0, 7, grid.size))
    masks = [SubjectMask(grid, (rng.random(grid.size) < p).astype(int)) for p in (0.2, 0.6)]
    space = build_global_label_space("a", [atlas.label_set(m) for m in masks])
    mats = [build_membership_matrix(atlas, extract_mask_voxels(m), space) for m in masks]
    assert mats[0].n_cols == mats[1].n_cols == space.size
    assert mats[0].label_ids == mats[1].label_ids == space.label_ids


def test_membership_rejects_bad_column():
    with pytest.raises(InvalidInputError):
        MembershipMatrix(np.array([0, 3]), 3)


# -- coordinate normalisation -----------------------------------------------------------

def test_normalize_coords_examples():
    v = VoxelIndexList(np.array([[0, 0, 1], [1, 0, 1], [2, 0, 1]]))
    out = normalize_coords(v, VoxelGrid((3, 1, 4)))
    assert out[:, 0].tolist() == [-1.0, 0.0, 1.0]
    assert out[:, 1].tolist() == [0.0, 0.0, 0.0]
    assert out[0, 2] == pytest.approx(2 * 1 / 3 - 1)  # dim 4, index 1 -> -1/3


def test_normalize_coords_empty():
    with pytest.raises(InvalidInputError):
        normalize_coords(VoxelIndexList(np.zeros((0, 3))), VoxelGrid((2, 2, 2)))
