from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import flood_fill_areas
from ddnkit.objsize import (
    EmptyDatasetError,
    MaskImage,
    binarize,
    connected_components,
    estimate_obj,
    label_components,
    object_sizes,
)


def square_mask(size, side, at=(0, 0), label=1):
    m = np.zeros((size, size), dtype=np.uint8)
    m[at[0] : at[0] + side, at[1] : at[1] + side] = label
    return MaskImage(m)


# ---------------------------------------------------------------- binarize


def test_binarize_background_is_zero():
    assert not binarize(MaskImage(np.zeros((4, 4), dtype=int))).any()


def test_binarize_merges_classes():
    labels = np.array([[0, 1], [2, 0]])
    np.testing.assert_array_equal(binarize(MaskImage(labels)), [[0, 1], [1, 0]])


def test_binarize_keeps_binary_mask():
    m = np.array([[1, 0], [0, 1]], dtype=np.uint8)
    np.testing.assert_array_equal(binarize(m), m)


def test_mask_validation():
    with pytest.raises(ValueError):
        MaskImage(np.zeros(4))
    with pytest.raises(ValueError):
        MaskImage(np.array([[0, 3]]), num_classes=3)
    with pytest.raises(ValueError):
        MaskImage(np.array([[0, -1]]))


# -------------------------------------------------------------- components


def test_filled_square_is_one_component():
    comps = connected_components(binarize(square_mask(20, 16, (2, 3))))
    assert len(comps) == 1
    assert comps[0].area == 256
    assert comps[0].bbox == (2, 3, 17, 18)


@pytest.mark.parametrize("connectivity,count", [(8, 1), (4, 2)])
def test_diagonal_pixels(connectivity, count):
    assert len(connected_components(np.eye(2), connectivity)) == count


def test_u_shape_merges_labels():
    # two arms meet only on the last row, forcing a union during the first pass
    m = np.zeros((5, 5), dtype=int)
    m[:, 0] = m[:, 4] = m[4, :] = 1
    labels, count = label_components(m, 4)
    assert count == 1 and set(np.unique(labels)) == {0, 1}


def test_components_follow_scan_order():
    m = np.zeros((6, 6), dtype=int)
    m[0, 4] = m[0, 5] = 1      # first in scan order
    m[2:5, 0:3] = 1
    comps = connected_components(m)
    assert [c.area for c in comps] == [2, 9]
    assert [c.first_pixel for c in comps] == [(0, 4), (2, 0)]


def test_bad_connectivity():
    with pytest.raises(ValueError):
        label_components(np.zeros((2, 2)), 6)


@pytest.mark.parametrize("density", [0.2, 0.45, 0.6])
@pytest.mark.parametrize("connectivity", [4, 8])
def test_matches_flood_fill_on_noise(density, connectivity):
    rng = np.random.default_rng(int(density * 100) + connectivity)
    for _ in range(5):
        m = (rng.random((64, 64)) < density).astype(np.uint8)
        assert [c.area for c in connected_components(m, connectivity)] == flood_fill_areas(m, connectivity)


@settings(max_examples=60, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 1)))
def test_property_flood_fill_and_area_conservation(m):
    for conn in (4, 8):
        comps = connected_components(m, conn)
        assert [c.area for c in comps] == flood_fill_areas(m, conn)
        assert sum(c.area for c in comps) == int(m.sum())
    assert len(connected_components(m, 8)) <= len(connected_components(m, 4))


# ---------------------------------------------------------------- estimate


def test_single_square_obj():
    assert estimate_obj([square_mask(32, 16, (4, 4))]).obj == 16.0


def test_two_squares_obj():
    m = np.zeros((20, 20), dtype=np.uint8)
    m[1:4, 1:4] = 1
    m[10:15, 10:15] = 2
    assert estimate_obj([MaskImage(m)]).obj == 4.0


def test_obj_is_mean_over_images_of_means():
    a = np.zeros((20, 20), dtype=np.uint8)
    a[0:2, 0:2] = a[5:9, 5:9] = 1          # sizes 2, 4 -> 3
    b = square_mask(20, 6).labels          # 6
    est = estimate_obj([MaskImage(a), MaskImage(b)])
    assert est.obj == pytest.approx(4.5)
    assert est.per_image_means == [3.0, 6.0]
    assert est.num_objects == 3


def test_empty_images_are_excluded():
    est = estimate_obj([square_mask(10, 0), square_mask(10, 4)])
    assert est.obj == 4.0 and est.num_images == 1 and est.skipped_images == 1
    assert "Obj=4.00" in est.summary()


def test_min_area_filters_specks():
    m = square_mask(16, 5).labels.copy()
    m[12, 12] = 1
    assert object_sizes(MaskImage(m)) == [5.0]
    assert sorted(object_sizes(MaskImage(m), min_area=1)) == [1.0, 5.0]


def test_empty_dataset_error():
    with pytest.raises(EmptyDatasetError, match="empty dataset"):
        estimate_obj([square_mask(8, 1)])
    with pytest.raises(EmptyDatasetError):
        estimate_obj([])


def test_permutation_invariance(rng):
    masks = [MaskImage((rng.random((32, 32)) < 0.3).astype(np.uint8)) for _ in range(6)]
    a = estimate_obj(masks).obj
    b = estimate_obj(masks[::-1]).obj
    assert a == pytest.approx(b, rel=1e-15)


@pytest.mark.parametrize("s", [2, 3])
def test_scale_equivariance(rng, s):
    masks = [MaskImage((rng.random((24, 24)) < 0.35).astype(np.uint8)) for _ in range(4)]
    up = [MaskImage(np.kron(m.labels, np.ones((s, s), dtype=np.uint8))) for m in masks]
    # min_area scales with the area so the same components qualify
    a = estimate_obj(masks, min_area=4)
    b = estimate_obj(up, min_area=4 * s * s)
    assert b.obj == pytest.approx(s * a.obj, rel=1e-12)
    assert Counter(np.round(np.array([sz for m in up for sz in object_sizes(m, 8, 4 * s * s)]), 9)) == Counter(
        np.round(np.array([s * sz for m in masks for sz in object_sizes(m, 8, 4)]), 9)
    )
