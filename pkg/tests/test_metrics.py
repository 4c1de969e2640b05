import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from mirror_unet.corruption import philox
from mirror_unet.metrics import (
    MetricsRecord,
    aggregate,
    case_metrics,
    connected_components,
    dice_score,
    fp_fn_volumes,
    write_metrics_csv,
)

SPACING = (2.0, 2.0, 3.0)


def _mask(shape=(8, 8, 8), voxels=()):
    m = np.zeros(shape, dtype=np.uint8)
    for v in voxels:
        m[v] = 1
    return m


def test_dice_examples():
    a = _mask(voxels=[(0, 0, 0), (1, 1, 1)])
    assert dice_score(a, a) == 1.0
    assert dice_score(a, _mask(voxels=[(5, 5, 5)])) == 0.0
    assert dice_score(a, _mask(voxels=[(0, 0, 0), (4, 4, 4)])) == 0.5
    assert dice_score(_mask(), _mask()) == 1.0


def test_dice_rejects_non_binary():
    with pytest.raises(ValueError, match="binary"):
        dice_score(np.full((2, 2, 2), 2), np.zeros((2, 2, 2)))


def test_components_examples():
    _, sizes = connected_components(_mask(voxels=[(3, 3, 3)]))
    assert sizes.tolist() == [1]
    diag = _mask(voxels=[(2, 2, 2), (3, 3, 3)])
    assert len(connected_components(diag, 26)[1]) == 1
    assert len(connected_components(diag, 6)[1]) == 2
    assert len(connected_components(_mask())[1]) == 0


def test_components_edge_diagonal_is_18_connected():
    edge = _mask(voxels=[(2, 2, 2), (3, 3, 2)])
    assert len(connected_components(edge, 18)[1]) == 1
    assert len(connected_components(edge, 6)[1]) == 2


def test_bad_connectivity():
    with pytest.raises(ValueError):
        connected_components(_mask(), 8)


def test_fpv_fnv_examples():
    gt = _mask(voxels=[(0, 0, k) for k in range(4)])
    pred = _mask(voxels=[(6, 6, k) for k in range(5)])
    fpv, fnv = fp_fn_volumes(pred, gt, SPACING)
    assert fpv == pytest.approx(0.06)
    assert fnv == pytest.approx(0.048)


def test_overlapping_component_contributes_nothing():
    gt = _mask(voxels=[(1, 1, 1)])
    pred = _mask(voxels=[(1, 1, 1), (1, 1, 2), (1, 1, 3)])
    assert fp_fn_volumes(pred, gt, SPACING) == (0.0, 0.0)


def test_spacing_and_shape_mismatch():
    with pytest.raises(ValueError, match="spacing mismatch"):
        fp_fn_volumes(_mask(), _mask(), SPACING, gt_spacing=(1, 1, 1))
    with pytest.raises(ValueError, match="shape mismatch"):
        fp_fn_volumes(_mask(), _mask((8, 8, 9)), SPACING)


def test_perfect_and_empty_predictions():
    gt = _mask(voxels=[(0, 0, 0), (0, 0, 1), (5, 5, 5)])
    r = case_metrics(gt, gt, SPACING)
    assert (r.dice, r.fpv_ml, r.fnv_ml) == (1.0, 0.0, 0.0)
    r = case_metrics(_mask(), gt, SPACING)
    assert r.dice == 0.0 and r.fnv_ml == pytest.approx(3 * 12 / 1000)


def _random_pair(seed, shape=(16, 16, 16)):
    rng = philox(seed)
    density = rng.uniform(0.01, 0.3)
    return (rng.random(shape) < density).astype(np.uint8), (rng.random(shape) < density).astype(np.uint8)


@pytest.mark.parametrize("seed", range(10))
def test_matches_brute_force_oracle(seed):
    pred, gt = _random_pair(seed)
    assert dice_score(pred, gt) == oracles.dice(pred, gt)
    assert fp_fn_volumes(pred, gt, SPACING) == pytest.approx(oracles.fp_fn(pred, gt, SPACING), abs=1e-12)


@given(st.integers(0, 2**32 - 1), st.sampled_from([6, 18, 26]))
def test_component_partition_matches_flood_fill(seed, conn):
    m = (philox(seed).random((7, 6, 5)) < 0.3).astype(np.uint8)
    labels, sizes = connected_components(m, conn)
    ours = sorted(frozenset(map(tuple, np.argwhere(labels == k))) for k in range(1, len(sizes) + 1))
    ref = sorted(frozenset(c) for c in oracles.components(m, conn))
    assert ours == ref


@given(st.integers(0, 2**32 - 1))
def test_dice_symmetric_and_bounded(seed):
    a, b = _random_pair(seed, (6, 6, 6))
    d = dice_score(a, b)
    assert d == dice_score(b, a) and 0.0 <= d <= 1.0


@given(st.integers(0, 2**32 - 1))
def test_fp_fn_swap_symmetry(seed):
    a, b = _random_pair(seed, (6, 6, 6))
    fp, fn = fp_fn_volumes(a, b, SPACING)
    assert fp_fn_volumes(b, a, SPACING) == (fn, fp)
    assert fp >= 0 and fn >= 0


@given(st.integers(0, 2**32 - 1))
def test_fp_fn_invariant_to_axis_permutation(seed):
    a, b = _random_pair(seed, (6, 6, 6))
    perm = (2, 0, 1)
    iso = (1.0, 1.0, 1.0)
    assert fp_fn_volumes(a, b, iso) == fp_fn_volumes(a.transpose(perm), b.transpose(perm), iso)


def test_aggregate_and_csv(tmp_path):
    records = [MetricsRecord(1.0, 0.0, 0.5, "a"), MetricsRecord(0.5, 1.0, 0.0, "b")]
    mean = aggregate(records)
    assert (mean.dice, mean.fpv_ml, mean.fnv_ml) == (0.75, 0.5, 0.25)
    write_metrics_csv(records, tmp_path / "m.csv")
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert [r["case_id"] for r in rows] == ["a", "b", "mean"]
    assert float(rows[-1]["dice"]) == 0.75
    with pytest.raises(ValueError):
        aggregate([])
