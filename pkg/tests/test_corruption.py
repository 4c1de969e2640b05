import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mirror_unet.corruption import ShuffleSpec, corrupt, gaussian_corrupt, patch_shuffle, philox, unshuffle


def test_zero_sigma_is_identity():
    v = philox(0).random((8, 8, 8)).astype(np.float32)
    assert np.array_equal(gaussian_corrupt(v, 0.0, seed=1), v)


def test_negative_sigma_rejected():
    with pytest.raises(ValueError, match="negative sigma"):
        gaussian_corrupt(np.zeros((2, 2, 2)), -0.1, seed=0)


def test_noise_mean_absolute_deviation():
    v = np.full((128, 128, 64), 0.5)
    out = gaussian_corrupt(v, 0.1, seed=3)
    # clipping at 0/1 is 5 sigma away, so the half-normal mean applies
    assert np.abs(out - v).mean() == pytest.approx(0.1 * math.sqrt(2 / math.pi), abs=0.002)


def test_noise_moments_before_clipping():
    n = 1_048_576
    v = np.full((n // 4096, 64, 64), 0.5)
    d = (gaussian_corrupt(v, 0.05, seed=11) - v).ravel()
    sigma = 0.05
    assert abs(d.mean()) < 3 * sigma / math.sqrt(n)
    # sample variance has standard error sigma^2 * sqrt(2 / (n - 1))
    assert abs(d.var(ddof=1) - sigma**2) < 3 * sigma**2 * math.sqrt(2 / (n - 1))


@given(st.integers(0, 2**32 - 1), st.floats(0, 2))
def test_noise_output_in_unit_range(seed, sigma):
    v = philox(seed).random((6, 5, 4))
    out = gaussian_corrupt(v, sigma, seed)
    assert out.min() >= 0 and out.max() <= 1


def test_noise_deterministic_and_seed_sensitive():
    v = np.full((10, 10, 10), 0.5)
    assert np.array_equal(gaussian_corrupt(v, 0.1, 5), gaussian_corrupt(v, 0.1, 5))
    assert not np.array_equal(gaussian_corrupt(v, 0.1, 5), gaussian_corrupt(v, 0.1, 6))


def test_identity_permutation():
    v = philox(1).random((32, 32, 16))
    out, perm = patch_shuffle(v, ShuffleSpec(16, 0), permutation=np.arange(4))
    assert np.array_equal(out, v)
    assert perm.tolist() == list(range(4))


def test_swap_of_two_cubes_exchanges_halves():
    v = philox(2).random((8, 4, 4))
    out, _ = patch_shuffle(v, ShuffleSpec(4, 0), permutation=[1, 0])
    assert np.array_equal(out[:4], v[4:]) and np.array_equal(out[4:], v[:4])


def test_non_dividing_edge_rejected():
    with pytest.raises(ValueError, match="does not divide"):
        patch_shuffle(np.zeros((16, 16, 12)), ShuffleSpec(8, 0))


def test_bad_forced_permutation_rejected():
    with pytest.raises(ValueError):
        patch_shuffle(np.zeros((8, 4, 4)), ShuffleSpec(4, 0), permutation=[0, 0])


def test_default_edge_on_96_cube_gives_216_cubes():
    v = np.zeros((96, 96, 96), dtype=np.float32)
    _, perm = patch_shuffle(v, ShuffleSpec())
    assert len(perm) == 216


@given(st.integers(0, 2**32 - 1), st.sampled_from([(1, 2, 3), (2, 2, 2), (4, 1, 2)]), st.sampled_from([1, 2, 4]))
def test_shuffle_preserves_multiset_and_inverts(seed, grid, edge):
    shape = tuple(g * edge for g in grid)
    v = philox(seed).random(shape)
    out, perm = patch_shuffle(v, ShuffleSpec(edge, seed))
    assert np.array_equal(np.sort(out, axis=None), np.sort(v, axis=None))
    assert np.array_equal(unshuffle(out, perm, edge), v)


def test_cube_contents_follow_permutation():
    v = np.arange(8 * 8 * 4, dtype=np.float64).reshape(8, 8, 4)
    out, perm = patch_shuffle(v, ShuffleSpec(4, 9))
    cubes = [(i, j) for i in range(2) for j in range(2)]
    for pos, src in enumerate(perm):
        (a, b), (c, d) = cubes[pos], cubes[src]
        assert np.array_equal(out[4 * a:4 * a + 4, 4 * b:4 * b + 4], v[4 * c:4 * c + 4, 4 * d:4 * d + 4])


def test_shuffle_deterministic():
    v = philox(4).random((16, 16, 16))
    a, pa = patch_shuffle(v, ShuffleSpec(4, 77))
    b, pb = patch_shuffle(v, ShuffleSpec(4, 77))
    assert np.array_equal(a, b) and np.array_equal(pa, pb)


def test_philox_stream_is_pinned():
    # guards the portability promise: the counter-based stream must not drift
    assert philox(0).integers(0, 2**31, size=3).tolist() == [291248084, 30208729, 2013765090]
    assert philox(0).permutation(6).tolist() == [4, 0, 3, 5, 2, 1]


def test_corrupt_dispatch():
    v = philox(5).random((16, 16, 16))
    assert np.array_equal(corrupt(v, "none", 0), v)
    assert np.array_equal(corrupt(v, "noise", 3, sigma=0.2), gaussian_corrupt(v, 0.2, 3))
    assert np.array_equal(corrupt(v, "shuffle", 4, patch_edge=8), patch_shuffle(v, ShuffleSpec(8, 4))[0])
    with pytest.raises(ValueError):
        corrupt(v, "blur", 0)


def test_corrupt_shuffle_shrinks_edge_for_small_patches():
    v = philox(6).random((8, 8, 8))
    out = corrupt(v, "shuffle", 1, patch_edge=16)
    assert np.array_equal(out, patch_shuffle(v, ShuffleSpec(8, 1))[0])
