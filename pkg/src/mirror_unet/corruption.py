"""Input corruptions for the self-supervised CT branch: Gaussian noise and cube shuffling.

All randomness goes through numpy's counter-based Philox generator so that a seed
means the same thing on every platform.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def philox(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class ShuffleSpec:
    patch_edge: int = 16
    permutation_seed: int = 0

    def validate(self, shape) -> None:
        if self.patch_edge < 1:
            raise ValueError("patch_edge must be positive")
        for n in shape:
            if n % self.patch_edge:
                raise ValueError(f"patch_edge {self.patch_edge} does not divide dimension {n}")


def gaussian_corrupt(volume: np.ndarray, sigma: float, seed) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) noise and clip to [0, 1]."""
    if sigma < 0:
        raise ValueError(f"negative sigma {sigma}")
    volume = np.asarray(volume)
    if sigma == 0:
        return volume.copy()
    noise = philox(seed).normal(0.0, sigma, size=volume.shape)
    return np.clip(volume + noise, 0.0, 1.0).astype(volume.dtype, copy=False)


def _to_cubes(volume: np.ndarray, e: int) -> np.ndarray:
    w, h, d = volume.shape
    cubes = volume.reshape(w // e, e, h // e, e, d // e, e).transpose(0, 2, 4, 1, 3, 5)
    return cubes.reshape(-1, e, e, e)


def _from_cubes(cubes: np.ndarray, shape, e: int) -> np.ndarray:
    w, h, d = shape
    grid = cubes.reshape(w // e, h // e, d // e, e, e, e).transpose(0, 3, 1, 4, 2, 5)
    return grid.reshape(shape)


def patch_shuffle(volume: np.ndarray, spec: ShuffleSpec, permutation=None):
    """Permute non-overlapping cubes of edge ``spec.patch_edge``.

    Returns ``(shuffled, perm)`` where cube position ``i`` of the output holds input cube
    ``perm[i]`` (cubes enumerated in C order over the cube grid). ``permutation`` overrides
    the seeded draw.
    """
    volume = np.asarray(volume)
    spec.validate(volume.shape)
    cubes = _to_cubes(volume, spec.patch_edge)
    if permutation is None:
        perm = philox(spec.permutation_seed).permutation(len(cubes))
    else:
        perm = np.asarray(permutation)
        if sorted(perm.tolist()) != list(range(len(cubes))):
            raise ValueError("permutation must reorder all cubes")
    return _from_cubes(cubes[perm], volume.shape, spec.patch_edge), perm


def unshuffle(volume: np.ndarray, perm, patch_edge: int) -> np.ndarray:
    cubes = _to_cubes(np.asarray(volume), patch_edge)
    restored = np.empty_like(cubes)
    restored[np.asarray(perm)] = cubes
    return _from_cubes(restored, volume.shape, patch_edge)


def corrupt(volume: np.ndarray, kind: str, seed, sigma: float = 0.1, patch_edge: int = 16) -> np.ndarray:
    """Dispatch on the config enum ``none | noise | shuffle``."""
    if kind == "none":
        return np.asarray(volume).copy()
    if kind == "noise":
        return gaussian_corrupt(volume, sigma, seed)
    if kind == "shuffle":
        edge = patch_edge
        # fall back to the largest divisor edge for small patches
        while any(n % edge for n in np.shape(volume)):
            edge //= 2
        return patch_shuffle(volume, ShuffleSpec(edge, seed))[0]
    raise ValueError(f"unknown corruption {kind!r}")
