"""Sliding-window prediction, binarisation and the mask/logit combination rules."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import torch

from .data import MultimodalSample, Volume
from .model import MirrorUNet, fuse_logits


@dataclass(frozen=True)
class WindowSpec:
    patch_shape: tuple
    overlap: float = 0.5
    blend: str = "uniform"

    def __post_init__(self):
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError("overlap must lie in [0, 1)")
        if self.blend != "uniform":
            raise ValueError("only uniform blending is supported")


def window_starts(size: int, patch: int, overlap: float) -> list[int]:
    """Tile starts along one axis; the last tile is aligned with the end of the axis."""
    if size <= patch:
        return [0]
    stride = max(1, int(patch * (1.0 - overlap)))
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def sliding_window_predict(predict, sample: MultimodalSample, spec: WindowSpec) -> np.ndarray:
    """Average logistic probabilities over overlapping tiles.

    ``predict(x_A, x_B)`` takes (1, 1, *patch) tensors and returns logits of shape
    (1, C, *patch). Returns a (C, *volume_shape) float32 array. Volumes smaller than the
    patch are edge-padded and the padding cropped from the result.
    """
    shape = sample.shape
    patch = tuple(spec.patch_shape)
    pads = [(0, max(0, p - n)) for n, p in zip(shape, patch)]
    a = np.pad(sample.x_A.values.astype(np.float32), pads, mode="edge")
    b = np.pad(sample.x_B.values.astype(np.float32), pads, mode="edge")
    full = a.shape
    acc = None
    count = np.zeros(full, dtype=np.float32)
    grids = [window_starts(n, p, spec.overlap) for n, p in zip(full, patch)]
    with torch.no_grad():
        for start in itertools.product(*grids):
            sl = tuple(slice(s, s + p) for s, p in zip(start, patch))
            ta = torch.from_numpy(np.ascontiguousarray(a[sl]))[None, None]
            tb = torch.from_numpy(np.ascontiguousarray(b[sl]))[None, None]
            probs = torch.sigmoid(predict(ta, tb))[0].float().numpy()
            if acc is None:
                acc = np.zeros((probs.shape[0], *full), dtype=np.float32)
            acc[(slice(None), *sl)] += probs
            count[sl] += 1.0
    out = acc / count
    return out[(slice(None), *(slice(0, n) for n in shape))]


def binarize(probs, tau: float = 0.5) -> np.ndarray:
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau {tau} outside (0, 1)")
    return (np.asarray(probs) >= tau).astype(np.uint8)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def late_fuse(a, b, mode: str) -> np.ndarray:
    """Decision-level fusion: ``logit_sum`` of real logits, or ``union``/``intersection`` of masks."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if mode == "logit_sum":
        return binarize(_sigmoid(a.astype(np.float64) + b), 0.5)
    if mode in ("union", "intersection"):
        for m in (a, b):
            if not np.all((m == 0) | (m == 1)):
                raise ValueError(f"{mode} fusion expects binary masks")
        op = np.logical_or if mode == "union" else np.logical_and
        return op(a.astype(bool), b.astype(bool)).astype(np.uint8)
    raise ValueError(f"unknown late fusion mode {mode!r}")


def combine_brain_masks(core_mask, edema_mask) -> np.ndarray:
    core, edema = np.asarray(core_mask), np.asarray(edema_mask)
    if core.shape != edema.shape:
        raise ValueError(f"shape mismatch: {core.shape} vs {edema.shape}")
    return np.logical_or(core.astype(bool), edema.astype(bool)).astype(np.uint8)


# ---------------------------------------------------------------- model dispatch

def window_function(model):
    """Callable mapping an input tile pair to the logits that get blended across tiles."""
    if isinstance(model, MirrorUNet):
        v = model.version
        if v in ("v1", "v2", "v3", "v2-rec-brain"):
            return lambda a, b: model(a, b).out_B
        if v == "v4":
            def fused(a, b):
                o = model(a, b)
                return fuse_logits(o.out_A, o.out_B, model.theta())
            return fused
        if v == "v2-brain":
            def both(a, b):
                o = model(a, b)
                return torch.cat([o.out_A, o.out_B], dim=1)
            return both
    return model.window_logits


def predict_mask(model, sample: MultimodalSample, spec: WindowSpec, tau: float = 0.5):
    """Whole-volume (probabilities, final binary mask) for any model version or baseline."""
    model.eval()
    probs = sliding_window_predict(window_function(model), sample, spec)
    version = getattr(model, "version", None)
    if version == "v2-brain":
        # channel 0: edema (branch A), channel 1: core (branch B)
        return probs, combine_brain_masks(binarize(probs[1], tau), binarize(probs[0], tau))
    if version == "v2-rec-brain":
        # branch B channels: edema, core, whole
        return probs, combine_brain_masks(binarize(probs[1], tau), binarize(probs[0], tau))
    mode = getattr(model, "fusion_mode", None)
    if mode in ("union", "intersection"):
        return probs, late_fuse(binarize(probs[0], tau), binarize(probs[1], tau), mode)
    return probs, binarize(probs[0], tau)


def probability_volume(probs: np.ndarray, like: Volume) -> Volume:
    return Volume(probs.astype(np.float32), like.spacing, like.origin)
