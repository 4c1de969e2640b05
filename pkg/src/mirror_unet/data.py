"""Volumes, NIfTI I/O, preprocessing, patch sampling and seeded synthetic phantoms."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import nibabel as nib
import numpy as np
from scipy import ndimage

from .corruption import philox

log = logging.getLogger(__name__)

AUTOPET_SPACING = (2.0, 2.0, 3.0)
MRI_SPACING = (1.0, 1.0, 1.0)
CT_RANGE = (-100.0, 250.0)
SUV_RANGE = (0.0, 15.0)


@dataclass
class Volume:
    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3D array, got shape {self.values.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be 3 strictly positive values, got {self.spacing}")

    @property
    def shape(self):
        return self.values.shape

    def with_values(self, values) -> Volume:
        return replace(self, values=values)


@dataclass
class MultimodalSample:
    """Two aligned modalities, a label volume and the tumor-presence flag ``c``.

    ``x_A`` is CT (or FLAIR), ``x_B`` is PET (or T1Gd). ``y`` is binary for PET/CT and a
    {0: background, 1: edema, 2: core} label map for the brain data.
    """

    x_A: Volume
    x_B: Volume
    y: Volume
    c: int = 0
    case_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.x_A.shape == self.x_B.shape == self.y.shape):
            raise ValueError("all volumes of a sample must share one shape")
        if not (self.x_A.spacing == self.x_B.spacing == self.y.spacing):
            raise ValueError("all volumes of a sample must share one spacing")

    @property
    def shape(self):
        return self.x_A.shape

    @property
    def spacing(self):
        return self.x_A.spacing


# ------------------------------------------------------------------------- I/O

def _affine(spacing, origin) -> np.ndarray:
    aff = np.diag([*spacing, 1.0])
    aff[:3, 3] = origin
    return aff


def load_volume(path) -> Volume:
    """Read a (gzip) NIfTI-1 file; axes stay in file order (W, H, D)."""
    try:
        img = nib.load(str(path))
        data = np.asanyarray(img.dataobj)
        zooms = img.header.get_zooms()
    except (nib.filebasedimages.ImageFileError, ValueError, EOFError, OSError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise ValueError(f"malformed header in {path}: {exc}") from exc
    if data.ndim != 3:
        raise ValueError(f"non-3D payload in {path}: shape {data.shape}")
    return Volume(data, tuple(float(z) for z in zooms[:3]), tuple(float(o) for o in img.affine[:3, 3]))


def save_volume(vol: Volume, path, dtype=np.float32) -> None:
    img = nib.Nifti1Image(np.asarray(vol.values, dtype=dtype), _affine(vol.spacing, vol.origin))
    img.header.set_zooms(vol.spacing)
    nib.save(img, str(path))


def save_mask(mask: Volume, path) -> None:
    v = np.asarray(mask.values)
    if not np.all(np.isfinite(v)) or not np.array_equal(v, np.round(v)):
        raise ValueError("mask must be integer-valued")
    dtype = np.uint8 if v.min(initial=0) >= 0 and v.max(initial=0) < 256 else np.int16
    save_volume(mask, path, dtype=dtype)


# ---------------------------------------------------------------- preprocessing

def resample(vol: Volume, spacing, order: int = 1) -> Volume:
    """Resample to ``spacing``: order 1 (trilinear) for images, 0 (nearest) for masks."""
    spacing = tuple(float(s) for s in spacing)
    if spacing == vol.spacing:
        return vol
    factors = [a / b for a, b in zip(vol.spacing, spacing)]
    values = ndimage.zoom(vol.values.astype(np.float32) if order else vol.values, factors,
                          order=order, mode="nearest")
    return Volume(values, spacing, vol.origin)


def scale_ct(values):
    lo, hi = CT_RANGE
    return ((np.clip(values, lo, hi) - lo) / (hi - lo)).astype(np.float32)


def scale_suv(values):
    lo, hi = SUV_RANGE
    return ((np.clip(values, lo, hi) - lo) / (hi - lo)).astype(np.float32)


def unscale_ct(values):
    lo, hi = CT_RANGE
    return np.asarray(values, dtype=np.float64) * (hi - lo) + lo


def unscale_suv(values):
    lo, hi = SUV_RANGE
    return np.asarray(values, dtype=np.float64) * (hi - lo) + lo


def preprocess_autopet(ct: Volume, pet_suv: Volume, spacing=AUTOPET_SPACING):
    """Resample to 2x2x3 mm, clip CT to [-100, 250] HU and SUV to [0, 15], scale both to [0, 1]."""
    ct_r = resample(ct, spacing)
    pet_r = resample(pet_suv, spacing)
    if ct_r.shape != pet_r.shape:
        raise ValueError(f"shape mismatch after resampling: {ct_r.shape} vs {pet_r.shape}")
    return ct_r.with_values(scale_ct(ct_r.values)), pet_r.with_values(scale_suv(pet_r.values))


def preprocess_mri(vol: Volume, spacing=MRI_SPACING) -> Volume:
    """Resample to 1 mm isotropic and z-score over nonzero voxels; background stays 0."""
    vol = resample(vol, spacing)
    v = vol.values.astype(np.float64)
    fg = v != 0
    if not fg.any() or v[fg].std() == 0:
        raise ValueError("zero variance")
    out = np.zeros_like(v)
    out[fg] = (v[fg] - v[fg].mean()) / v[fg].std()
    return vol.with_values(out.astype(np.float32))


# ---------------------------------------------------------------- patches

def _crop(values, start, patch_shape, pad_value):
    pads = [(0, max(0, p - n)) for n, p in zip(values.shape, patch_shape)]
    if any(b for _, b in pads):
        if pad_value == "edge":
            values = np.pad(values, pads, mode="edge")
        else:
            values = np.pad(values, pads, mode="constant", constant_values=pad_value)
    sl = tuple(slice(s, s + p) for s, p in zip(start, patch_shape))
    return values[sl]


def patch_start(center, shape, patch_shape):
    return tuple(int(min(max(c - p // 2, 0), max(n - p, 0))) for c, n, p in zip(center, shape, patch_shape))


def crop_sample(sample: MultimodalSample, start, patch_shape) -> MultimodalSample:
    def cut(v: Volume, pad):
        origin = tuple(o + s * sp for o, s, sp in zip(v.origin, start, v.spacing))
        return Volume(_crop(v.values, start, patch_shape, pad), v.spacing, origin)

    y = cut(sample.y, 0)
    meta = dict(sample.meta, patch_start=tuple(start))
    return MultimodalSample(cut(sample.x_A, "edge"), cut(sample.x_B, "edge"), y,
                            int(np.any(y.values > 0)), sample.case_id, meta)


def sample_patch(sample: MultimodalSample, patch_shape, p_fg: float, seed) -> MultimodalSample:
    """Crop all volumes identically; centre on a random foreground voxel with probability ``p_fg``."""
    if not 0.0 <= p_fg <= 1.0:
        raise ValueError("p_fg must lie in [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else philox(seed)
    want_fg = rng.random() < p_fg
    fg = np.flatnonzero(sample.y.values > 0) if want_fg else None
    if want_fg and fg.size:
        center = np.unravel_index(fg[rng.integers(fg.size)], sample.shape)
    else:
        center = tuple(rng.integers(n) for n in sample.shape)
    return crop_sample(sample, patch_start(center, sample.shape, patch_shape), patch_shape)


# ---------------------------------------------------------------- phantoms

@dataclass
class PhantomSpec:
    shape: tuple = (64, 64, 64)
    spacing: tuple = AUTOPET_SPACING
    organ_count: int = 3
    lesion_count: int = 2
    lesion_radius: tuple = (4.0, 10.0)
    organ_radius: tuple = (8.0, 14.0)
    organ_uptake: float = 0.8
    lesion_uptake: float = 0.8
    ct_lesion_contrast: float = 0.05
    organ_ct: float = 0.75
    seed: int = 0

    def validate(self) -> None:
        if min(self.organ_uptake, self.lesion_uptake) < 0.6:
            raise ValueError("organ and lesion uptake must be >= 0.6")
        if self.lesion_uptake * 0.95 < 0.9 * self.organ_uptake:
            raise ValueError("lesion uptake too low relative to organ uptake")
        if not 0 <= self.ct_lesion_contrast <= 0.1:
            raise ValueError("ct_lesion_contrast must lie in [0, 0.1]")
        if self.lesion_count < 0 or self.organ_count < 0:
            raise ValueError("counts must be nonnegative")


def _grid(shape, spacing):
    return np.meshgrid(*[np.arange(n) * s for n, s in zip(shape, spacing)], indexing="ij")


def _ellipsoid(grid, center, radii):
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)) <= 1.0


def _smooth_noise(rng, shape, sigma_vox, amplitude):
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma_vox)
    return amplitude * n / (np.abs(n).max() + 1e-12)


def _place(rng, grid, body, extent, radius_range, taken, what):
    for _ in range(100):
        r = rng.uniform(*radius_range)
        if 2 * r >= min(extent):
            continue
        center = [rng.uniform(r, e - r) for e in extent]
        blob = _ellipsoid(grid, center, (r, r, r))
        if blob.any() and np.all(body[blob]) and not np.any(taken[blob]):
            return blob
    raise ValueError(f"could not place {what} inside the body after 100 attempts")


def generate_phantom(spec: PhantomSpec) -> MultimodalSample:
    """Synthetic PET/CT case on the [0, 1] scale.

    CT: body ellipsoid with smooth tissue texture, a bright spine and organs with a
    strong CT signature; lesions change CT by at most ``ct_lesion_contrast``.
    PET: low body background, hot organs (true negatives) and hot lesions.
    Body/texture, organs and lesions draw from independent seed streams, so the
    ``lesion_count=0`` phantom with the same seed is the lesion-free version of the case.
    """
    spec.validate()
    body_rng, organ_rng, lesion_rng = (np.random.Generator(np.random.Philox(s))
                                       for s in np.random.SeedSequence(spec.seed).spawn(3))
    shape, spacing = tuple(spec.shape), tuple(spec.spacing)
    grid = _grid(shape, spacing)
    extent = [n * s for n, s in zip(shape, spacing)]
    mid = [e / 2 for e in extent]

    body_radii = [e * body_rng.uniform(0.40, 0.46) for e in extent]
    body = _ellipsoid(grid, mid, body_radii)
    texture = _smooth_noise(body_rng, shape, 2.0, 0.08)
    ct = np.where(body, 0.4 + texture, 0.0)
    spine_center = (mid[0], mid[1] - 0.5 * body_radii[1])
    spine = ((grid[0] - spine_center[0]) ** 2 + (grid[1] - spine_center[1]) ** 2) <= (0.12 * body_radii[0]) ** 2
    ct[spine & body] = 0.95
    pet = np.where(body, 0.1 + 0.5 * np.abs(_smooth_noise(body_rng, shape, 1.5, 0.1)), 0.0)

    taken = spine.copy()
    for _ in range(spec.organ_count):
        organ = _place(organ_rng, grid, body, extent, spec.organ_radius, taken, "organ")
        taken |= organ
        ct[organ] = spec.organ_ct + 0.5 * texture[organ]
        pet[organ] = spec.organ_uptake * organ_rng.uniform(0.95, 1.0, size=int(organ.sum()))

    y = np.zeros(shape, dtype=np.uint8)
    for _ in range(spec.lesion_count):
        lesion = _place(lesion_rng, grid, body, extent, spec.lesion_radius, taken | (y > 0), "lesion")
        y[lesion] = 1
        ct[lesion] += lesion_rng.uniform(-spec.ct_lesion_contrast, spec.ct_lesion_contrast)
        pet[lesion] = spec.lesion_uptake * lesion_rng.uniform(0.95, 1.0, size=int(lesion.sum()))

    ct = np.clip(ct, 0.0, 1.0).astype(np.float32)
    pet = np.clip(pet, 0.0, 1.0).astype(np.float32)
    vols = [Volume(v, spacing) for v in (ct, pet, y)]
    return MultimodalSample(*vols, c=int(y.any()), case_id=f"phantom_{spec.seed}")


def make_phantom_specs(n: int, seed: int, p_healthy: float = 0.5, max_lesions: int = 3, **kw) -> list[PhantomSpec]:
    """``n`` specs; each is lesion-free with probability ``p_healthy``."""
    rng = philox(seed)
    specs = []
    for i in range(n):
        count = 0 if rng.random() < p_healthy else int(rng.integers(1, max_lesions + 1))
        specs.append(PhantomSpec(lesion_count=count, seed=int(rng.integers(2**31)), **kw))
    return specs


@dataclass
class BrainPhantomSpec:
    shape: tuple = (64, 64, 64)
    spacing: tuple = MRI_SPACING
    core_radius: tuple = (4.0, 8.0)
    edema_margin: tuple = (3.0, 7.0)
    seed: int = 0


def generate_brain_phantom(spec: BrainPhantomSpec) -> MultimodalSample:
    """Core sphere nested in an edema shell: FLAIR highlights edema, T1Gd highlights core."""
    rng = philox(spec.seed)
    shape, spacing = tuple(spec.shape), tuple(spec.spacing)
    grid = _grid(shape, spacing)
    extent = [n * s for n, s in zip(shape, spacing)]
    mid = [e / 2 for e in extent]
    brain = _ellipsoid(grid, mid, [0.42 * e for e in extent])
    r_core = rng.uniform(*spec.core_radius)
    r_edema = r_core + rng.uniform(*spec.edema_margin)
    center = [m + rng.uniform(-0.15, 0.15) * e for m, e in zip(mid, extent)]
    whole = _ellipsoid(grid, center, [r_edema] * 3) & brain
    core = _ellipsoid(grid, center, [r_core] * 3) & brain
    y = np.zeros(shape, dtype=np.uint8)
    y[whole] = 1
    y[core] = 2
    texture = _smooth_noise(rng, shape, 2.0, 0.05)
    flair = np.where(brain, 0.35 + texture, 0.0)
    flair[whole] = 0.85 + texture[whole]
    flair[core] = 0.6 + texture[core]
    t1gd = np.where(brain, 0.4 + texture, 0.0)
    t1gd[whole & ~core] = 0.3 + texture[whole & ~core]
    t1gd[core] = 0.9 + texture[core]
    vols = [Volume(np.clip(v, 0.0, 1.0).astype(np.float32), spacing) for v in (flair, t1gd)]
    return MultimodalSample(*vols, Volume(y, spacing), c=1, case_id=f"brain_phantom_{spec.seed}")


# ---------------------------------------------------------------- manifests

def write_phantom_dataset(out_dir, specs, brain: bool = False) -> Path:
    """Materialise phantoms as NIfTI (CT in HU, PET in SUV) plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, spec in enumerate(specs):
        cid = f"case_{i:04d}"
        if brain:
            s = generate_brain_phantom(spec)
            save_volume(s.x_A, out / f"{cid}_flair.nii.gz")
            save_volume(s.x_B, out / f"{cid}_t1gd.nii.gz")
            save_mask(s.y, out / f"{cid}_mask.nii.gz")
            entries.append({"id": cid, "flair": f"{cid}_flair.nii.gz", "t1gd": f"{cid}_t1gd.nii.gz",
                            "mask": f"{cid}_mask.nii.gz"})
        else:
            s = generate_phantom(spec)
            save_volume(s.x_A.with_values(unscale_ct(s.x_A.values)), out / f"{cid}_ct.nii.gz")
            save_volume(s.x_B.with_values(unscale_suv(s.x_B.values)), out / f"{cid}_pet.nii.gz")
            save_mask(s.y, out / f"{cid}_mask.nii.gz")
            entries.append({"id": cid, "ct": f"{cid}_ct.nii.gz", "pet": f"{cid}_pet.nii.gz",
                            "mask": f"{cid}_mask.nii.gz", "label": s.c})
    path = out / "manifest.json"
    path.write_text(json.dumps(entries, indent=1), encoding="utf-8")
    return path


def load_manifest(path) -> list[MultimodalSample]:
    """Load and preprocess every case listed in a manifest (PET/CT or brain layout)."""
    path = Path(path)
    root = path.parent
    samples = []
    for i, e in enumerate(json.loads(path.read_text())):
        cid = e.get("id", f"case_{i:04d}")
        if "ct" in e:
            ct, pet = preprocess_autopet(load_volume(root / e["ct"]), load_volume(root / e["pet"]))
            mask = resample(load_volume(root / e["mask"]), AUTOPET_SPACING, order=0)
            y = Volume((mask.values > 0).astype(np.uint8), ct.spacing, ct.origin)
            c = int(e.get("label", int(y.values.any())))
            samples.append(MultimodalSample(ct, pet, y, c, cid))
        elif "flair" in e:
            flair = preprocess_mri(load_volume(root / e["flair"]))
            t1gd = preprocess_mri(load_volume(root / e["t1gd"]))
            mask = resample(load_volume(root / e["mask"]), MRI_SPACING, order=0)
            y = Volume(mask.values.astype(np.uint8), flair.spacing, flair.origin)
            samples.append(MultimodalSample(flair, t1gd, y, 1, cid))
        else:
            raise ValueError(f"manifest entry {i} has neither ct/pet nor flair/t1gd paths")
    return samples
