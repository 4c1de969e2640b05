"""Optimisation loop, checkpoints, evaluation and the weight-sharing sweep runner."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import config as C
from .baselines import build_baseline
from .brain import brain_targets
from .config import ConfigError, TrainConfig
from .corruption import corrupt, philox
from .data import MultimodalSample, sample_patch
from .inference import WindowSpec, predict_mask
from .losses import LossBreakdown, dice_ce_loss, version_loss
from .metrics import MetricsRecord, aggregate, case_metrics
from .model import MirrorUNet, build_model, load_state_arrays, state_arrays

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("step", "epoch", "total", "seg", "rec_branch", "rec_btl", "seg_btl", "class_term")


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    config: TrainConfig
    arrays: dict

    def save(self, path) -> None:
        payload = {k: np.asarray(v, dtype="<f4") for k, v in self.arrays.items()}
        payload["__config__"] = np.array(C.config_to_json(self.config))
        np.savez(path, **payload)

    @classmethod
    def load(cls, path) -> Checkpoint:
        with np.load(path, allow_pickle=False) as f:
            cfg = C.from_flat(json.loads(str(f["__config__"])))
            arrays = {k: f[k] for k in f.files if k != "__config__"}
        return cls(cfg, arrays)

    def build(self) -> nn.Module:
        model = build_from_config(self.config)
        load_state_arrays(model, self.arrays)
        return model


def build_from_config(cfg: TrainConfig) -> nn.Module:
    if cfg.baseline is not None:
        return build_baseline(cfg.baseline, cfg.model, cfg.late_fusion_mode)
    return build_model(cfg.model)


# ---------------------------------------------------------------- history

@dataclass
class RunHistory:
    rows: list = field(default_factory=list)
    val: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)

    def append(self, step: int, epoch: int, breakdown: LossBreakdown) -> None:
        if self.rows and step <= self.rows[-1]["step"]:
            raise ValueError("history steps must strictly increase")
        self.rows.append({"step": step, "epoch": epoch, **breakdown.row()})

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
            w.writeheader()
            w.writerows(self.rows)

    def losses(self) -> np.ndarray:
        return np.array([r["total"] for r in self.rows])


# ---------------------------------------------------------------- batches

def collate(patches: list[MultimodalSample], version: str | None) -> dict:
    def stack(get):
        return torch.from_numpy(np.stack([get(p) for p in patches])[:, None].astype(np.float32))

    batch = {"x_A": stack(lambda p: p.x_A.values), "x_B": stack(lambda p: p.x_B.values)}
    if version in C.BRAIN_VERSIONS:
        targets = [brain_targets(p.y.values) for p in patches]
        for k, name in enumerate(("edema", "core", "whole")):
            batch[name] = torch.from_numpy(np.stack([t[k] for t in targets])[:, None].astype(np.float32))
        batch["y"] = batch["whole"]
    else:
        batch["y"] = stack(lambda p: (p.y.values > 0))
    batch["c"] = torch.tensor([float(p.c) for p in patches])
    return batch


def decay_parameter_groups(model: nn.Module, weight_decay: float):
    """Weight decay on convolution kernels only; norms, biases, linear layers and theta excluded."""
    decay, no_decay = [], []
    seen = set()
    for mod in model.modules():
        for name, p in mod.named_parameters(recurse=False):
            if id(p) in seen:
                continue
            seen.add(id(p))
            is_conv_kernel = isinstance(mod, (nn.Conv3d, nn.ConvTranspose3d)) and name == "weight"
            (decay if is_conv_kernel else no_decay).append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


def training_loss(model: nn.Module, cfg: TrainConfig, batch: dict, x_A_input) -> LossBreakdown:
    x_B = batch["x_B"]
    if isinstance(model, MirrorUNet):
        out = model(x_A_input, x_B)
        theta = model.theta() if model.version == "v4" else None
        return version_loss(model.version, out, batch, cfg.weights, phi_target=batch["x_A"], theta=theta)
    out = model(x_A_input, x_B)
    if getattr(model, "kind", "") == "late_fusion_base":
        seg = dice_ce_loss(out.out_A, batch["y"]) + dice_ce_loss(out.out_B, batch["y"])
    else:
        seg = dice_ce_loss(out.out_B, batch["y"])
    return LossBreakdown(seg, seg=seg, present=frozenset({"seg"}))


def _to_cl(t):
    return t.contiguous(memory_format=torch.channels_last_3d)


def train_model(cfg: TrainConfig, train_set: list[MultimodalSample], val_set=None, *,
                channels_last: bool = True, on_step=None, history_path=None):
    """Train with Adam at constant learning rate; returns (Checkpoint, RunHistory).

    Each epoch draws one patch per training case in a seeded random order. When a
    validation set is given, the returned checkpoint is the one with the best validation
    Dice; otherwise it is the final one. ``on_step(model, step, breakdown)`` runs after
    backward and before the optimiser update.
    """
    if not train_set:
        raise ValueError("empty training set")
    torch.use_deterministic_algorithms(True)
    model = build_from_config(cfg)
    version = None if cfg.baseline else cfg.model.version
    if channels_last:
        model = model.to(memory_format=torch.channels_last_3d)
    model.train()
    opt = torch.optim.Adam(decay_parameter_groups(model, cfg.weight_decay), lr=cfg.lr)
    rng = philox(cfg.seed)
    patch = cfg.model.in_patch
    corrupt_a = version in C.RECON_VERSIONS and cfg.corruption != "none"
    history = RunHistory()
    best = (-math.inf, None)
    step = 0
    window = WindowSpec(patch, cfg.overlap)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        model.train()
        order = rng.permutation(len(train_set))
        for lo in range(0, len(order), cfg.batch_size):
            patches = [sample_patch(train_set[i], patch, cfg.p_fg, rng) for i in order[lo:lo + cfg.batch_size]]
            batch = collate(patches, version)
            x_in = batch["x_A"]
            if corrupt_a:
                seeds = rng.integers(2**63, size=len(patches))
                x_in = torch.from_numpy(np.stack([
                    corrupt(p.x_A.values, cfg.corruption, int(s), cfg.noise_sigma, cfg.shuffle_edge)
                    for p, s in zip(patches, seeds)])[:, None].astype(np.float32))
            if channels_last:
                batch = {k: (_to_cl(v) if v.dim() == 5 else v) for k, v in batch.items()}
                x_in = _to_cl(x_in)
            breakdown = training_loss(model, cfg, batch, x_in)
            if not torch.isfinite(breakdown.total):
                raise FloatingPointError(f"non-finite loss at step {step}: {breakdown.row()}")
            opt.zero_grad(set_to_none=False)
            breakdown.total.backward()
            if on_step is not None:
                on_step(model, step, breakdown)
            opt.step()
            history.append(step, epoch, breakdown)
            step += 1
            if isinstance(model, MirrorUNet) and cfg.tie_check_every and step % cfg.tie_check_every == 0:
                assert model.check_tying(), f"tied storage broken at step {step}"
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        history.epoch_seconds.append(time.perf_counter() - t0)
        if val_set:
            agg, _ = evaluate_loaded(model, val_set, window)
            history.val.append({"epoch": epoch, **asdict(agg)})
            if agg.dice > best[0]:
                best = (agg.dice, state_arrays(model))
        log.info("epoch %d done: step %d loss %.4f", epoch, step, history.rows[-1]["total"] if history.rows else float("nan"))
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    arrays = best[1] if best[1] is not None else state_arrays(model)
    if history_path is not None:
        history.write_csv(history_path)
    return Checkpoint(cfg, arrays), history


# ---------------------------------------------------------------- evaluation

def _ground_truth(sample: MultimodalSample) -> np.ndarray:
    return (sample.y.values > 0).astype(np.uint8)


def evaluate_loaded(model, dataset, window: WindowSpec, tau: float = 0.5):
    if not dataset:
        raise ValueError("empty dataset")
    records = []
    for s in dataset:
        if hasattr(model, "predict_case"):
            mask = model.predict_case(s)
        else:
            _, mask = predict_mask(model, s, window, tau)
        records.append(case_metrics(mask, _ground_truth(s), s.spacing, s.case_id))
    return aggregate(records), records


def evaluate_model(checkpoint, dataset, window: WindowSpec | None = None, tau: float = 0.5):
    """Sliding-window inference per case; returns (mean MetricsRecord, per-case records).

    ``checkpoint`` may also be any object with ``predict_case(sample) -> mask``.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if isinstance(checkpoint, Checkpoint):
        mc = checkpoint.config.model
        for s in dataset:
            if tuple(s.spacing) != tuple(mc.spacing):
                raise ValueError(f"spacing mismatch: case {s.case_id} has {s.spacing}, checkpoint expects {mc.spacing}")
        model = checkpoint.build()
        window = window or WindowSpec(mc.in_patch, checkpoint.config.overlap)
    else:
        model = checkpoint
        window = window or WindowSpec((96, 96, 96))
    if isinstance(model, nn.Module):
        model.eval()
    return evaluate_loaded(model, dataset, window, tau)


# ---------------------------------------------------------------- sweep

SETTING_LABELS = {"none": "L2", "noise": "L2 + noise", "shuffle": "L2 + shuffling"}


@dataclass(frozen=True)
class SweepCell:
    version: str
    shared: frozenset
    corruption: str | None = None
    theta: float | str | None = None

    @property
    def setting(self) -> str:
        if self.theta is not None:
            return "learnable" if self.theta == "learnable" else f"theta={float(self.theta):.1f}"
        return SETTING_LABELS.get(self.corruption or "none", str(self.corruption))

    def problem(self) -> str | None:
        """Why the cell cannot run, or None."""
        if self.version in ("v1", "v2", "v3", "v2-brain", "v2-rec-brain") and self.theta is not None:
            return f"θ undefined for {self.version}"
        if self.version == "v4" and self.corruption not in (None, "none"):
            return "corruption undefined for v4"
        if self.version == "v4" and self.theta is None:
            return "v4 requires θ"
        return None


def sweep_grid(versions=("v1", "v2", "v3", "v4")) -> list[SweepCell]:
    """3 corruptions per L for v1-v3 and 6 θ settings per L for v4 over the seven sharing schemes."""
    cells = []
    for v in versions:
        for shared in C.SHARING_SCHEMES:
            if v == "v4":
                cells += [SweepCell(v, shared, theta=t) for t in C.THETA_SETTINGS]
            else:
                cells += [SweepCell(v, shared, corruption=c) for c in C.CORRUPTIONS]
    return cells


SWEEP_FIELDS = ("version", "shared", "setting", "corruption", "theta", "seed", "status", "reason",
                "dice", "fpv_ml", "fnv_ml", "history_path", "checkpoint_path")


def cell_config(base: TrainConfig, cell: SweepCell, seed: int) -> TrainConfig:
    flat = C.to_flat(base)
    flat.update({"model.version": cell.version, "model.shared": sorted(cell.shared),
                 "model.theta": cell.theta, "corruption": cell.corruption or "none",
                 "seed": seed, "model.seed": seed})
    return C.from_flat(flat)


def cell_row(cell: SweepCell, seed: int) -> dict:
    """Sweep row skeleton; skipped cells carry their reason."""
    row = {"version": cell.version, "shared": C.format_shared(cell.shared), "setting": cell.setting,
           "corruption": cell.corruption or "", "theta": "" if cell.theta is None else cell.theta,
           "seed": seed, "status": "ok", "reason": "", "dice": "", "fpv_ml": "", "fnv_ml": "",
           "history_path": "", "checkpoint_path": ""}
    reason = cell.problem()
    if reason:
        row.update(status="skipped", reason=reason)
    return row


def run_cell(base: TrainConfig, cell: SweepCell, seed: int, train_set, test_set, out_dir=None) -> dict:
    row = cell_row(cell, seed)
    if row["status"] == "skipped":
        return row
    cfg = cell_config(base, cell, seed)
    tag = f"{cell.version}_L{'-'.join(map(str, sorted(cell.shared)))}_{cell.setting.replace(' ', '').replace('+', '_')}_s{seed}"
    hist_path = ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        hist_path, ckpt_path = out_dir / f"{tag}_history.csv", out_dir / f"{tag}.npz"
    ckpt, _ = train_model(cfg, train_set, history_path=hist_path)
    agg, _ = evaluate_model(ckpt, test_set)
    if ckpt_path is not None:
        ckpt.save(ckpt_path)
    row.update(dice=agg.dice, fpv_ml=agg.fpv_ml, fnv_ml=agg.fnv_ml,
               history_path=str(hist_path or ""), checkpoint_path=str(ckpt_path or ""))
    return row


def run_sweep(base_cfg: TrainConfig, grid, train_set, test_set, out_dir=None, seeds=None,
              csv_path=None, runner=None) -> list[dict]:
    """One row per (cell, seed); incompatible cells become 'skipped' rows with a reason.

    ``runner`` replaces the train-and-evaluate step (signature of ``run_cell``).
    """
    runner = runner or run_cell
    seeds = list(seeds) if seeds is not None else [base_cfg.seed]
    rows = []
    for cell in grid:
        for s in seeds:
            row = cell_row(cell, s)
            if row["status"] == "skipped":
                log.warning("skipping %s %s %s: %s", cell.version, row["shared"], cell.setting, row["reason"])
            else:
                row = runner(base_cfg, cell, s, train_set, test_set, out_dir)
            rows.append(row)
    if csv_path is not None:
        write_sweep_csv(rows, csv_path)
    return rows


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        w.writerows(rows)
