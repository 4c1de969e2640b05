"""Segmentation, reconstruction and classification losses and their per-version composition."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .config import LossWeights
from .model import BranchOutputs, fuse_logits

DICE_EPS = 1e-5


def _check_binary(t: torch.Tensor, what: str) -> None:
    if not torch.all((t == 0) | (t == 1)):
        raise ValueError(f"{what} must contain only 0 and 1")


def soft_dice_loss(pred_logits, target, eps: float = DICE_EPS):
    p = torch.sigmoid(pred_logits)
    inter = (p * target).sum()
    return 1.0 - (2.0 * inter + eps) / (p.sum() + target.sum() + eps)


def dice_ce_loss(pred_logits, target_mask):
    """Soft Dice loss (sigmoid probabilities, smoothed by 1e-5) plus voxel-mean BCE."""
    if pred_logits.shape != target_mask.shape:
        raise ValueError(f"shape mismatch: {tuple(pred_logits.shape)} vs {tuple(target_mask.shape)}")
    _check_binary(target_mask, "target mask")
    target = target_mask.to(pred_logits.dtype)
    bce = F.binary_cross_entropy_with_logits(pred_logits, target)
    return soft_dice_loss(pred_logits, target) + bce


def mse_loss(recon, target):
    if recon.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(recon.shape)} vs {tuple(target.shape)}")
    return torch.mean((recon - target) ** 2)


def bce_label_loss(class_logit, c):
    c = torch.as_tensor(c, dtype=torch.as_tensor(class_logit).dtype)
    _check_binary(c, "class label")
    class_logit = torch.as_tensor(class_logit, dtype=c.dtype)
    return F.binary_cross_entropy_with_logits(class_logit, c.expand_as(class_logit))


def _scalar(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


COMPONENTS = ("seg", "rec_branch", "rec_btl", "seg_btl", "class_term")


@dataclass
class LossBreakdown:
    """Total loss plus unweighted components; absent components are zero and not in ``present``."""

    total: torch.Tensor
    seg: torch.Tensor | float = 0.0
    rec_branch: torch.Tensor | float = 0.0
    rec_btl: torch.Tensor | float = 0.0
    seg_btl: torch.Tensor | float = 0.0
    class_term: torch.Tensor | float = 0.0
    present: frozenset = field(default_factory=frozenset)

    def row(self) -> dict[str, float]:
        out = {"total": _scalar(self.total)}
        out.update({k: _scalar(getattr(self, k)) for k in COMPONENTS})
        return out


def _require(outputs: BranchOutputs, *names: str, version: str) -> None:
    for n in names:
        if getattr(outputs, n) is None:
            raise ValueError(f"{version} requires output {n!r}")


def version_loss(version: str, outputs: BranchOutputs, batch: dict, weights: LossWeights,
                 phi_target=None, theta=None) -> LossBreakdown:
    """Compose the per-version training loss.

    ``batch`` holds tensors ``x_A``, ``x_B``, ``y`` (N,1,...) and ``c`` (N,) for the
    PET/CT versions; the brain versions read ``edema``, ``core`` and ``whole`` masks.
    ``phi_target`` is the clean branch-A input used as reconstruction target (defaults
    to ``batch["x_A"]``). ``theta`` is only read by v4.
    """
    w = weights
    x_A = batch["x_A"] if phi_target is None else phi_target
    if version in ("v1", "v2", "v3"):
        _require(outputs, "out_A", "out_B", version=version)
        rec = mse_loss(outputs.out_A, x_A)
        seg = dice_ce_loss(outputs.out_B, batch["y"])
        total = w.lambda_rec * rec + w.lambda_seg * seg
        parts = dict(seg=seg, rec_branch=rec)
        if version in ("v2", "v3"):
            _require(outputs, "out_btl", version=version)
            rec_btl = mse_loss(outputs.out_btl, batch["x_B"])
            total = total + w.lambda_rec * rec_btl
            parts["rec_btl"] = rec_btl
        if version == "v3":
            _require(outputs, "class_logit", version=version)
            cls = bce_label_loss(outputs.class_logit, batch["c"])
            total = total + w.lambda_class * cls
            parts["class_term"] = cls
        return LossBreakdown(total, present=frozenset(parts), **parts)
    if version == "v4":
        _require(outputs, "out_A", "out_B", version=version)
        if theta is None:
            raise ValueError("v4 requires theta")
        seg = dice_ce_loss(fuse_logits(outputs.out_A, outputs.out_B, theta), batch["y"])
        return LossBreakdown(seg, seg=seg, present=frozenset({"seg"}))
    if version == "v2-brain":
        _require(outputs, "out_A", "out_B", "out_btl", version=version)
        seg = dice_ce_loss(outputs.out_A, batch["edema"]) + dice_ce_loss(outputs.out_B, batch["core"])
        seg_btl = dice_ce_loss(outputs.out_btl, batch["whole"])
        total = w.lambda_seg * seg + w.lambda_seg * seg_btl
        return LossBreakdown(total, seg=seg, seg_btl=seg_btl, present=frozenset({"seg", "seg_btl"}))
    if version == "v2-rec-brain":
        _require(outputs, "out_A", "out_B", "out_btl", version=version)
        rec = mse_loss(outputs.out_A, x_A)
        targets = torch.cat([batch["edema"], batch["core"], batch["whole"]], dim=1)
        seg = sum(dice_ce_loss(outputs.out_B[:, k:k + 1], targets[:, k:k + 1]) for k in range(3)) / 3
        rec_btl = mse_loss(outputs.out_btl, batch["x_B"])
        total = w.lambda_rec * rec + w.lambda_seg * seg + w.lambda_rec * rec_btl
        return LossBreakdown(total, seg=seg, rec_branch=rec, rec_btl=rec_btl,
                             present=frozenset({"seg", "rec_branch", "rec_btl"}))
    raise ValueError(f"unknown version {version!r}")
