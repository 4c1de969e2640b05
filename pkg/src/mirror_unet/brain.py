"""Brain-tumour variant: FLAIR / T1Gd branches, edema and core targets, whole-tumour union."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .inference import binarize, combine_brain_masks
from .model import BranchOutputs

EDEMA, CORE = 1, 2


@dataclass(frozen=True)
class BrainTaskAssignment:
    branch_A_task: str
    branch_B_task: str
    btl_task: str

    @classmethod
    def for_version(cls, version: str) -> BrainTaskAssignment:
        if version == "v2-brain":
            return cls("edema_seg", "core_seg", "whole_tumor_seg")
        if version == "v2-rec-brain":
            return cls("flair_recon", "all_class_seg", "t1gd_recon")
        raise ValueError(f"{version!r} is not a brain version")


def brain_targets(label_map):
    """(edema, core, whole) binary masks from a {0, 1: edema, 2: core} label map."""
    y = np.asarray(label_map)
    if not np.all(np.isin(y, (0, EDEMA, CORE))):
        raise ValueError("labels must lie in {0, 1, 2}")
    edema = (y == EDEMA).astype(np.uint8)
    core = (y == CORE).astype(np.uint8)
    return edema, core, (y >= EDEMA).astype(np.uint8)


def brain_final_mask(outputs: BranchOutputs, tau: float = 0.5) -> np.ndarray:
    """Union of the binarised edema (branch A) and core (branch B) predictions.

    The bottleneck whole-tumour output only regularises training and is not read here.
    """
    if outputs.out_A is None or outputs.out_B is None:
        raise ValueError("brain_final_mask needs both branch outputs")
    edema = binarize(torch.sigmoid(outputs.out_A).detach().cpu().numpy(), tau)
    core = binarize(torch.sigmoid(outputs.out_B).detach().cpu().numpy(), tau)
    return combine_brain_masks(core, edema)
