"""Fusion baselines on the same U-Net backbone: unimodal, early, middle and late fusion."""
from __future__ import annotations

import torch
import torch.nn as nn

from .config import BASELINE_KINDS, ConfigError, ModelConfig
from .model import Branch, BranchOutputs, OutputHead, UpBlock


class UnimodalUNet(nn.Module):
    """Single branch fed with one modality; the other input is never touched."""

    def __init__(self, config: ModelConfig, modality: str):
        super().__init__()
        self.config = config
        self.modality = modality
        self.net = Branch(config.stage_widths, in_ch=1)

    def window_logits(self, x_A, x_B):
        return self.net(x_A if self.modality == "ct" else x_B)

    def forward(self, x_A, x_B) -> BranchOutputs:
        logits = self.window_logits(x_A, x_B)
        return BranchOutputs(out_A=None, out_B=logits)


class EarlyFusionUNet(nn.Module):
    """Single branch on the channel concatenation [CT, PET]."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.net = Branch(config.stage_widths, in_ch=2)

    def window_logits(self, x_A, x_B):
        return self.net(torch.cat([x_A, x_B], dim=1))

    def forward(self, x_A, x_B) -> BranchOutputs:
        return BranchOutputs(out_A=None, out_B=self.window_logits(x_A, x_B))


class MiddleFusionUNet(nn.Module):
    """Two encoders; concatenated stage-5 features go to one decoder whose skips are the
    average of the CT and PET skips."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        w0, w1, w2, w3, w4 = config.stage_widths
        self.enc_ct = Branch(config.stage_widths)
        self.enc_pet = Branch(config.stage_widths)
        # only the encoder stages of the two branches are used
        for enc in (self.enc_ct, self.enc_pet):
            for name in ("stage6", "stage7", "stage8", "head"):
                delattr(enc, name)
        self.stage6 = UpBlock(2 * w4, w3, skip_ch=w3)
        self.stage7 = UpBlock(w3, w2, skip_ch=w2)
        self.stage8 = UpBlock(w2, w1, skip_ch=w1)
        self.head = OutputHead(w1, w0, 1, skip_ch=w0)

    def window_logits(self, x_A, x_B):
        z_c, sk_c = self.enc_ct.encode(x_A)
        z_p, sk_p = self.enc_pet.encode(x_B)
        s1, s2, s3, s4 = [(a + b) / 2 for a, b in zip(sk_c, sk_p)]
        x = self.stage6(torch.cat([z_c, z_p], dim=1), s4)
        x = self.stage7(x, s3)
        x = self.stage8(x, s2)
        return self.head(x, s1)

    def forward(self, x_A, x_B) -> BranchOutputs:
        return BranchOutputs(out_A=None, out_B=self.window_logits(x_A, x_B))


class LateFusionPair(nn.Module):
    """Two unimodal U-Nets with disjoint parameters, combined at the decision level.

    Training sums the two segmentation losses; since no parameter is shared each model
    receives exactly the gradient of its own loss, i.e. independent training on the same
    batches.
    """

    def __init__(self, config: ModelConfig, fusion_mode: str = "logit_sum"):
        super().__init__()
        self.config = config
        self.fusion_mode = fusion_mode
        self.ct = UnimodalUNet(config, "ct")
        self.pet = UnimodalUNet(config, "pet")

    def window_logits(self, x_A, x_B):
        l_ct, l_pet = self.ct.window_logits(x_A, x_B), self.pet.window_logits(x_A, x_B)
        if self.fusion_mode == "logit_sum":
            return l_ct + l_pet
        return torch.cat([l_ct, l_pet], dim=1)

    def forward(self, x_A, x_B) -> BranchOutputs:
        return BranchOutputs(out_A=self.ct.window_logits(x_A, x_B), out_B=self.pet.window_logits(x_A, x_B))


def build_baseline(kind: str, config: ModelConfig, fusion_mode: str = "logit_sum") -> nn.Module:
    if kind not in BASELINE_KINDS:
        raise ConfigError(f"unknown baseline kind {kind!r}")
    torch.manual_seed(config.seed)
    if kind == "unimodal_ct":
        model = UnimodalUNet(config, "ct")
    elif kind == "unimodal_pet":
        model = UnimodalUNet(config, "pet")
    elif kind == "early_fusion":
        model = EarlyFusionUNet(config)
    elif kind == "middle_fusion":
        model = MiddleFusionUNet(config)
    else:
        model = LateFusionPair(config, fusion_mode)
    model.kind = kind
    return model
