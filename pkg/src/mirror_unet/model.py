"""Twin-branch 3D U-Net with tied stages, a skip-free bottleneck decoder and a bottleneck classifier.

Stage layout of one branch (indices are the shareable stages)::

    1  stem, stride 1                 (full resolution)
    2  down block, stride 2           (1/2)
    3  down block, stride 2           (1/4)
    4  down block, stride 2           (1/8)
    5  bottleneck block, stride 2     (1/16)
    6  up x2 + skip from stage 4      (1/8)
    7  up x2 + skip from stage 3      (1/4)
    8  up x2 + skip from stage 2      (1/2)
    head: up x2 + skip from stage 1, 1x1x1 projection (not shareable)

Tying is done by storage: the module object of branch A is installed in branch B.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import BTL_VERSIONS, ConfigError, ModelConfig, parse_shared

N_STAGES = 8


def _norm(channels: int) -> nn.GroupNorm:
    # groups of 8 channels; well defined even at 1^3 spatial size
    return nn.GroupNorm(max(1, channels // 8), channels)


class ConvBlock(nn.Module):
    """Two 3x3x3 convolutions with GroupNorm and SiLU; the first carries the stride."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm1 = _norm(out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.norm2 = _norm(out_ch)

    def forward(self, x):
        x = F.silu(self.norm1(self.conv1(x)))
        return F.silu(self.norm2(self.conv2(x)))


class UpBlock(nn.Module):
    """x2 transposed convolution (kernel 3, stride 2), optional skip concatenation, ConvBlock."""

    def __init__(self, in_ch: int, out_ch: int, skip_ch: int = 0):
        super().__init__()
        self.up = nn.ConvTranspose3d(in_ch, out_ch, 3, stride=2, padding=1, output_padding=1)
        self.block = ConvBlock(out_ch + skip_ch, out_ch)
        self.skip_ch = skip_ch

    def forward(self, x, skip=None):
        x = self.up(x)
        if self.skip_ch:
            x = torch.cat([x, skip], dim=1)
        return self.block(x)


class OutputHead(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, n_out: int, skip_ch: int = 0):
        super().__init__()
        self.up = UpBlock(in_ch, out_ch, skip_ch)
        self.proj = nn.Conv3d(out_ch, n_out, 1)

    def forward(self, x, skip=None):
        return self.proj(self.up(x, skip))


class Branch(nn.Module):
    """One modality-specific U-Net: stages 1-5 encode, stages 6-8 plus head decode."""

    def __init__(self, widths, in_ch: int = 1, n_out: int = 1):
        super().__init__()
        w0, w1, w2, w3, w4 = widths
        self.stage1 = ConvBlock(in_ch, w0)
        self.stage2 = ConvBlock(w0, w1, stride=2)
        self.stage3 = ConvBlock(w1, w2, stride=2)
        self.stage4 = ConvBlock(w2, w3, stride=2)
        self.stage5 = ConvBlock(w3, w4, stride=2)
        self.stage6 = UpBlock(w4, w3, skip_ch=w3)
        self.stage7 = UpBlock(w3, w2, skip_ch=w2)
        self.stage8 = UpBlock(w2, w1, skip_ch=w1)
        self.head = OutputHead(w1, w0, n_out, skip_ch=w0)

    def stage(self, idx: int) -> nn.Module:
        return getattr(self, f"stage{idx}")

    def encode(self, x):
        s1 = self.stage1(x)
        s2 = self.stage2(s1)
        s3 = self.stage3(s2)
        s4 = self.stage4(s3)
        s5 = self.stage5(s4)
        return s5, (s1, s2, s3, s4)

    def decode(self, z, skips):
        s1, s2, s3, s4 = skips
        x = self.stage6(z, s4)
        x = self.stage7(x, s3)
        x = self.stage8(x, s2)
        return self.head(x, s1)

    def forward(self, x):
        z, skips = self.encode(x)
        return self.decode(z, skips)


class BottleneckDecoder(nn.Module):
    """Mirror of stages 6-8 and the head with the skip inputs removed and input width doubled."""

    def __init__(self, widths, n_out: int = 1):
        super().__init__()
        w0, w1, w2, w3, w4 = widths
        self.stage6 = UpBlock(2 * w4, w3)
        self.stage7 = UpBlock(w3, w2)
        self.stage8 = UpBlock(w2, w1)
        self.head = OutputHead(w1, w0, n_out)

    def forward(self, z):
        return self.head(self.stage8(self.stage7(self.stage6(z))))


class TumorClassifier(nn.Module):
    """Global average pooling, one hidden layer of width 64, one logit."""

    def __init__(self, in_ch: int, hidden: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(in_ch, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, z):
        if z.shape[1] != self.fc1.in_features:
            raise ValueError(f"classifier expects {self.fc1.in_features} channels, got {z.shape[1]}")
        h = z.mean(dim=(2, 3, 4))
        return self.fc2(F.silu(self.fc1(h))).squeeze(1)


@dataclass
class BranchOutputs:
    out_A: torch.Tensor
    out_B: torch.Tensor
    out_btl: torch.Tensor | None = None
    class_logit: torch.Tensor | None = None


def branch_out_channels(version: str) -> tuple[int, int]:
    # v2-rec-brain segments edema / core / whole tumor in branch B
    return (1, 3) if version == "v2-rec-brain" else (1, 1)


class MirrorUNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        widths = config.stage_widths
        n_a, n_b = branch_out_channels(config.version)
        self.branchA = Branch(widths, n_out=n_a)
        self.branchB = Branch(widths, n_out=n_b)
        self.tied = frozenset(config.shared)
        for idx in sorted(self.tied):
            setattr(self.branchB, f"stage{idx}", self.branchA.stage(idx))
        self.btl_decoder = BottleneckDecoder(widths) if config.version in BTL_VERSIONS else None
        self.classifier = TumorClassifier(2 * widths[4]) if config.version == "v3" else None
        if config.version == "v4" and config.learnable_theta:
            # theta = logistic(rho), starting at 0.25
            self.theta_logit = nn.Parameter(torch.tensor(math.log(0.25 / 0.75)))
        else:
            self.theta_logit = None

    @property
    def version(self) -> str:
        return self.config.version

    def theta(self) -> torch.Tensor | float:
        if self.theta_logit is not None:
            return torch.sigmoid(self.theta_logit)
        return float(self.config.theta)

    def encode_pair(self, x_A, x_B):
        if x_A.shape != x_B.shape:
            raise ValueError(f"shape mismatch between inputs: {tuple(x_A.shape)} vs {tuple(x_B.shape)}")
        z_A, skips_A = self.branchA.encode(x_A)
        z_B, skips_B = self.branchB.encode(x_B)
        return (z_A, skips_A), (z_B, skips_B)

    def forward(self, x_A, x_B) -> BranchOutputs:
        (z_A, skips_A), (z_B, skips_B) = self.encode_pair(x_A, x_B)
        out = BranchOutputs(self.branchA.decode(z_A, skips_A), self.branchB.decode(z_B, skips_B))
        if self.btl_decoder is not None or self.classifier is not None:
            shared = torch.cat([z_A, z_B], dim=1)
            if self.btl_decoder is not None:
                out.out_btl = self.btl_decoder(shared)
            if self.classifier is not None:
                out.class_logit = self.classifier(shared)
        return out

    def shared_representation(self, x_A, x_B):
        (z_A, _), (z_B, _) = self.encode_pair(x_A, x_B)
        return torch.cat([z_A, z_B], dim=1)

    def stage_pairs(self):
        for idx in range(1, N_STAGES + 1):
            yield idx, self.branchA.stage(idx), self.branchB.stage(idx)

    def check_tying(self) -> bool:
        """True iff every tied stage shares storage across branches (and untied ones do not)."""
        for idx, a, b in self.stage_pairs():
            same = all(pa.data_ptr() == pb.data_ptr() for pa, pb in zip(a.parameters(), b.parameters()))
            if (idx in self.tied) != same:
                return False
        return True


def build_model(config: ModelConfig) -> MirrorUNet:
    parse_shared(config.shared)
    config.validate()
    torch.manual_seed(config.seed)
    return MirrorUNet(config)


def forward(model: MirrorUNet, x_A, x_B, version: str | None = None) -> BranchOutputs:
    if version is not None and version != model.version:
        raise ConfigError(f"model built for {model.version}, asked to run {version}")
    return model(x_A, x_B)


def shared_representation(model: MirrorUNet, x_A, x_B):
    return model.shared_representation(x_A, x_B)


def fuse_logits(ct_logits, pet_logits, theta):
    """Weighted sum (1 - theta) * pet + theta * ct."""
    if ct_logits.shape != pet_logits.shape:
        raise ValueError(f"shape mismatch: {tuple(ct_logits.shape)} vs {tuple(pet_logits.shape)}")
    if not torch.is_tensor(theta) and not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta {theta} outside [0, 1]")
    return (1 - theta) * pet_logits + theta * ct_logits


def classify(model: MirrorUNet, shared_rep):
    if model.classifier is None:
        raise ConfigError("model has no classifier (only v3 carries one)")
    return torch.sigmoid(model.classifier(shared_rep))


def count_parameters(module: nn.Module) -> int:
    """Unique trainable parameters; tied storage counted once."""
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------- checkpoints

def state_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    """Flat map of stage-qualified names to little-endian float32 arrays.

    Tied stages appear under both branch names (e.g. ``branchA.stage5.conv1.weight`` and
    ``branchB.stage5.conv1.weight``) with identical contents.
    """
    return {k: v.detach().cpu().numpy().astype("<f4") for k, v in model.state_dict().items()}


def load_state_arrays(model: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(np.asarray(v, dtype=np.float32)) for k, v in arrays.items()}
    model.load_state_dict(state)
