"""Configuration dataclasses and the flat key/value config schema.

Config files are TOML with dotted keys, e.g.::

    seed = 0
    epochs = 30
    model.version = "v3"
    model.shared = [5]
    weights.lambda_rec = 1e-4

The same dotted names are accepted as ``--key=value`` command-line overrides.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any

VERSIONS = ("v1", "v2", "v3", "v4", "v2-brain", "v2-rec-brain")
BRAIN_VERSIONS = ("v2-brain", "v2-rec-brain")
# versions whose branch A reconstructs its own (possibly corrupted) input
RECON_VERSIONS = ("v1", "v2", "v3", "v2-rec-brain")
BTL_VERSIONS = ("v2", "v3", "v2-brain", "v2-rec-brain")
CORRUPTIONS = ("none", "noise", "shuffle")
BASELINE_KINDS = ("unimodal_ct", "unimodal_pet", "early_fusion", "middle_fusion", "late_fusion_base")
LATE_FUSION_MODES = ("logit_sum", "union", "intersection")

# the seven sharing schemes compared column-by-column in the weight-sharing study
SHARING_SCHEMES = (
    frozenset({3}),
    frozenset({4}),
    frozenset({5}),
    frozenset({6}),
    frozenset({7}),
    frozenset({4, 5, 6}),
    frozenset({3, 4, 5, 6, 7}),
)
THETA_SETTINGS = (0.1, 0.2, 0.3, 0.4, 0.5, "learnable")


class ConfigError(ValueError):
    """Raised for any invalid configuration value or key."""


def parse_shared(value: Any) -> frozenset[int]:
    """Accept ``5``, ``"4,5,6"``, ``"{4, 5}"``, ``[4, 5]`` or ``""`` (no sharing)."""
    if isinstance(value, (set, frozenset, list, tuple)):
        items = list(value)
    elif isinstance(value, int):
        items = [value]
    elif isinstance(value, str):
        text = value.strip().strip("{}[]() ")
        items = [t for t in text.replace(";", ",").split(",") if t.strip()]
    else:
        raise ConfigError(f"cannot interpret shared stages from {value!r}")
    try:
        idx = frozenset(int(i) for i in items)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cannot interpret shared stages from {value!r}") from exc
    bad = sorted(i for i in idx if not 1 <= i <= 8)
    if bad:
        raise ConfigError(f"invalid stage index {bad[0]}: shared stages must lie in 1..8")
    return idx


def format_shared(shared: frozenset[int]) -> str:
    return "{" + ",".join(str(i) for i in sorted(shared)) + "}"


@dataclass
class ModelConfig:
    version: str = "v3"
    shared: frozenset = frozenset({5})
    theta: float | str | None = None
    stage_widths: tuple = (16, 32, 64, 128, 256)
    in_patch: tuple = (96, 96, 96)
    spacing: tuple = (2.0, 2.0, 3.0)
    seed: int = 0

    def __post_init__(self):
        self.shared = parse_shared(self.shared)
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        self.in_patch = tuple(int(p) for p in self.in_patch)
        self.spacing = tuple(float(s) for s in self.spacing)
        if isinstance(self.theta, str) and self.theta != "learnable":
            self.theta = float(self.theta)
        self.validate()

    def validate(self) -> None:
        if self.version not in VERSIONS:
            raise ConfigError(f"unknown version {self.version!r}; expected one of {VERSIONS}")
        if len(self.stage_widths) != 5 or any(w < 1 for w in self.stage_widths):
            raise ConfigError("stage_widths must be 5 positive channel counts")
        if len(self.in_patch) != 3 or any(p < 16 or p % 16 for p in self.in_patch):
            raise ConfigError(f"patch {self.in_patch} not divisible by 16")
        if self.version == "v4":
            if self.theta is None:
                self.theta = 0.25
            if self.theta != "learnable" and not 0.0 <= float(self.theta) <= 1.0:
                raise ConfigError(f"theta {self.theta} outside [0, 1]")
        elif self.theta is not None:
            raise ConfigError(f"theta undefined for {self.version}")

    @property
    def learnable_theta(self) -> bool:
        return self.theta == "learnable"


@dataclass
class LossWeights:
    lambda_rec: float = 1e-4
    lambda_seg: float = 0.5
    lambda_class: float = 1e-3

    def __post_init__(self):
        for name in ("lambda_rec", "lambda_seg", "lambda_class"):
            v = float(getattr(self, name))
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")
            setattr(self, name, v)


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-3
    weight_decay: float = 1e-6
    batch_size: int = 4
    epochs: int = 400
    corruption: str = "none"
    noise_sigma: float = 0.1
    shuffle_edge: int = 16
    p_fg: float = 2 / 3
    seed: int = 0
    baseline: str | None = None
    late_fusion_mode: str = "logit_sum"
    max_steps: int | None = None
    tie_check_every: int = 1
    overlap: float = 0.5

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.corruption not in CORRUPTIONS:
            raise ConfigError(f"unknown corruption {self.corruption!r}")
        if self.baseline is not None and self.baseline not in BASELINE_KINDS:
            raise ConfigError(f"unknown baseline kind {self.baseline!r}")
        if self.late_fusion_mode not in LATE_FUSION_MODES:
            raise ConfigError(f"unknown late fusion mode {self.late_fusion_mode!r}")
        if not 0.0 <= self.p_fg <= 1.0:
            raise ConfigError("p_fg must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")


# ---------------------------------------------------------------- flat schema

def to_flat(cfg) -> dict[str, Any]:
    """Flatten a (nested) config dataclass into dotted keys with JSON-able values."""
    out: dict[str, Any] = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            out.update({f"{f.name}.{k}": x for k, x in to_flat(v).items()})
        elif isinstance(v, frozenset):
            out[f.name] = sorted(v)
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = v
    return out


def _field_types(cls) -> dict[str, Any]:
    hints = {}
    for f in dataclasses.fields(cls):
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        hints[f.name] = default
    return hints


def _coerce(key: str, raw: Any, default: Any) -> Any:
    """Coerce a raw value (string from the CLI or TOML-typed) following the default's type."""
    if key.endswith("shared"):
        return parse_shared(raw)
    if key.endswith("theta"):
        if raw in (None, "", "none", "None"):
            return None
        if raw == "learnable":
            return raw
        try:
            return float(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: expected a real or 'learnable', got {raw!r}") from exc
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        if str(raw).lower() in ("1", "true", "yes"):
            return True
        if str(raw).lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        items = raw if isinstance(raw, (list, tuple)) else str(raw).strip("[]() ").split(",")
        kind = float if default and isinstance(default[0], float) else int
        try:
            return tuple(kind(i) for i in items)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: expected a list of {kind.__name__}, got {raw!r}") from exc
    if isinstance(default, float) or key in ("p_fg",):
        try:
            return float(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: expected a real, got {raw!r}") from exc
    if isinstance(default, int) or key in ("max_steps",):
        if raw in (None, "", "none", "None") and key == "max_steps":
            return None
        try:
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError
            return int(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from exc
    if key == "baseline" and raw in ("", "none", "None"):
        return None
    return raw if not isinstance(raw, str) else raw.strip()


def from_flat(flat: dict[str, Any]) -> TrainConfig:
    """Build a TrainConfig from dotted keys, rejecting unknown keys."""
    top = _field_types(TrainConfig)
    sub = {"model": _field_types(ModelConfig), "weights": _field_types(LossWeights)}
    kw: dict[str, Any] = {}
    nested: dict[str, dict[str, Any]] = {"model": {}, "weights": {}}
    for key, raw in flat.items():
        head, _, rest = key.partition(".")
        if rest:
            if head not in sub or rest not in sub[head]:
                raise ConfigError(f"unknown config key {key!r}")
            nested[head][rest] = _coerce(key, raw, sub[head][rest])
        else:
            if key not in top or key in sub:
                raise ConfigError(f"unknown config key {key!r}")
            kw[key] = _coerce(key, raw, top[key])
    return TrainConfig(model=ModelConfig(**nested["model"]), weights=LossWeights(**nested["weights"]), **kw)


def flatten_toml(data: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in data.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten_toml(v, key + "."))
        else:
            out[key] = v
    return out


def load_config_file(path) -> dict[str, Any]:
    import tomli

    with open(path, "rb") as fh:
        return flatten_toml(tomli.load(fh))


def config_to_json(cfg: TrainConfig | ModelConfig) -> str:
    return json.dumps(to_flat(cfg), sort_keys=True)


def model_config_from_flat(flat: dict[str, Any]) -> ModelConfig:
    kw = {k: _coerce(f"model.{k}", v, _field_types(ModelConfig)[k]) for k, v in flat.items()}
    return ModelConfig(**kw)
