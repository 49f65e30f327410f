"""Architecture descriptions for HDCAM variants and their validation."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from ..errors import ConfigError

WINDOWS_MS = (150, 200, 250, 300)
POSITIONS = ("stage_end", "stage_begin")
MAX_BRANCHES = 4
MIN_CHANNELS_PER_BRANCH = 8


@dataclass(frozen=True)
class LedgerToggles:
    """Unstated architectural choices that change the parameter count.

    The defaults reproduce every published count exactly; see
    ``params.reconcile`` for the search that found them.
    """

    bias: bool = True            # biases on every conv / linear layer
    ln_affine: bool = True       # learnable gamma/beta on every LN
    expansion: int = 1           # pointwise hidden width = expansion * C
    layer_scale: bool = True     # per-channel learnable scale on residual branches
    final_norm: bool = True      # LN before global average pooling


@dataclass(frozen=True)
class ModelConfig:
    stage_channels: tuple[int, int, int]
    hdconv_counts: tuple[int, int, int] = (1, 2, 4)
    mhsatten_counts: tuple[int, int, int] = (0, 1, 1)
    scales: tuple[int, int, int] = (3, 4, 4)
    heads: tuple[int, int, int] = (3, 4, 4)
    mhsatten_position: str = "stage_end"
    hierarchical: bool = True
    num_classes: int = 17
    input_channels: int = 12
    window_ms: int = 300
    toggles: LedgerToggles = field(default_factory=LedgerToggles)
    name: str | None = None

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def effective_scales(self) -> tuple[int, int, int]:
        return self.scales if self.hierarchical else (1, 1, 1)

    def input_length(self, fs: float = 2000.0) -> int:
        return int(round(self.window_ms * fs / 1000.0))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("stage_channels", "hdconv_counts", "mhsatten_counts", "scales", "heads"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        if "stage_channels" not in d:
            raise ConfigError("model config needs stage_channels")
        toggles = d.pop("toggles", None) or {}
        if isinstance(toggles, dict):
            tknown = {f.name for f in dataclasses.fields(LedgerToggles)}
            bad = sorted(set(toggles) - tknown)
            if bad:
                raise ConfigError(f"unknown ledger toggle keys: {bad}")
            toggles = LedgerToggles(**toggles)
        for k in ("stage_channels", "hdconv_counts", "mhsatten_counts", "scales", "heads"):
            if k in d:
                try:
                    d[k] = tuple(int(v) for v in d[k])
                except (TypeError, ValueError):
                    raise ConfigError(f"{k} must be a list of integers, got {d[k]!r}") from None
        heads = d.get("heads")
        if heads is not None and len(heads) == 2:
            # [h2, h3] form: derive a stage-1 head count under the same rules
            c1 = d["stage_channels"][0]
            d["heads"] = (max(1, min(MAX_BRANCHES, c1 // MIN_CHANNELS_PER_BRANCH)),) + heads
        return cls(toggles=toggles, **d)


def _variant(name, channels, scales, heads) -> ModelConfig:
    return ModelConfig(stage_channels=channels, scales=scales, heads=heads, name=name)


# stage-1 heads only matter when an ablation puts attention there;
# they follow the same 8-per-head / max-4 rule as stages 2 and 3
VARIANTS: dict[str, ModelConfig] = {
    "XXSmall": _variant("XXSmall", (16, 24, 32), (2, 3, 4), (2, 3, 4)),
    "XSmall": _variant("XSmall", (24, 32, 48), (3, 4, 4), (3, 4, 4)),
    "Small": _variant("Small", (24, 32, 64), (3, 4, 4), (3, 4, 4)),
}

# published totals; XXSmall also appears as 20,686 in one place of the same source
PUBLISHED_PARAMS = {"XXSmall": 20689, "XSmall": 40281, "Small": 58441}
PUBLISHED_PARAMS_ALT = {"XXSmall": 20686}


def named_variant(variant: str, /, **overrides) -> ModelConfig:
    try:
        cfg = VARIANTS[variant]
    except KeyError:
        raise ConfigError(f"unknown variant {variant!r}; valid names: {', '.join(VARIANTS)}") from None
    return cfg.replace(**overrides) if overrides else cfg


def validate_config(cfg: ModelConfig) -> list[str]:
    """Every rule the config breaks, as readable strings. Empty means valid."""
    out: list[str] = []
    lists = {
        "stage_channels": cfg.stage_channels, "hdconv_counts": cfg.hdconv_counts,
        "mhsatten_counts": cfg.mhsatten_counts, "scales": cfg.scales, "heads": cfg.heads,
    }
    for k, v in lists.items():
        if len(v) != 3:
            out.append(f"{k} needs 3 entries (one per stage), got {len(v)}")
    if out:
        return out
    for i in range(3):
        st = f"stage {i + 1}"
        C = cfg.stage_channels[i]
        if C < 1:
            out.append(f"{st}: channels {C} must be positive")
            continue
        if cfg.hdconv_counts[i] < 0 or cfg.mhsatten_counts[i] < 0:
            out.append(f"{st}: encoder counts must be non-negative")
        for kind, n in (("scales", cfg.effective_scales()[i]), ("heads", cfg.heads[i])):
            unit = "branch" if kind == "scales" else "head"
            if n < 1:
                out.append(f"{st}: {kind} {n} must be >= 1")
                continue
            if n > MAX_BRANCHES:
                out.append(f"{st}: {kind} {n} > {MAX_BRANCHES} (at most four heads/branches)")
            if C % n:
                out.append(f"{st}: {C} channels not divisible by {kind} {n}")
            elif C // n < MIN_CHANNELS_PER_BRANCH:
                out.append(f"{st}: {C}/{n} = {C // n} < {MIN_CHANNELS_PER_BRANCH} channels per {unit}")
    if cfg.mhsatten_position not in POSITIONS:
        out.append(f"mhsatten_position {cfg.mhsatten_position!r} not in {POSITIONS}")
    if cfg.window_ms not in WINDOWS_MS:
        out.append(f"window_ms {cfg.window_ms} not in {WINDOWS_MS}")
    if cfg.num_classes < 2:
        out.append(f"num_classes {cfg.num_classes} must be >= 2")
    if cfg.input_channels < 1:
        out.append(f"input_channels {cfg.input_channels} must be >= 1")
    if cfg.toggles.expansion < 1:
        out.append(f"expansion {cfg.toggles.expansion} must be >= 1")
    return out


def require_valid(cfg: ModelConfig) -> ModelConfig:
    problems = validate_config(cfg)
    if problems:
        raise ConfigError("invalid model config: " + "; ".join(problems))
    return cfg
