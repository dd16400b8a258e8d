import os
from typing import Dict, List, Literal, Mapping, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from errors import ConfigError, DataFileError

PHASES = ("pretrain", "finetune", "scratch")
# phase -> (base_lr, epochs); finetune location-embedding lr defaults to 10x base.
PHASE_DEFAULTS: Dict[str, Tuple[float, int]] = {
    "pretrain": (3e-4, 10),
    "finetune": (5e-5, 5),
    "scratch": (3e-4, 10),
}
LOC_LR_MULTIPLIER = 10.0


def load_config_file(path: str) -> Dict[str, str]:
    """
    Flat key=value loader.

    - Blank lines and `#` comments are ignored; optional quotes are stripped.
    - A non-empty line without `=` or a repeated key is a config error.
    """
    values: Dict[str, str] = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as exc:
        raise DataFileError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw_line in enumerate(lines, start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key}")
        if len(value) >= 2 and value[0] == value[-1] and value[0] in {"'", '"'}:
            value = value[1:-1]
        values[key] = value
    return values


def parse_overrides(items: Optional[List[str]]) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    return values


class RunConfig(BaseModel):
    """Every recognised config key; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = Field(7, description="master seed for init, batching, masking and dropout")
    city: str = Field("city", description="city label written into evaluation reports")

    grid_size: int = Field(200, ge=1, description="grid side G; location classes are G*G")
    first_weekday: int = Field(0, ge=0, le=6, description="day-of-week of day 0 (0 = Monday)")
    train_days: int = Field(60, ge=1, description="days [0, train_days) form the training split")
    total_days: int = Field(75, ge=2, description="number of days in a city file")
    history_len: int = Field(192, ge=0, description="history positions per forecast window")
    horizon: int = Field(48, ge=1, le=48, description="masked future slots per forecast window")
    min_observed: int = Field(1, ge=1, description="minimum observed target-day slots for a forecast window")
    history_from_test: bool = Field(True, description="allow earlier test-period days in forecast history")
    forecast_first_day: int = Field(4, ge=1, description="first target day of forecast training windows")
    heldout_fraction: float = Field(0.1, gt=0.0, lt=1.0, description="share of training days held out for best-checkpoint selection")

    e_day: int = Field(8, ge=1, description="day embedding size")
    e_time: int = Field(8, ge=1, description="time-slot embedding size")
    e_dow: int = Field(8, ge=1, description="day-of-week embedding size")
    e_weekend: int = Field(4, ge=1, description="weekend-flag embedding size")
    e_loc: int = Field(32, ge=1, description="location embedding size")
    use_position_embedding: bool = Field(False, description="add a learned positional embedding after the input projection")

    hidden: int = Field(64, ge=1, description="encoder hidden size H")
    layers: int = Field(2, ge=0, description="encoder layers L")
    heads: int = Field(4, ge=1, description="attention heads A (must divide hidden)")
    ffn_dim: int = Field(0, ge=0, description="encoder feed-forward inner size (0 = 4*hidden)")
    dropout: float = Field(0.1, ge=0.0, lt=1.0, description="dropout probability in train mode")
    post_norm: bool = Field(False, description="post-norm residual blocks instead of pre-norm")
    use_cls: bool = Field(False, description="prepend a CLS position to every sequence")

    num_experts: int = Field(8, ge=1, description="number of MoE experts K")
    top_k: int = Field(2, ge=1, description="experts kept per position")
    expert_dim: int = Field(0, ge=0, description="expert inner size (0 = 4*hidden)")
    moe_residual: bool = Field(True, description="residual connection around the MoE block")
    moe_aux_weight: float = Field(0.0, ge=0.0, description="importance-balancing loss coefficient")

    base_lr: Optional[float] = Field(None, ge=0.0, description="base learning rate (default per phase: 3e-4 pretrain/scratch, 5e-5 finetune)")
    loc_emb_lr: Optional[float] = Field(None, ge=0.0, description="finetune location-embedding learning rate (default 10*base_lr)")
    weight_decay: float = Field(1e-3, ge=0.0, description="decoupled weight decay")
    batch_size: int = Field(32, ge=1, description="examples per optimizer step")
    epochs: Optional[int] = Field(None, ge=0, description="epochs (default per phase: 10 pretrain/scratch, 5 finetune)")
    clip_norm: float = Field(1.0, gt=0.0, description="global gradient-norm clip")
    warmup_steps: int = Field(0, ge=0, description="linear learning-rate warmup steps (0 = constant)")
    mask_ratio: float = Field(0.15, description="share of MLM positions replaced by MASK")
    mlm_stride: int = Field(48, ge=1, description="stride between MLM windows")
    reset_loc_emb: bool = Field(False, description="re-initialise the location table before finetuning")
    prefetch: int = Field(2, ge=0, description="batches built ahead of the trainer (0 = inline)")

    geo_bleu_n: int = Field(3, ge=1, description="GEO-BLEU maximum n-gram")
    geo_bleu_beta: float = Field(0.5, description="GEO-BLEU distance decay")
    geo_bleu_weights: str = Field("", description="comma-separated n-gram weights (empty = uniform)")
    hf_day_type: Literal["dow", "weekend"] = Field("dow", description="HF keying: day-of-week or weekday/weekend")

    @model_validator(mode="after")
    def _check_consistency(self) -> "RunConfig":
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.top_k > self.num_experts:
            raise ValueError(f"top_k ({self.top_k}) exceeds num_experts ({self.num_experts})")
        if self.train_days >= self.total_days:
            raise ValueError("train_days must leave at least one test day")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask ratio must be positive and below 1")
        if self.geo_bleu_beta <= 0.0:
            raise ValueError("geo_bleu_beta must be positive")
        weights = self.geo_bleu_weight_list()
        if weights is not None and len(weights) != self.geo_bleu_n:
            raise ValueError("geo_bleu_weights needs one weight per n-gram order")
        return self

    def geo_bleu_weight_list(self) -> Optional[List[float]]:
        if not self.geo_bleu_weights.strip():
            return None
        return [float(w) for w in self.geo_bleu_weights.split(",")]

    def phase_lrs(self, phase: str) -> Tuple[float, float]:
        base_default, _ = PHASE_DEFAULTS[phase]
        base = base_default if self.base_lr is None else self.base_lr
        if phase != "finetune":
            return base, base
        loc = base * LOC_LR_MULTIPLIER if self.loc_emb_lr is None else self.loc_emb_lr
        return base, loc

    def phase_epochs(self, phase: str) -> int:
        return PHASE_DEFAULTS[phase][1] if self.epochs is None else self.epochs

    def replace(self, **changes) -> "RunConfig":
        try:
            return RunConfig.model_validate({**self.model_dump(), **changes})
        except ValidationError as exc:
            raise ConfigError(f"invalid config: {exc}") from exc


def build_run_config(path: Optional[str] = None, values: Optional[Mapping[str, str]] = None) -> RunConfig:
    merged: Dict[str, str] = {}
    if path:
        merged.update(load_config_file(path))
    merged.update(values or {})
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in exc.errors()
        )
        raise ConfigError(f"invalid config: {problems}") from exc


def full_scale_config() -> RunConfig:
    """Full-scale hyperparameters: 768 hidden, 12 layers, 16 heads, 8 experts."""
    return RunConfig(
        e_day=64,
        e_time=64,
        e_dow=64,
        e_weekend=32,
        e_loc=256,
        hidden=768,
        layers=12,
        heads=16,
        num_experts=8,
        top_k=2,
        dropout=0.1,
    )


def describe_keys() -> str:
    lines = ["config keys (key=value file or --set key=value):"]
    for name, info in RunConfig.model_fields.items():
        default = info.default
        lines.append(f"  {name} (default {default}): {info.description}")
    return "\n".join(lines)


def env_flag(name: str, default: bool = False) -> bool:
    value = os.getenv(name)
    if value is None:
        return default
    return value.strip().lower() in {"1", "true", "yes", "on"}
