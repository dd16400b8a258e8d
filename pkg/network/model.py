import logging
from dataclasses import dataclass, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from autograd import ops
from autograd.tensor import Tensor
from errors import ArchitectureMismatchError, ShapeError
from models.mobility import Batch
from network.embedding import EmbeddingConfig, EmbeddingTables
from network.encoder import Encoder, EncoderConfig, encode, prepend_cls
from network.layers import Module
from network.moe import MoEConfig, MoEHead, MoEOutput, predict_logits

logger = logging.getLogger(__name__)

LOCATION_PARAM = "embedding.location"


@dataclass(frozen=True)
class ModelConfig:
    """Every dimension and structural switch of the network, flat."""

    grid_size: int = 200
    total_days: int = 75
    max_positions: int = 241
    e_day: int = 8
    e_time: int = 8
    e_dow: int = 8
    e_weekend: int = 4
    e_loc: int = 32
    use_position_embedding: bool = False
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 0
    dropout: float = 0.1
    post_norm: bool = False
    use_cls: bool = False
    num_experts: int = 8
    top_k: int = 2
    expert_dim: int = 0
    moe_residual: bool = True
    moe_aux_weight: float = 0.0

    @staticmethod
    def from_run_config(cfg) -> "ModelConfig":
        values = {f.name: getattr(cfg, f.name) for f in fields(ModelConfig) if hasattr(cfg, f.name)}
        values["max_positions"] = cfg.history_len + cfg.horizon + 1
        return ModelConfig(**values)

    def embedding_config(self) -> EmbeddingConfig:
        return EmbeddingConfig(
            grid_size=self.grid_size,
            hidden=self.hidden,
            e_day=self.e_day,
            e_time=self.e_time,
            e_dow=self.e_dow,
            e_weekend=self.e_weekend,
            e_loc=self.e_loc,
            n_days=self.total_days,
            use_position_embedding=self.use_position_embedding,
            max_positions=self.max_positions,
        )

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            layers=self.layers,
            hidden=self.hidden,
            heads=self.heads,
            ffn_dim=self.ffn_dim,
            dropout=self.dropout,
            post_norm=self.post_norm,
        )

    def moe_config(self) -> MoEConfig:
        return MoEConfig(
            hidden=self.hidden,
            num_experts=self.num_experts,
            top_k=self.top_k,
            expert_dim=self.expert_dim,
            residual=self.moe_residual,
            aux_weight=self.moe_aux_weight,
        )

    def to_metadata(self) -> Dict[str, str]:
        out: Dict[str, str] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                out[f.name] = "1" if value else "0"
            elif isinstance(value, float):
                out[f.name] = repr(value)
            else:
                out[f.name] = str(value)
        return out

    @staticmethod
    def from_metadata(metadata: Dict[str, str]) -> "ModelConfig":
        values = {}
        for f in fields(ModelConfig):
            if f.name not in metadata:
                raise ArchitectureMismatchError({f.name: ("missing", "required")})
            raw = metadata[f.name]
            if f.type in (bool, "bool"):
                values[f.name] = raw == "1"
            elif f.type in (float, "float"):
                values[f.name] = float(raw)
            else:
                values[f.name] = int(raw)
        return ModelConfig(**values)


# Train-time knobs that may change between pretraining and finetuning.
NON_ARCHITECTURE_KEYS = ("dropout", "moe_aux_weight")


def architecture_differences(checkpoint: ModelConfig, config: ModelConfig) -> Dict[str, Tuple[str, str]]:
    diffs: Dict[str, Tuple[str, str]] = {}
    for f in fields(ModelConfig):
        if f.name in NON_ARCHITECTURE_KEYS:
            continue
        a, b = getattr(checkpoint, f.name), getattr(config, f.name)
        if a != b:
            diffs[f.name] = (str(a), str(b))
    return diffs


class STMoEBert(Module):
    """Spatial-temporal embedding, bidirectional encoder and the MoE location head."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.embedding = self.add_child("embedding", EmbeddingTables(config.embedding_config(), rng))
        self.encoder = self.add_child("encoder", Encoder(config.encoder_config(), rng))
        self.moe = self.add_child("moe", MoEHead(config.moe_config(), config.grid_size * config.grid_size, rng))

    @property
    def n_classes(self) -> int:
        return self.config.grid_size * self.config.grid_size

    def hidden_states(self, batch: Batch, *, mode: str = "eval", rng: Optional[np.random.Generator] = None) -> Tensor:
        """[B x T x H] encoder output aligned with the batch positions (CLS row dropped)."""
        x = self.embedding.embed_batch(batch)
        attn_mask = batch.attention_mask
        if self.config.use_cls:
            x, attn_mask = prepend_cls(x, attn_mask, self.embedding.embed_cls(len(batch)))
        hidden = encode(self.encoder, x, attn_mask, mode=mode, rng=rng)
        if self.config.use_cls:
            b, t, h = hidden.shape
            hidden = ops.index(hidden, (slice(None), slice(1, t)))
        return hidden

    def head_rows(
        self,
        batch: Batch,
        positions: np.ndarray,
        *,
        mode: str = "eval",
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        """Encoder states [N x H] at the selected positions ([B x T] bool), in row-major order."""
        positions = np.asarray(positions, dtype=bool)
        if positions.shape != batch.tokens.shape:
            raise ShapeError(f"position mask {positions.shape} vs batch {batch.tokens.shape}")
        hidden = self.hidden_states(batch, mode=mode, rng=rng)
        b, t, h = hidden.shape
        return ops.index(ops.reshape(hidden, (b * t, h)), np.flatnonzero(positions.ravel()))

    def logits_at(
        self,
        batch: Batch,
        positions: np.ndarray,
        *,
        mode: str = "eval",
        rng: Optional[np.random.Generator] = None,
    ) -> MoEOutput:
        """Logits [N x G^2] for the selected positions."""
        return predict_logits(self.head_rows(batch, positions, mode=mode, rng=rng), self.moe)

    def sequence_logits(self, batch: Batch) -> Tensor:
        """Logits for every position: [B x T x G^2]."""
        out = self.logits_at(batch, np.ones(batch.tokens.shape, dtype=bool))
        return ops.reshape(out.output, (len(batch), batch.seq_len, self.n_classes))

    def parameter_groups(self, phase: str) -> Dict[str, List[Tuple[str, Tensor]]]:
        """Finetuning splits the location table from everything else; other phases use one group."""
        named = list(self.named_parameters())
        if phase != "finetune":
            return {"all": named}
        return {
            "location": [(n, p) for n, p in named if n == LOCATION_PARAM],
            "base": [(n, p) for n, p in named if n != LOCATION_PARAM],
        }


def build_model(config: ModelConfig, seed: int) -> STMoEBert:
    model = STMoEBert(config, np.random.default_rng(seed))
    logger.debug("Model built parameters=%s experts=%s", model.parameter_count(), config.num_experts)
    return model
