from dataclasses import dataclass

import numpy as np

from autograd import ops
from autograd.tensor import Tensor
from models.mobility import SLOTS_PER_DAY, TOTAL_DAYS, Batch, SequenceExample, cls_id, collate, pad_id, vocab_size
from network.layers import Linear, Module, normal_init


@dataclass(frozen=True)
class EmbeddingConfig:
    grid_size: int = 200
    hidden: int = 64
    e_day: int = 8
    e_time: int = 8
    e_dow: int = 8
    e_weekend: int = 4
    e_loc: int = 32
    n_days: int = TOTAL_DAYS
    n_slots: int = SLOTS_PER_DAY
    use_position_embedding: bool = False
    max_positions: int = 241

    @property
    def concat_width(self) -> int:
        return self.e_day + self.e_time + self.e_dow + self.e_weekend + self.e_loc


class EmbeddingTables(Module):
    """Day, slot, day-of-week, weekend and location tables plus the input projection."""

    def __init__(self, config: EmbeddingConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.day = self.add_param("day", normal_init(rng, (config.n_days, config.e_day)))
        self.slot = self.add_param("slot", normal_init(rng, (config.n_slots, config.e_time)))
        self.day_of_week = self.add_param("day_of_week", normal_init(rng, (7, config.e_dow)))
        self.weekend = self.add_param("weekend", normal_init(rng, (2, config.e_weekend)))
        self.location = self.add_param("location", normal_init(rng, (vocab_size(config.grid_size), config.e_loc)))
        self.projection = self.add_child("projection", Linear(config.concat_width, config.hidden, rng))
        self.position = None
        if config.use_position_embedding:
            self.position = self.add_param("position", normal_init(rng, (config.max_positions, config.hidden)))
        self.freeze_pad()

    @property
    def pad_row(self) -> int:
        return pad_id(self.config.grid_size)

    def freeze_pad(self) -> None:
        """Keep the PAD location row at exactly zero, data and gradient."""
        self.location.data[self.pad_row] = 0.0
        if self.location.grad is not None:
            self.location.grad[self.pad_row] = 0.0

    def reset_location(self, rng: np.random.Generator) -> None:
        self.location.data[...] = normal_init(rng, self.location.shape)
        self.location.zero_grad()
        self.freeze_pad()

    def _lookup(self, tokens, day, slot, dow, weekend) -> Tensor:
        parts = [
            ops.embedding(self.day, day, field="day"),
            ops.embedding(self.slot, slot, field="slot"),
            ops.embedding(self.day_of_week, dow, field="day_of_week"),
            ops.embedding(self.weekend, weekend, field="weekend"),
            ops.embedding(self.location, tokens, field="location"),
        ]
        return self.projection(ops.concat(parts, axis=-1))

    def embed_batch(self, batch: Batch) -> Tensor:
        """[B x T] index arrays -> [B x T x H]."""
        out = self._lookup(batch.tokens, batch.day, batch.slot, batch.day_of_week, batch.weekend)
        if self.position is not None:
            # Position 0 belongs to the optional CLS row.
            out = ops.add(out, ops.embedding(self.position, np.arange(1, 1 + batch.seq_len), field="position"))
        return out

    def embed_cls(self, batch_size: int) -> Tensor:
        """CLS input rows [B x 1 x H]: CLS token with all temporal indices at 0."""
        zeros = np.zeros((batch_size, 1), dtype=np.int64)
        tokens = np.full((batch_size, 1), cls_id(self.config.grid_size), dtype=np.int64)
        out = self._lookup(tokens, zeros, zeros, zeros, zeros)
        if self.position is not None:
            out = ops.add(out, ops.embedding(self.position, np.zeros(1, dtype=np.int64), field="position"))
        return out


def init_tables(config: EmbeddingConfig, seed: int) -> EmbeddingTables:
    return EmbeddingTables(config, np.random.default_rng(seed))


def embed_sequence(example: SequenceExample, tables: EmbeddingTables) -> Tensor:
    """One example -> [T x H]."""
    batched = tables.embed_batch(collate([example]))
    return ops.reshape(batched, batched.shape[1:])
