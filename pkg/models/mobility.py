from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional

import numpy as np

from errors import RowError

SLOTS_PER_DAY = 48
TOTAL_DAYS = 75
TRAIN_DAYS = 60
HISTORY_LEN = 192
HORIZON = 48
SEQUENCE_LEN = HISTORY_LEN + HORIZON
IGNORE_TARGET = -1


def pad_id(grid_size: int) -> int:
    return grid_size * grid_size


def mask_id(grid_size: int) -> int:
    return grid_size * grid_size + 1


def cls_id(grid_size: int) -> int:
    return grid_size * grid_size + 2


def vocab_size(grid_size: int) -> int:
    return grid_size * grid_size + 3


@dataclass(frozen=True)
class GridCell:
    x: int
    y: int
    grid_size: int = 200

    def __post_init__(self) -> None:
        if not (0 <= self.x < self.grid_size and 0 <= self.y < self.grid_size):
            raise ValueError(f"cell ({self.x}, {self.y}) outside a {self.grid_size}x{self.grid_size} grid")


@dataclass(frozen=True)
class Record:
    uid: int
    day: int
    slot: int
    cell: GridCell


@dataclass
class UserTrajectory:
    """One user's records, sorted by (day, slot), stored column-wise."""

    uid: int
    grid_size: int
    day: np.ndarray
    slot: np.ndarray
    cls: np.ndarray

    def __len__(self) -> int:
        return int(self.day.shape[0])

    @staticmethod
    def empty(uid: int, grid_size: int) -> "UserTrajectory":
        z = np.zeros(0, dtype=np.int64)
        return UserTrajectory(uid=uid, grid_size=grid_size, day=z, slot=z.copy(), cls=z.copy())

    def select(self, keep: np.ndarray) -> "UserTrajectory":
        return UserTrajectory(
            uid=self.uid,
            grid_size=self.grid_size,
            day=self.day[keep],
            slot=self.slot[keep],
            cls=self.cls[keep],
        )

    def records(self) -> Iterator[Record]:
        g = self.grid_size
        for d, t, c in zip(self.day.tolist(), self.slot.tolist(), self.cls.tolist()):
            yield Record(uid=self.uid, day=d, slot=t, cell=GridCell(x=c // g, y=c % g, grid_size=g))


@dataclass
class CityData:
    grid_size: int
    users: Dict[int, UserTrajectory] = field(default_factory=dict)
    row_errors: List[RowError] = field(default_factory=list)

    def uids(self) -> List[int]:
        return sorted(self.users)

    def record_count(self) -> int:
        return sum(len(u) for u in self.users.values())


@dataclass
class SequenceExample:
    """One model input window; every array has the same length."""

    tokens: np.ndarray
    day: np.ndarray
    slot: np.ndarray
    day_of_week: np.ndarray
    weekend: np.ndarray
    attention_mask: np.ndarray
    loss_mask: np.ndarray
    targets: np.ndarray
    uid: int = -1
    target_day: Optional[int] = None

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    def validate(self, grid_size: int, first_weekday: int = 0) -> None:
        n = len(self)
        for name in ("day", "slot", "day_of_week", "weekend", "attention_mask", "loss_mask", "targets"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} length differs from tokens ({n})")
        attn = self.attention_mask.astype(bool)
        loss = self.loss_mask.astype(bool)
        if np.any(loss & ~attn):
            raise ValueError("loss mask is not a subset of attention mask")
        if np.any(self.tokens[loss] != mask_id(grid_size)):
            raise ValueError("loss-masked position without MASK token")
        real = grid_size * grid_size
        if np.any(self.targets[loss] < 0) or np.any(self.targets[loss] >= real):
            raise ValueError("loss target outside the real location classes")
        if np.any(self.targets[~loss] != IGNORE_TARGET):
            raise ValueError("target set on a position outside the loss mask")
        dow = (self.day + first_weekday) % 7
        if np.any(self.day_of_week[attn] != dow[attn]):
            raise ValueError("day_of_week inconsistent with day")
        if np.any(self.weekend[attn] != (dow[attn] >= 5).astype(self.weekend.dtype)):
            raise ValueError("weekend flag inconsistent with day_of_week")


@dataclass
class Batch:
    tokens: np.ndarray
    day: np.ndarray
    slot: np.ndarray
    day_of_week: np.ndarray
    weekend: np.ndarray
    attention_mask: np.ndarray
    loss_mask: np.ndarray
    targets: np.ndarray
    uids: List[int]
    target_days: List[Optional[int]]

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def seq_len(self) -> int:
        return int(self.tokens.shape[1])


def collate(examples: List[SequenceExample]) -> Batch:
    if not examples:
        raise ValueError("cannot collate an empty list of examples")

    def stack(name: str) -> np.ndarray:
        return np.stack([getattr(ex, name) for ex in examples]).astype(np.int64)

    return Batch(
        tokens=stack("tokens"),
        day=stack("day"),
        slot=stack("slot"),
        day_of_week=stack("day_of_week"),
        weekend=stack("weekend"),
        attention_mask=stack("attention_mask"),
        loss_mask=stack("loss_mask"),
        targets=stack("targets"),
        uids=[ex.uid for ex in examples],
        target_days=[ex.target_day for ex in examples],
    )
