import logging
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import RunConfig
from errors import MobilityError
from mobility.grid import day_of_week, is_weekend
from models.mobility import HORIZON, CityData, SequenceExample

logger = logging.getLogger(__name__)

DAY_TYPES = ("dow", "weekend")
Ranked = List[Tuple[int, int]]


@dataclass
class FrequencyTable:
    """
    Visit counts per user, ranked by (count desc, class id asc).

    keyed: uid -> (day type, slot) -> ranked cells
    by_slot: uid -> slot -> ranked cells (all day types)
    user_mode / city_mode: most visited cell per user / overall
    """

    day_type: str = "dow"
    first_weekday: int = 0
    keyed: Dict[int, Dict[Tuple[int, int], Ranked]] = field(default_factory=dict)
    by_slot: Dict[int, Dict[int, Ranked]] = field(default_factory=dict)
    user_mode: Dict[int, int] = field(default_factory=dict)
    city_mode: Optional[int] = None

    def day_key(self, day) -> int:
        if self.day_type == "weekend":
            return int(is_weekend(day, self.first_weekday))
        return int(day_of_week(day, self.first_weekday))

    def entries(self, uid: int, day: int, slot: int) -> Ranked:
        return self.keyed.get(uid, {}).get((self.day_key(day), slot), [])

    @property
    def empty(self) -> bool:
        return self.city_mode is None


def _ranked(frame: pd.DataFrame, keys: List[str]) -> Dict[Hashable, Ranked]:
    counts = frame.groupby(keys + ["cls"]).size().reset_index(name="visits")
    counts = counts.sort_values(keys + ["visits", "cls"], ascending=[True] * len(keys) + [False, True], kind="mergesort")
    out: Dict[Hashable, Ranked] = {}
    for row in counts.itertuples(index=False):
        key = tuple(int(getattr(row, k)) for k in keys)
        out.setdefault(key if len(key) > 1 else key[0], []).append((int(row.cls), int(row.visits)))
    return out


def hf_fit(train: CityData, *, day_type: str = "dow", first_weekday: int = 0) -> FrequencyTable:
    """Count every (uid, day type, slot, cell) occurrence of the training records."""
    if day_type not in DAY_TYPES:
        raise MobilityError(f"unknown day type {day_type!r}; expected one of {DAY_TYPES}")
    table = FrequencyTable(day_type=day_type, first_weekday=first_weekday)
    users = [train.users[uid] for uid in train.uids() if len(train.users[uid])]
    if not users:
        return table
    frame = pd.DataFrame(
        {
            "uid": np.concatenate([np.full(len(u), u.uid, dtype=np.int64) for u in users]),
            "day": np.concatenate([u.day for u in users]),
            "slot": np.concatenate([u.slot for u in users]),
            "cls": np.concatenate([u.cls for u in users]),
        }
    )
    if day_type == "weekend":
        frame["key"] = is_weekend(frame["day"].to_numpy(), first_weekday)
    else:
        frame["key"] = day_of_week(frame["day"].to_numpy(), first_weekday)

    for (uid, key, slot), ranked in _ranked(frame, ["uid", "key", "slot"]).items():
        table.keyed.setdefault(uid, {})[(key, slot)] = ranked
    for (uid, slot), ranked in _ranked(frame, ["uid", "slot"]).items():
        table.by_slot.setdefault(uid, {})[slot] = ranked
    table.user_mode = {uid: ranked[0][0] for uid, ranked in _ranked(frame, ["uid"]).items()}
    city = frame.groupby("cls").size().reset_index(name="visits")
    city = city.sort_values(["visits", "cls"], ascending=[False, True], kind="mergesort")
    table.city_mode = int(city.iloc[0]["cls"])
    logger.info("HF table fitted users=%s records=%s day_type=%s", len(users), len(frame), day_type)
    return table


def hf_predict(table: FrequencyTable, uid: int, day: int, slot: int) -> int:
    """Most frequent cell for (uid, day type, slot), else (uid, slot), else the user's mode, else the city's."""
    if table.empty:
        raise MobilityError("historical frequency table is empty")
    ranked = table.entries(uid, day, slot)
    if ranked:
        return ranked[0][0]
    ranked = table.by_slot.get(uid, {}).get(slot, [])
    if ranked:
        return ranked[0][0]
    if uid in table.user_mode:
        return table.user_mode[uid]
    return int(table.city_mode)


class HistoricalFrequencyPredictor:
    """Predicts every horizon slot of a forecast window from the frequency table."""

    def __init__(self, table: FrequencyTable, horizon: int = HORIZON):
        self.table = table
        self.horizon = horizon

    def predict(self, examples: Sequence[SequenceExample]) -> np.ndarray:
        out = np.zeros((len(examples), self.horizon), dtype=np.int64)
        for row, example in enumerate(examples):
            for slot in range(self.horizon):
                out[row, slot] = hf_predict(self.table, example.uid, int(example.target_day), slot)
        return out


def naive_bert_config(config: RunConfig) -> RunConfig:
    """The same pipeline with the mixture replaced by one expert-shaped FFN."""
    return config.replace(num_experts=1, top_k=1, moe_aux_weight=0.0)
