import logging
import math
from typing import Dict, Iterator, List, Tuple

import numpy as np

from mobility.grid import day_of_week, is_weekend
from models.mobility import (
    HISTORY_LEN,
    HORIZON,
    IGNORE_TARGET,
    SEQUENCE_LEN,
    TOTAL_DAYS,
    TRAIN_DAYS,
    CityData,
    SequenceExample,
    UserTrajectory,
    mask_id,
    pad_id,
)

logger = logging.getLogger(__name__)


def split_trajectory(user: UserTrajectory, train_days: int = TRAIN_DAYS) -> Tuple[UserTrajectory, UserTrajectory]:
    in_train = user.day < train_days
    return user.select(in_train), user.select(~in_train)


def split_train_test(city: CityData, train_days: int = TRAIN_DAYS) -> Tuple[CityData, CityData]:
    """Days [0, train_days) go to train, the rest to test; users keep their ids in both."""
    train = CityData(grid_size=city.grid_size)
    test = CityData(grid_size=city.grid_size)
    for uid in city.uids():
        tr, te = split_trajectory(city.users[uid], train_days)
        if len(tr):
            train.users[uid] = tr
        if len(te):
            test.users[uid] = te
    return train, test


def heldout_cutoff(train_days: int, fraction: float) -> int:
    return train_days - max(1, int(math.ceil(fraction * train_days)))


def restrict_days(city: CityData, start: int, stop: int) -> CityData:
    out = CityData(grid_size=city.grid_size)
    for uid in city.uids():
        u = city.users[uid]
        sub = u.select((u.day >= start) & (u.day < stop))
        if len(sub):
            out.users[uid] = sub
    return out


def _blank(length: int, grid_size: int, first_weekday: int) -> Dict[str, np.ndarray]:
    return {
        "tokens": np.full(length, pad_id(grid_size), dtype=np.int64),
        "day": np.zeros(length, dtype=np.int64),
        "slot": np.zeros(length, dtype=np.int64),
        "day_of_week": np.full(length, int(day_of_week(0, first_weekday)), dtype=np.int64),
        "weekend": np.full(length, int(is_weekend(0, first_weekday)), dtype=np.int64),
        "attention_mask": np.zeros(length, dtype=np.int64),
        "loss_mask": np.zeros(length, dtype=np.int64),
        "targets": np.full(length, IGNORE_TARGET, dtype=np.int64),
    }


def build_forecast_windows(
    user: UserTrajectory,
    *,
    first_day: int = TRAIN_DAYS,
    last_day: int = TOTAL_DAYS,
    history_len: int = HISTORY_LEN,
    horizon: int = HORIZON,
    min_observed: int = 1,
    history_from_test: bool = True,
    train_days: int = TRAIN_DAYS,
    first_weekday: int = 0,
) -> List[SequenceExample]:
    """
    One window per target day D in [first_day, last_day).

    The last `horizon` positions are day D's slots, all MASK; the loss covers the
    slots that have a record. The first `history_len` positions hold the most
    recent observed records before D (gaps skipped), left-padded with PAD.
    """
    g = user.grid_size
    windows: List[SequenceExample] = []
    for target_day in range(first_day, last_day):
        on_day = user.day == target_day
        if int(on_day.sum()) < max(1, min_observed):
            continue
        limit = target_day if history_from_test else min(target_day, train_days)
        hist_idx = np.flatnonzero(user.day < limit)[-history_len:] if history_len > 0 else np.zeros(0, dtype=np.int64)
        fields = _blank(history_len + horizon, g, first_weekday)

        start = history_len - len(hist_idx)
        span = slice(start, history_len)
        fields["tokens"][span] = user.cls[hist_idx]
        fields["day"][span] = user.day[hist_idx]
        fields["slot"][span] = user.slot[hist_idx]
        fields["day_of_week"][span] = day_of_week(user.day[hist_idx], first_weekday)
        fields["weekend"][span] = is_weekend(user.day[hist_idx], first_weekday)
        fields["attention_mask"][span] = 1

        future = slice(history_len, history_len + horizon)
        fields["tokens"][future] = mask_id(g)
        fields["day"][future] = target_day
        fields["slot"][future] = np.arange(horizon)
        fields["day_of_week"][future] = int(day_of_week(target_day, first_weekday))
        fields["weekend"][future] = int(is_weekend(target_day, first_weekday))
        fields["attention_mask"][future] = 1

        observed_slots = user.slot[on_day]
        observed_slots_ok = observed_slots < horizon
        positions = history_len + observed_slots[observed_slots_ok]
        fields["loss_mask"][positions] = 1
        fields["targets"][positions] = user.cls[on_day][observed_slots_ok]
        windows.append(SequenceExample(uid=user.uid, target_day=target_day, **fields))
    return windows


def build_city_forecast_windows(city: CityData, **kwargs) -> List[SequenceExample]:
    windows: List[SequenceExample] = []
    for uid in city.uids():
        windows.extend(build_forecast_windows(city.users[uid], **kwargs))
    logger.debug("Forecast windows built users=%s windows=%s", len(city.users), len(windows))
    return windows


def _mlm_starts(n_records: int, window: int, stride: int) -> List[int]:
    if n_records <= window:
        return [0]
    starts = list(range(0, n_records - window + 1, stride))
    if starts[-1] != n_records - window:
        starts.append(n_records - window)
    return starts


def masked_count(n_real: int, mask_ratio: float) -> int:
    return max(1, int(math.floor(mask_ratio * n_real + 1e-9)))


def build_mlm_windows(
    user: UserTrajectory,
    mask_ratio: float,
    rng: np.random.Generator,
    *,
    window: int = SEQUENCE_LEN,
    stride: int = HORIZON,
    first_weekday: int = 0,
) -> List[SequenceExample]:
    if len(user) == 0:
        return []
    g = user.grid_size
    out: List[SequenceExample] = []
    for start in _mlm_starts(len(user), window, stride):
        idx = np.arange(start, min(start + window, len(user)))
        fields = _blank(window, g, first_weekday)
        span = slice(window - len(idx), window)
        fields["tokens"][span] = user.cls[idx]
        fields["day"][span] = user.day[idx]
        fields["slot"][span] = user.slot[idx]
        fields["day_of_week"][span] = day_of_week(user.day[idx], first_weekday)
        fields["weekend"][span] = is_weekend(user.day[idx], first_weekday)
        fields["attention_mask"][span] = 1

        real_positions = np.arange(window - len(idx), window)
        chosen = np.sort(rng.choice(real_positions, size=masked_count(len(idx), mask_ratio), replace=False))
        fields["targets"][chosen] = fields["tokens"][chosen]
        fields["tokens"][chosen] = mask_id(g)
        fields["loss_mask"][chosen] = 1
        out.append(SequenceExample(uid=user.uid, target_day=None, **fields))
    return out


def build_mlm_batches(
    train: CityData,
    mask_ratio: float = 0.15,
    seed: int = 0,
    *,
    epoch: int = 0,
    window: int = SEQUENCE_LEN,
    stride: int = HORIZON,
    first_weekday: int = 0,
) -> Iterator[SequenceExample]:
    """
    Stream masked windows over each user's training records, users in uid order.

    Every selected position is replaced by MASK; selection depends only on
    (seed, epoch) so each epoch re-draws masks reproducibly.
    """
    if mask_ratio <= 0.0:
        raise ValueError("mask ratio must be positive")
    if mask_ratio >= 1.0:
        raise ValueError("mask ratio must be below 1")
    if stride < 1:
        raise ValueError("stride must be at least 1")
    rng = np.random.default_rng([int(seed), int(epoch)])
    for uid in train.uids():
        yield from build_mlm_windows(
            train.users[uid],
            mask_ratio,
            rng,
            window=window,
            stride=stride,
            first_weekday=first_weekday,
        )
