import logging
from typing import List

import numpy as np
import pandas as pd

from errors import DataFileError, RowError
from models.mobility import SLOTS_PER_DAY, TOTAL_DAYS, CityData, UserTrajectory

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["uid", "d", "t", "x", "y"]


def _row_errors(frame: pd.DataFrame, numeric: pd.DataFrame, grid_size: int, total_days: int) -> List[RowError]:
    checks = [
        (numeric.isna().any(axis=1), "non-numeric field"),
        ((numeric % 1 != 0).any(axis=1), "non-integer field"),
        (numeric["uid"] < 0, "negative uid"),
        ((numeric["d"] < 0) | (numeric["d"] >= total_days), f"day outside [0, {total_days})"),
        ((numeric["t"] < 0) | (numeric["t"] >= SLOTS_PER_DAY), f"slot outside [0, {SLOTS_PER_DAY})"),
        ((numeric["x"] < 1) | (numeric["x"] > grid_size), f"x outside [1, {grid_size}]"),
        ((numeric["y"] < 1) | (numeric["y"] > grid_size), f"y outside [1, {grid_size}]"),
    ]
    reasons = pd.Series("", index=frame.index)
    for failed, reason in checks:
        reasons = reasons.where(~(failed & (reasons == "")), reason)
    bad = reasons[reasons != ""]
    # Header is line 1, first data row is line 2.
    return [RowError(line=int(idx) + 2, message=f"{reason}: {','.join(frame.loc[idx].tolist())}") for idx, reason in bad.items()]


def load_city(path: str, grid_size: int = 200, *, total_days: int = TOTAL_DAYS, strict: bool = False) -> CityData:
    """
    Read a `uid,d,t,x,y` CSV (x, y 1-based) into per-user trajectories.

    - Rows failing validation are skipped and reported (strict=True raises the first).
    - Duplicate (uid, d, t) rows keep the first occurrence in file order.
    - Records come out sorted by (uid, day, slot).
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataFileError(f"cannot read {path}: {exc}") from exc
    if [c.strip() for c in frame.columns] != CSV_COLUMNS:
        raise DataFileError(f"{path}: expected header {','.join(CSV_COLUMNS)}, got {','.join(frame.columns)}")
    frame.columns = CSV_COLUMNS

    numeric = frame.apply(pd.to_numeric, errors="coerce")
    errors = _row_errors(frame, numeric, grid_size, total_days)
    for err in errors[:20]:
        logger.warning("Row rejected path=%s %s", path, err)
    if len(errors) > 20:
        logger.warning("Row rejected path=%s and %s more rows", path, len(errors) - 20)
    if strict and errors:
        raise errors[0]

    bad_lines = {e.line - 2 for e in errors}
    good = numeric.loc[~numeric.index.isin(bad_lines)].astype(np.int64)
    before = len(good)
    good = good.drop_duplicates(subset=["uid", "d", "t"], keep="first")
    if len(good) < before:
        logger.info("Duplicate records dropped path=%s count=%s", path, before - len(good))
    good = good.sort_values(["uid", "d", "t"], kind="mergesort")

    city = CityData(grid_size=grid_size, row_errors=errors)
    cls = (good["x"].to_numpy() - 1) * grid_size + (good["y"].to_numpy() - 1)
    uids = good["uid"].to_numpy()
    days = good["d"].to_numpy()
    slots = good["t"].to_numpy()
    if len(uids):
        starts = np.flatnonzero(np.r_[True, uids[1:] != uids[:-1]])
        ends = np.r_[starts[1:], len(uids)]
        for s, e in zip(starts, ends):
            uid = int(uids[s])
            city.users[uid] = UserTrajectory(
                uid=uid,
                grid_size=grid_size,
                day=days[s:e].copy(),
                slot=slots[s:e].copy(),
                cls=cls[s:e].copy(),
            )
    logger.info(
        "City loaded path=%s users=%s records=%s row_errors=%s",
        path,
        len(city.users),
        city.record_count(),
        len(errors),
    )
    return city


def city_to_frame(city: CityData) -> pd.DataFrame:
    parts = []
    g = city.grid_size
    for uid in city.uids():
        u = city.users[uid]
        parts.append(
            pd.DataFrame(
                {
                    "uid": np.full(len(u), uid, dtype=np.int64),
                    "d": u.day,
                    "t": u.slot,
                    "x": u.cls // g + 1,
                    "y": u.cls % g + 1,
                }
            )
        )
    if not parts:
        return pd.DataFrame({c: np.zeros(0, dtype=np.int64) for c in CSV_COLUMNS})
    return pd.concat(parts, ignore_index=True)[CSV_COLUMNS]


def write_frame_csv(path: str, frame: pd.DataFrame) -> None:
    try:
        frame.to_csv(path, index=False, lineterminator="\n")
    except OSError as exc:
        raise DataFileError(f"cannot write {path}: {exc}") from exc


def write_city_csv(path: str, city: CityData) -> None:
    write_frame_csv(path, city_to_frame(city))
