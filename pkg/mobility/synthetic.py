import logging
from typing import List

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from errors import DataFileError
from mobility.grid import day_of_week
from mobility.loader import write_city_csv
from models.mobility import SLOTS_PER_DAY, TOTAL_DAYS, CityData, UserTrajectory

logger = logging.getLogger(__name__)

ACTIVE_SLOTS = range(16, 36)  # 8:00-18:00
LEISURE_SLOTS = range(20, 32)  # 10:00-16:00


class SyntheticParams(BaseModel):
    """Commuter-model knobs; a params file uses these names as keys."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    epsilon: float = Field(0.02, ge=0.0, le=1.0, description="probability a recorded slot is a random excursion cell")
    presence_active: float = Field(0.9, ge=0.0, le=1.0, description="recording probability 8:00-18:00")
    presence_quiet: float = Field(0.5, ge=0.0, le=1.0, description="recording probability outside 8:00-18:00")
    weekend_presence_factor: float = Field(0.7, ge=0.0, le=1.0, description="weekend multiplier on recording probability")
    max_leisure: int = Field(2, ge=0, le=2, description="upper bound on leisure cells per user")
    center_x: float = Field(0.5, ge=0.0, le=1.0, description="city centre x as a fraction of the grid")
    center_y: float = Field(0.5, ge=0.0, le=1.0, description="city centre y as a fraction of the grid")
    spread: float = Field(0.15, gt=0.0, description="std-dev of anchor cells around the centre, fraction of the grid")


def _draw_cell(rng: np.random.Generator, params: SyntheticParams, grid_size: int) -> int:
    cx = params.center_x * (grid_size - 1)
    cy = params.center_y * (grid_size - 1)
    sd = params.spread * grid_size
    x = int(np.clip(np.rint(rng.normal(cx, sd)), 0, grid_size - 1))
    y = int(np.clip(np.rint(rng.normal(cy, sd)), 0, grid_size - 1))
    return x * grid_size + y


def _schedule(home: int, work: int, leisure: List[int], dow: int) -> np.ndarray:
    cells = np.full(SLOTS_PER_DAY, home, dtype=np.int64)
    if dow < 5:
        cells[ACTIVE_SLOTS.start:ACTIVE_SLOTS.stop] = work
    elif len(leisure) > dow - 5:
        cells[LEISURE_SLOTS.start:LEISURE_SLOTS.stop] = leisure[dow - 5]
    return cells


def _presence(params: SyntheticParams, weekend: bool) -> np.ndarray:
    p = np.full(SLOTS_PER_DAY, params.presence_quiet)
    p[ACTIVE_SLOTS.start:ACTIVE_SLOTS.stop] = params.presence_active
    if weekend:
        p = p * params.weekend_presence_factor
    return p


def synthesize_city(
    n_users: int,
    grid_size: int = 200,
    days: int = TOTAL_DAYS,
    seed: int = 0,
    params: SyntheticParams = SyntheticParams(),
    first_weekday: int = 0,
) -> CityData:
    """
    Commuter city: home at night, work 8:00-18:00 on weekdays, leisure cells on weekends.

    Every user draws a home, a work cell and 0..max_leisure leisure cells around
    the centre. Saturday visits the first leisure cell and Sunday the second,
    when the user has them. Recorded slots are thinned by the presence
    probabilities and replaced by a uniformly random cell with probability epsilon.
    """
    if n_users < 1:
        raise ValueError("n_users must be at least 1")
    if grid_size < 1 or days < 1:
        raise ValueError("grid_size and days must be positive")
    rng = np.random.default_rng(seed)
    city = CityData(grid_size=grid_size)
    n_cells = grid_size * grid_size
    for uid in range(n_users):
        home = _draw_cell(rng, params, grid_size)
        work = _draw_cell(rng, params, grid_size)
        n_leisure = int(rng.integers(0, params.max_leisure + 1))
        leisure = [_draw_cell(rng, params, grid_size) for _ in range(n_leisure)]

        day_parts, slot_parts, cls_parts = [], [], []
        for day in range(days):
            dow = int(day_of_week(day, first_weekday))
            cells = _schedule(home, work, leisure, dow)
            present = rng.random(SLOTS_PER_DAY) < _presence(params, dow >= 5)
            excursion = rng.random(SLOTS_PER_DAY) < params.epsilon
            random_cells = rng.integers(0, n_cells, size=SLOTS_PER_DAY)
            cells = np.where(excursion, random_cells, cells)
            slots = np.flatnonzero(present)
            day_parts.append(np.full(len(slots), day, dtype=np.int64))
            slot_parts.append(slots.astype(np.int64))
            cls_parts.append(cells[slots])
        city.users[uid] = UserTrajectory(
            uid=uid,
            grid_size=grid_size,
            day=np.concatenate(day_parts),
            slot=np.concatenate(slot_parts),
            cls=np.concatenate(cls_parts),
        )
    logger.info(
        "Synthetic city generated users=%s grid=%s days=%s seed=%s records=%s",
        n_users,
        grid_size,
        days,
        seed,
        city.record_count(),
    )
    return city


def write_synthetic_city(path: str, city: CityData, *, seed: int, days: int, params: SyntheticParams) -> str:
    """Write the CSV and a `<path>.meta` sidecar; returns the sidecar path."""
    write_city_csv(path, city)
    meta_path = f"{path}.meta"
    lines = [f"seed={seed}", f"users={len(city.users)}", f"grid={city.grid_size}", f"days={days}"]
    lines.extend(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in params.model_dump().items())
    try:
        with open(meta_path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise DataFileError(f"cannot write {meta_path}: {exc}") from exc
    return meta_path
