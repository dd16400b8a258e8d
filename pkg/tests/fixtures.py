"""Small shared builders for the test modules (tiny grids, tiny models)."""

import numpy as np

from config import RunConfig
from mobility.synthetic import SyntheticParams, synthesize_city
from models.mobility import UserTrajectory

TINY_GRID = 6
TINY_DAYS = 14


def tiny_config(**overrides) -> RunConfig:
    values = dict(
        seed=7,
        grid_size=TINY_GRID,
        total_days=TINY_DAYS,
        train_days=10,
        heldout_fraction=0.2,
        forecast_first_day=2,
        history_len=16,
        horizon=48,
        e_day=2,
        e_time=2,
        e_dow=2,
        e_weekend=2,
        e_loc=4,
        hidden=8,
        layers=1,
        heads=2,
        ffn_dim=16,
        expert_dim=16,
        num_experts=2,
        top_k=1,
        dropout=0.1,
        batch_size=8,
        epochs=1,
        mlm_stride=48,
        prefetch=1,
    )
    values.update(overrides)
    return RunConfig(**values)


def tiny_city(n_users: int = 3, seed: int = 3, **params):
    return synthesize_city(
        n_users,
        grid_size=TINY_GRID,
        days=TINY_DAYS,
        seed=seed,
        params=SyntheticParams(**params),
    )


def make_user(uid: int, records, grid_size: int = TINY_GRID) -> UserTrajectory:
    """records: iterable of (day, slot, class id), sorted."""
    rows = np.asarray(list(records), dtype=np.int64).reshape(-1, 3)
    return UserTrajectory(uid=uid, grid_size=grid_size, day=rows[:, 0], slot=rows[:, 1], cls=rows[:, 2])
