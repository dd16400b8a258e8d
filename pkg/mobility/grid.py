import numpy as np

from models.mobility import GridCell


def cell_to_class(cell: GridCell, grid_size: int) -> int:
    if not (0 <= cell.x < grid_size and 0 <= cell.y < grid_size):
        raise ValueError(f"cell ({cell.x}, {cell.y}) outside a {grid_size}x{grid_size} grid")
    return cell.x * grid_size + cell.y


def class_to_cell(class_id: int, grid_size: int) -> GridCell:
    if not (0 <= class_id < grid_size * grid_size):
        raise ValueError(f"class id {class_id} is not a real grid cell (special ids have no cell)")
    return GridCell(x=class_id // grid_size, y=class_id % grid_size, grid_size=grid_size)


def classes_to_xy(class_ids: np.ndarray, grid_size: int) -> np.ndarray:
    """Vectorised class_to_cell: [n] class ids -> [n x 2] (x, y)."""
    class_ids = np.asarray(class_ids, dtype=np.int64)
    if class_ids.size and (class_ids.min() < 0 or class_ids.max() >= grid_size * grid_size):
        raise ValueError("class ids outside the real grid cells")
    return np.stack([class_ids // grid_size, class_ids % grid_size], axis=-1)


def day_of_week(day, first_weekday: int = 0):
    # Day 0 is a Monday unless first_weekday says otherwise.
    return (np.asarray(day) + first_weekday) % 7


def is_weekend(day, first_weekday: int = 0):
    return (day_of_week(day, first_weekday) >= 5).astype(np.int64)
