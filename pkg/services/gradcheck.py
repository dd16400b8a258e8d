import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from autograd import ops
from autograd.tensor import Tensor, backward, no_grad
from config import RunConfig
from models.mobility import Batch, SequenceExample, cls_id, collate, mask_id, pad_id
from network.model import ModelConfig, STMoEBert, build_model
from network.moe import mixture_rows
from services.trainer import batch_loss

logger = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-3
# Denominator floor: gradients below it are compared in absolute terms.
REL_FLOOR = 1e-5
SAMPLES_PER_TENSOR = 8
DESK_GRID = 40
HIDDEN_SWEEP = (8, 16, 32, 64)
# Every entry of every tensor is checked at this width; wider models are sampled.
FULL_HIDDEN = 8
LAYERS = 2
HEADS = 4
EXPERT_COUNTS = (2, 8)
SEQ_LEN = 8
QUICK_GRID = 6
QUICK_DAYS = 14
QUICK_EMBED = (2, 2, 2, 2, 4)

HEAD_PARAMS = ("moe.head.weight", "moe.head.bias")
TABLE_FIELDS = {
    "embedding.day": "day",
    "embedding.slot": "slot",
    "embedding.day_of_week": "day_of_week",
    "embedding.weekend": "weekend",
    "embedding.location": "tokens",
}


@dataclass
class TensorCheck:
    name: str
    entries: int
    max_rel_error: float


@dataclass
class GradcheckReport:
    mode: str = "desk"
    tolerance: float = TOLERANCE
    checks: List[TensorCheck] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def max_rel_error(self) -> float:
        return max((c.max_rel_error for c in self.checks), default=0.0)

    @property
    def worst(self) -> Optional[TensorCheck]:
        return max(self.checks, key=lambda c: c.max_rel_error, default=None)

    @property
    def entries(self) -> int:
        return sum(c.entries for c in self.checks)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def to_line(self) -> str:
        worst = self.worst
        return (
            f"gradcheck passed={int(self.passed)} mode={self.mode} max_rel_error={self.max_rel_error:.3e} "
            f"tensors={len(self.checks)} entries={self.entries} worst={worst.name if worst else '-'} "
            f"seconds={self.seconds:.2f}"
        )


def relative_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _central_difference(f: Callable[[], float], flat: np.ndarray, i: int, step: float) -> float:
    original = flat[i]
    flat[i] = original + step
    plus = f()
    flat[i] = original - step
    minus = f()
    flat[i] = original
    return (plus - minus) / (2.0 * step)


def numeric_gradient(f: Callable[[], float], tensor: Tensor, step: float = STEP) -> np.ndarray:
    """Central differences of f() with respect to every entry of tensor.data."""
    flat = tensor.data.reshape(-1)
    return np.array([_central_difference(f, flat, i, step) for i in range(flat.size)]).reshape(tensor.shape)


def gradcheck_model_config(
    cfg: RunConfig,
    *,
    grid_size: int,
    total_days: int,
    hidden: int,
    num_experts: int,
    embed_sizes: Optional[Tuple[int, int, int, int, int]] = None,
) -> ModelConfig:
    """cfg's structural switches at the given size; every expert is kept so the loss is smooth."""
    e_day, e_time, e_dow, e_weekend, e_loc = embed_sizes or (cfg.e_day, cfg.e_time, cfg.e_dow, cfg.e_weekend, cfg.e_loc)
    return ModelConfig(
        grid_size=grid_size,
        total_days=total_days,
        max_positions=SEQ_LEN + 1,
        e_day=e_day,
        e_time=e_time,
        e_dow=e_dow,
        e_weekend=e_weekend,
        e_loc=e_loc,
        use_position_embedding=cfg.use_position_embedding,
        hidden=hidden,
        layers=LAYERS,
        heads=HEADS,
        ffn_dim=2 * hidden,
        dropout=0.0,
        post_norm=cfg.post_norm,
        use_cls=cfg.use_cls,
        num_experts=num_experts,
        top_k=num_experts,
        expert_dim=2 * hidden,
        moe_residual=cfg.moe_residual,
        moe_aux_weight=cfg.moe_aux_weight,
    )


def gradcheck_batch(rng: np.random.Generator, grid_size: int, total_days: int, first_weekday: int = 0) -> Batch:
    """Two windows: history, left padding on the second, three MASK positions with one unobserved."""
    examples = []
    real = grid_size * grid_size
    for row, n_pad in enumerate((0, 2)):
        day = np.sort(rng.integers(0, total_days, size=SEQ_LEN))
        dow = (day + first_weekday) % 7
        tokens = rng.integers(0, real, size=SEQ_LEN)
        targets = np.full(SEQ_LEN, -1, dtype=np.int64)
        loss_mask = np.zeros(SEQ_LEN, dtype=np.int64)
        attention = np.ones(SEQ_LEN, dtype=np.int64)
        tokens[-3:] = mask_id(grid_size)
        observed = [SEQ_LEN - 3, SEQ_LEN - 1] if row == 0 else [SEQ_LEN - 2]
        loss_mask[observed] = 1
        targets[observed] = rng.integers(0, real, size=len(observed))
        tokens[:n_pad] = pad_id(grid_size)
        attention[:n_pad] = 0
        examples.append(
            SequenceExample(
                tokens=tokens,
                day=day,
                slot=rng.integers(0, 48, size=SEQ_LEN),
                day_of_week=dow,
                weekend=(dow >= 5).astype(np.int64),
                attention_mask=attention,
                loss_mask=loss_mask,
                targets=targets,
                uid=row,
                target_day=int(day[-1]),
            )
        )
    return collate(examples)


def referenced_rows(model: STMoEBert, batch: Batch) -> Dict[str, np.ndarray]:
    """Rows of each lookup table the forward pass reads; every other row has a zero numeric derivative."""
    rows: Dict[str, np.ndarray] = {}
    for name, attr in TABLE_FIELDS.items():
        ids = np.asarray(getattr(batch, attr)).ravel()
        if model.config.use_cls:
            extra = cls_id(model.config.grid_size) if attr == "tokens" else 0
            ids = np.append(ids, extra)
        rows[name] = np.unique(ids)
    if model.embedding.position is not None:
        # Position 0 is the CLS row; batch positions use 1..T.
        rows["embedding.position"] = np.arange(batch.seq_len + 1)
    return rows


def _entry_indices(
    param: Tensor,
    analytic: np.ndarray,
    rows: Optional[np.ndarray],
    rng: np.random.Generator,
    samples: Optional[int],
) -> Tuple[np.ndarray, np.ndarray]:
    """(entries to difference, entries whose derivative is exactly zero)."""
    all_entries = np.arange(param.size)
    if rows is None:
        candidates, unread = all_entries, np.zeros(0, dtype=np.int64)
    else:
        read = np.zeros(param.shape[0], dtype=bool)
        read[rows] = True
        per_row = param.size // param.shape[0]
        read_entries = np.repeat(read, per_row)
        candidates, unread = all_entries[read_entries], all_entries[~read_entries]
    if samples is None or candidates.size <= samples:
        return candidates, unread
    flat_grad = np.abs(analytic.reshape(-1)[candidates])
    picks = rng.choice(candidates, size=samples - 1, replace=False)
    return np.unique(np.append(picks, candidates[int(np.argmax(flat_grad))])), unread


def check_model(
    model: STMoEBert,
    batch: Batch,
    rng: np.random.Generator,
    *,
    samples: Optional[int] = SAMPLES_PER_TENSOR,
    step: float = STEP,
    label: str = "",
) -> List[TensorCheck]:
    """
    Compare backprop against central differences for every parameter tensor.

    samples=None differences every entry; otherwise a random sample plus the
    largest-gradient entry of each tensor. Output-head entries reuse the cached
    head input, which no head parameter influences.
    """
    positions = batch.loss_mask.astype(bool)

    def loss_value() -> float:
        with no_grad():
            loss, _ = batch_loss(model, batch, mode="train")
        return loss.item()

    with no_grad():
        mixed, routed = mixture_rows(model.head_rows(batch, positions, mode="train"), model.moe)
    aux = routed.aux_loss.item() if routed.aux_loss is not None else 0.0
    targets = batch.targets[positions]

    def head_loss_value() -> float:
        with no_grad():
            return ops.cross_entropy(model.moe.head(mixed), targets).item() + aux

    loss, _ = batch_loss(model, batch, mode="train")
    backward(loss)
    table_rows = referenced_rows(model, batch)
    checks: List[TensorCheck] = []
    for name, param in model.named_parameters():
        analytic = param.grad.copy().reshape(-1)
        f = head_loss_value if name in HEAD_PARAMS else loss_value
        entries, unread = _entry_indices(param, analytic, table_rows.get(name), rng, samples)
        flat = param.data.reshape(-1)
        worst = 0.0
        for i in entries:
            worst = max(worst, relative_error(float(analytic[i]), _central_difference(f, flat, int(i), step)))
        if unread.size:
            stray = np.abs(analytic[unread])
            worst = max(worst, float(np.max(stray / np.maximum(stray, REL_FLOOR))))
        checks.append(TensorCheck(name=f"{label}{name}", entries=int(entries.size + unread.size), max_rel_error=worst))
        logger.debug("Gradcheck tensor=%s%s entries=%s max_rel_error=%.3e", label, name, entries.size, worst)
    return checks


def _plan(cfg: RunConfig, quick: bool) -> List[Tuple[str, ModelConfig, Optional[int]]]:
    plan = []
    if quick:
        for experts in EXPERT_COUNTS:
            model_cfg = gradcheck_model_config(
                cfg, grid_size=QUICK_GRID, total_days=QUICK_DAYS, hidden=FULL_HIDDEN, num_experts=experts, embed_sizes=QUICK_EMBED
            )
            plan.append((f"k{experts}/", model_cfg, SAMPLES_PER_TENSOR))
        return plan
    for hidden in HIDDEN_SWEEP:
        for experts in EXPERT_COUNTS:
            model_cfg = gradcheck_model_config(
                cfg, grid_size=DESK_GRID, total_days=cfg.total_days, hidden=hidden, num_experts=experts
            )
            plan.append((f"h{hidden}k{experts}/", model_cfg, None if hidden == FULL_HIDDEN else SAMPLES_PER_TENSOR))
    return plan


def run_gradcheck(cfg: RunConfig, seed: int, *, tolerance: float = TOLERANCE, quick: bool = False) -> GradcheckReport:
    """
    Desk mode: G=40, L=2, A=4, K in {2, 8} with top_k=K, hidden swept over 8..64,
    every entry at hidden 8. Quick mode: a G=6 model with sampled entries.
    """
    started = time.perf_counter()
    report = GradcheckReport(mode="quick" if quick else "desk", tolerance=tolerance)
    for label, model_cfg, samples in _plan(cfg, quick):
        rng = np.random.default_rng([seed, model_cfg.hidden, model_cfg.num_experts])
        model = build_model(model_cfg, seed)
        batch = gradcheck_batch(rng, model_cfg.grid_size, model_cfg.total_days, cfg.first_weekday)
        report.checks.extend(check_model(model, batch, rng, samples=samples, label=label))
    report.seconds = time.perf_counter() - started
    logger.info("%s", report.to_line())
    return report
