import logging
import math
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from autograd import ops
from autograd.tensor import Tensor, backward, no_grad
from config import RunConfig
from errors import CheckpointFormatError, DataFileError, EmptyLossError, NumericError
from mobility.windows import (
    build_city_forecast_windows,
    build_mlm_batches,
    heldout_cutoff,
    restrict_days,
    split_train_test,
)
from models.mobility import Batch, CityData, SequenceExample, collate
from network.model import ModelConfig, STMoEBert, build_model
from network.moe import MoEOutput, RoutingStats
from services.batch_prefetch import BatchPrefetcher
from services.checkpoint_service import (
    Checkpoint,
    capture,
    epoch_filename,
    link_best,
    restore_model,
    restore_optimizer,
    save_checkpoint,
)
from services.optimizer import OptimizerState, build_optimizer, clip_grad_norm

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "step", "phase", "loss", "lr_base", "lr_loc"]
ROUTING_COLUMNS = ["epoch", "expert", "top1_count"]
LOG_FILE = "training_log.csv"
ROUTING_FILE = "routing.csv"
INIT_FILE = "init.stmb"
# Separate stream for re-drawing the location table before finetuning.
LOC_RESET_STREAM = 17


@dataclass(frozen=True)
class TrainConfig:
    phase: str
    base_lr: float
    loc_emb_lr: float
    weight_decay: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    seed: int = 7
    clip_norm: float = 1.0
    warmup_steps: int = 0
    mask_ratio: float = 0.15
    mlm_stride: int = 48
    prefetch: int = 2

    @staticmethod
    def from_run_config(cfg: RunConfig, phase: str) -> "TrainConfig":
        base, loc = cfg.phase_lrs(phase)
        return TrainConfig(
            phase=phase,
            base_lr=base,
            loc_emb_lr=loc,
            weight_decay=cfg.weight_decay,
            batch_size=cfg.batch_size,
            epochs=cfg.phase_epochs(phase),
            seed=cfg.seed,
            clip_norm=cfg.clip_norm,
            warmup_steps=cfg.warmup_steps,
            mask_ratio=cfg.mask_ratio,
            mlm_stride=cfg.mlm_stride,
            prefetch=cfg.prefetch,
        )

    def group_lrs(self) -> Dict[str, float]:
        if self.phase == "finetune":
            return {"location": self.loc_emb_lr, "base": self.base_lr}
        return {"all": self.base_lr}


def loss_forecast(logits: Tensor, example: SequenceExample) -> Tensor:
    """Mean cross-entropy over the loss-masked positions of one window ([T x G^2] logits)."""
    loss_mask = np.asarray(example.loss_mask, dtype=bool)
    if not loss_mask.any():
        raise EmptyLossError()
    return ops.cross_entropy(logits, example.targets, ignore_mask=~loss_mask)


def batch_loss(
    model: STMoEBert,
    batch: Batch,
    *,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
) -> Tuple[Tensor, MoEOutput]:
    """Cross-entropy over every loss-masked position of the batch; the head only runs on those rows."""
    positions = batch.loss_mask.astype(bool)
    if not positions.any():
        raise EmptyLossError()
    out = model.logits_at(batch, positions, mode=mode, rng=rng)
    loss = ops.cross_entropy(out.output, batch.targets[positions])
    if mode == "train" and out.aux_loss is not None:
        loss = ops.add(loss, out.aux_loss)
    return loss, out


def train_step(
    batch: Batch,
    model: STMoEBert,
    opt: OptimizerState,
    config: TrainConfig,
    *,
    rng: Optional[np.random.Generator] = None,
    batch_id: int = 0,
    routing: Optional[RoutingStats] = None,
    epoch: int = 0,
) -> float:
    """Forward, backward, clip, AdamW update; returns the batch loss."""
    if rng is None:
        rng = np.random.default_rng([config.seed, opt.step])
    try:
        loss, out = batch_loss(model, batch, mode="train", rng=rng)
    except NumericError as exc:
        raise NumericError(f"training aborted at batch {batch_id}: {exc}") from exc
    value = loss.item()
    if not math.isfinite(value):
        max_logit = float(np.max(np.abs(out.output.data)))
        raise NumericError(f"training aborted at batch {batch_id}: loss={value} max_logit={max_logit}")

    backward(loss)
    model.embedding.freeze_pad()
    clip_grad_norm(model.parameters(), config.clip_norm)
    opt.apply()
    model.embedding.freeze_pad()
    if routing is not None:
        routing.record(epoch, out.top1)
    return value


def heldout_loss(model: STMoEBert, examples: List[SequenceExample], batch_size: int) -> Optional[float]:
    """Position-weighted mean loss in eval mode; None when there is nothing to score."""
    total = 0.0
    count = 0
    with no_grad():
        for start in range(0, len(examples), batch_size):
            batch = collate(examples[start:start + batch_size])
            n = int(batch.loss_mask.sum())
            if n == 0:
                continue
            loss, _ = batch_loss(model, batch)
            total += loss.item() * n
            count += n
    return total / count if count else None


@dataclass
class PhaseData:
    fit: CityData
    fit_examples: Optional[List[SequenceExample]]
    heldout_examples: List[SequenceExample]
    cutoff: int


def prepare_phase_data(city: CityData, cfg: RunConfig, phase: str) -> PhaseData:
    """
    Training records are days before the held-out cutoff; the last share of the
    training days scores checkpoints. Test days are never touched.
    """
    train, _ = split_train_test(city, cfg.train_days)
    cutoff = heldout_cutoff(cfg.train_days, cfg.heldout_fraction)
    fit = restrict_days(train, 0, cutoff)
    if fit.record_count() == 0:
        raise DataFileError(f"no training records before day {cutoff}")
    window = cfg.history_len + cfg.horizon
    forecast_kwargs = dict(
        history_len=cfg.history_len,
        horizon=cfg.horizon,
        min_observed=cfg.min_observed,
        history_from_test=True,
        train_days=cfg.train_days,
        first_weekday=cfg.first_weekday,
    )
    if phase == "pretrain":
        heldout_city = restrict_days(train, cutoff, cfg.train_days)
        heldout = list(
            build_mlm_batches(
                heldout_city,
                cfg.mask_ratio,
                cfg.seed,
                epoch=0,
                window=window,
                stride=cfg.mlm_stride,
                first_weekday=cfg.first_weekday,
            )
        )
        return PhaseData(fit=fit, fit_examples=None, heldout_examples=heldout, cutoff=cutoff)

    fit_examples = build_city_forecast_windows(fit, first_day=cfg.forecast_first_day, last_day=cutoff, **forecast_kwargs)
    if not fit_examples:
        raise DataFileError(f"no forecast windows with target days in [{cfg.forecast_first_day}, {cutoff})")
    heldout = build_city_forecast_windows(train, first_day=cutoff, last_day=cfg.train_days, **forecast_kwargs)
    return PhaseData(fit=fit, fit_examples=fit_examples, heldout_examples=heldout, cutoff=cutoff)


class Trainer:
    """Owns one phase's model, optimizer, logs and checkpoints for an output directory."""

    def __init__(
        self,
        model: STMoEBert,
        optimizer: OptimizerState,
        train_config: TrainConfig,
        run_config: RunConfig,
        data: PhaseData,
        out_dir: str,
    ):
        self.model = model
        self.optimizer = optimizer
        self.config = train_config
        self.run_config = run_config
        self.data = data
        self.out_dir = out_dir
        self.routing = RoutingStats(num_experts=model.config.num_experts)
        self.log_rows: List[List] = []
        self.best_loss = math.inf
        self.best_file: Optional[str] = None
        self._prefetcher = BatchPrefetcher(max_ahead=train_config.prefetch)

    @property
    def phase(self) -> str:
        return self.config.phase

    def examples_for(self, epoch: int) -> List[SequenceExample]:
        if self.data.fit_examples is not None:
            return self.data.fit_examples
        examples = list(
            build_mlm_batches(
                self.data.fit,
                self.config.mask_ratio,
                self.config.seed,
                epoch=epoch,
                window=self.run_config.history_len + self.run_config.horizon,
                stride=self.config.mlm_stride,
                first_weekday=self.run_config.first_weekday,
            )
        )
        if not examples:
            raise DataFileError("no MLM windows in the training split")
        return examples

    def batch_order(self, epoch: int, n: int) -> List[np.ndarray]:
        order = np.random.default_rng([self.config.seed, epoch, 1]).permutation(n)
        size = self.config.batch_size
        return [order[i:i + size] for i in range(0, n, size)]

    def _lr_pair(self) -> Tuple[float, float]:
        lrs = {g.name: self.optimizer.scheduled_lr(g.lr, max(1, self.optimizer.step)) for g in self.optimizer.groups}
        base = lrs.get("base", lrs.get("all"))
        return base, lrs.get("location", base)

    def _write_tables(self) -> None:
        log_frame = pd.DataFrame(self.log_rows, columns=LOG_COLUMNS)
        routing_frame = pd.DataFrame(self.routing.rows, columns=ROUTING_COLUMNS)
        try:
            log_frame.to_csv(os.path.join(self.out_dir, LOG_FILE), index=False, lineterminator="\n")
            routing_frame.to_csv(os.path.join(self.out_dir, ROUTING_FILE), index=False, lineterminator="\n")
        except OSError as exc:
            raise DataFileError(f"cannot write training logs in {self.out_dir}: {exc}") from exc

    def _read_completed(self, name: str, before_epoch: int) -> pd.DataFrame:
        path = os.path.join(self.out_dir, name)
        if not os.path.exists(path):
            return pd.DataFrame()
        try:
            frame = pd.read_csv(path, float_precision="round_trip")
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
            raise DataFileError(f"cannot read {path}: {exc}") from exc
        return frame[frame["epoch"] < before_epoch]

    def load_history(self, before_epoch: int) -> None:
        """Keep log and routing rows of epochs already completed by the run being resumed."""
        log = self._read_completed(LOG_FILE, before_epoch)
        self.log_rows = [
            [int(r.epoch), int(r.step), str(r.phase), float(r.loss), float(r.lr_base), float(r.lr_loc)]
            for r in log.itertuples(index=False)
        ]
        routing = self._read_completed(ROUTING_FILE, before_epoch)
        self.routing.rows = [[int(r.epoch), int(r.expert), int(r.top1_count)] for r in routing.itertuples(index=False)]

    def _snapshot(self, epoch: int, heldout: Optional[float]) -> Checkpoint:
        extra = {
            "best_loss": repr(self.best_loss),
            "best_file": self.best_file or "",
            "heldout_loss": "" if heldout is None else repr(heldout),
        }
        return capture(
            self.model,
            phase=self.phase,
            epoch=epoch,
            seed=self.config.seed,
            optimizer=self.optimizer,
            extra=extra,
        )

    def run(self, start_epoch: int = 1) -> Checkpoint:
        """Train epochs start_epoch..epochs; a fresh run first writes init.stmb."""
        try:
            os.makedirs(self.out_dir, exist_ok=True)
        except OSError as exc:
            raise DataFileError(f"cannot create {self.out_dir}: {exc}") from exc

        if start_epoch > 1:
            self.load_history(start_epoch)
        else:
            init = self._snapshot(0, None)
            save_checkpoint(os.path.join(self.out_dir, INIT_FILE), init)
            if self.config.epochs == 0:
                self.best_file = INIT_FILE
                link_best(self.out_dir, INIT_FILE)
                self._write_tables()
                return init

        last = None
        for epoch in range(start_epoch, self.config.epochs + 1):
            last = self.run_epoch(epoch)
        return last

    def run_epoch(self, epoch: int) -> Checkpoint:
        examples = self.examples_for(epoch)
        chunks = self.batch_order(epoch, len(examples))
        losses: List[float] = []
        batches = self._prefetcher.map(lambda idx: collate([examples[i] for i in idx]), chunks)
        for batch_id, batch in enumerate(batches):
            rng = np.random.default_rng([self.config.seed, self.optimizer.step])
            loss = train_step(
                batch,
                self.model,
                self.optimizer,
                self.config,
                rng=rng,
                batch_id=batch_id,
                routing=self.routing,
                epoch=epoch,
            )
            losses.append(loss)
            logger.debug("Step done phase=%s epoch=%s step=%s loss=%.6f", self.phase, epoch, self.optimizer.step, loss)

        epoch_loss = float(np.mean(losses))
        lr_base, lr_loc = self._lr_pair()
        self.log_rows.append([epoch, self.optimizer.step, self.phase, epoch_loss, lr_base, lr_loc])
        self.routing.close_epoch(epoch)

        heldout = heldout_loss(self.model, self.data.heldout_examples, self.config.batch_size)
        score = heldout if heldout is not None else epoch_loss
        improved = score < self.best_loss
        filename = epoch_filename(epoch)
        if improved:
            self.best_loss = score
            self.best_file = filename
        checkpoint = self._snapshot(epoch, heldout)
        save_checkpoint(os.path.join(self.out_dir, filename), checkpoint)
        if improved:
            link_best(self.out_dir, filename)
        self._write_tables()
        logger.info(
            "Epoch done phase=%s epoch=%s step=%s loss=%.6f heldout=%s",
            self.phase,
            epoch,
            self.optimizer.step,
            epoch_loss,
            "n/a" if heldout is None else f"{heldout:.6f}",
        )
        return checkpoint


def _new_optimizer(model: STMoEBert, tcfg: TrainConfig) -> OptimizerState:
    return build_optimizer(
        model.parameter_groups(tcfg.phase),
        tcfg.group_lrs(),
        weight_decay=tcfg.weight_decay,
        warmup_steps=tcfg.warmup_steps,
    )


def _start(model: STMoEBert, city: CityData, cfg: RunConfig, phase: str, out_dir: str) -> Checkpoint:
    tcfg = TrainConfig.from_run_config(cfg, phase)
    data = prepare_phase_data(city, cfg, phase)
    logger.info(
        "Training start phase=%s epochs=%s lrs=%s parameters=%s cutoff=%s",
        phase,
        tcfg.epochs,
        tcfg.group_lrs(),
        model.parameter_count(),
        data.cutoff,
    )
    trainer = Trainer(model, _new_optimizer(model, tcfg), tcfg, cfg, data, out_dir)
    return trainer.run()


def pretrain(city: CityData, cfg: RunConfig, out_dir: str) -> Checkpoint:
    """MLM pretraining from a fresh initialisation."""
    model = build_model(ModelConfig.from_run_config(cfg), cfg.seed)
    return _start(model, city, cfg, "pretrain", out_dir)


def finetune(checkpoint: Checkpoint, city: CityData, cfg: RunConfig, out_dir: str) -> Checkpoint:
    """Forecast training from pretrained weights with a separate location-embedding learning rate."""
    model = restore_model(checkpoint, ModelConfig.from_run_config(cfg))
    if cfg.reset_loc_emb:
        model.embedding.reset_location(np.random.default_rng([cfg.seed, LOC_RESET_STREAM]))
    return _start(model, city, cfg, "finetune", out_dir)


def train_scratch(city: CityData, cfg: RunConfig, out_dir: str) -> Checkpoint:
    """Forecast training from a fresh initialisation, no pretraining."""
    model = build_model(ModelConfig.from_run_config(cfg), cfg.seed)
    return _start(model, city, cfg, "scratch", out_dir)


def resume(checkpoint: Checkpoint, city: CityData, cfg: RunConfig, out_dir: str) -> Checkpoint:
    """Continue the run that wrote `checkpoint` up to the configured epoch count."""
    phase = checkpoint.phase
    if phase not in ("pretrain", "finetune", "scratch"):
        raise CheckpointFormatError(f"checkpoint has no training phase (got {phase!r})")
    if not checkpoint.has_optimizer:
        raise CheckpointFormatError("checkpoint carries no optimizer state to resume from")
    tcfg = TrainConfig.from_run_config(cfg, phase)
    if checkpoint.epoch >= tcfg.epochs:
        logger.info("Nothing to resume phase=%s epoch=%s epochs=%s", phase, checkpoint.epoch, tcfg.epochs)
        return checkpoint
    model = restore_model(checkpoint, ModelConfig.from_run_config(cfg))
    optimizer = _new_optimizer(model, tcfg)
    restore_optimizer(checkpoint, optimizer)
    trainer = Trainer(model, optimizer, tcfg, cfg, prepare_phase_data(city, cfg, phase), out_dir)
    trainer.best_loss = float(checkpoint.metadata.get("best_loss", "inf"))
    trainer.best_file = checkpoint.metadata.get("best_file") or None
    logger.info("Resuming phase=%s from epoch=%s step=%s", phase, checkpoint.epoch, checkpoint.step)
    return trainer.run(start_epoch=checkpoint.epoch + 1)
