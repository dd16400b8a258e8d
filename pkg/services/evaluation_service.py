import logging
from typing import List, Optional, Protocol, Sequence

import numpy as np
import pandas as pd

from autograd.tensor import no_grad
from errors import DataFileError, ShapeError
from metrics.trajectory import TrajPair, accuracy, dtw, geo_bleu
from mobility.grid import classes_to_xy
from mobility.loader import CSV_COLUMNS, write_frame_csv
from models.mobility import HISTORY_LEN, HORIZON, SequenceExample, collate
from models.report import CitySummary, EvalReport, WindowScore
from network.model import STMoEBert

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["city", "uid", "day", "accuracy", "geo_bleu", "dtw"]
AGGREGATION = "per-window-unweighted"
SUMMARY_SUFFIX = ".summary"


class Predictor(Protocol):
    def predict(self, examples: Sequence[SequenceExample]) -> np.ndarray:
        """Class ids [n x horizon] for the horizon slots of each window."""


class ModelPredictor:
    """Argmax decoding of the network's logits at the horizon positions."""

    def __init__(self, model: STMoEBert, *, history_len: int = HISTORY_LEN, horizon: int = HORIZON, batch_size: int = 32):
        self.model = model
        self.history_len = history_len
        self.horizon = horizon
        self.batch_size = batch_size

    def predict(self, examples: Sequence[SequenceExample]) -> np.ndarray:
        out = np.zeros((len(examples), self.horizon), dtype=np.int64)
        with no_grad():
            for start in range(0, len(examples), self.batch_size):
                batch = collate(list(examples[start:start + self.batch_size]))
                if batch.seq_len != self.history_len + self.horizon:
                    raise ShapeError(f"window length {batch.seq_len} != {self.history_len}+{self.horizon}")
                positions = np.zeros(batch.tokens.shape, dtype=bool)
                positions[:, self.history_len:] = True
                logits = self.model.logits_at(batch, positions).output.data
                out[start:start + len(batch)] = np.argmax(logits, axis=1).reshape(len(batch), self.horizon)
        return out


def window_pair(example: SequenceExample, predicted: np.ndarray, grid_size: int, history_len: int) -> Optional[TrajPair]:
    """Predicted vs true cells at the target day's observed slots; None when no slot is observed."""
    horizon = len(predicted)
    observed = np.asarray(example.loss_mask[history_len:history_len + horizon], dtype=bool)
    slots = np.flatnonzero(observed)
    if slots.size == 0:
        return None
    truth = example.targets[history_len:history_len + horizon][slots]
    return TrajPair(
        predicted=classes_to_xy(predicted[slots], grid_size),
        reference=classes_to_xy(truth, grid_size),
        slots=slots,
    )


def evaluate_predictions(
    windows: Sequence[SequenceExample],
    predictions: np.ndarray,
    *,
    grid_size: int,
    history_len: int = HISTORY_LEN,
    city: str = "city",
    geo_bleu_n: int = 3,
    geo_bleu_weights: Optional[List[float]] = None,
    geo_bleu_beta: float = 0.5,
) -> EvalReport:
    if len(windows) == 0:
        raise DataFileError("no forecast windows to evaluate")
    if predictions.shape[0] != len(windows):
        raise ShapeError(f"{predictions.shape[0]} prediction rows for {len(windows)} windows")
    scores: List[WindowScore] = []
    order = sorted(range(len(windows)), key=lambda i: (windows[i].uid, windows[i].target_day))
    for i in order:
        pair = window_pair(windows[i], predictions[i], grid_size, history_len)
        if pair is None:
            continue
        scores.append(
            WindowScore(
                city=city,
                uid=windows[i].uid,
                day=int(windows[i].target_day),
                accuracy=accuracy(pair),
                geo_bleu=geo_bleu(pair, n=geo_bleu_n, weights=geo_bleu_weights, beta=geo_bleu_beta),
                dtw=dtw(pair),
                evaluated_slots=len(pair.reference),
            )
        )
    if not scores:
        raise DataFileError("no forecast window has an observed target slot")
    summary = CitySummary(
        city=city,
        windows=len(scores),
        accuracy=float(np.mean([s.accuracy for s in scores])),
        geo_bleu=float(np.mean([s.geo_bleu for s in scores])),
        dtw=float(np.mean([s.dtw for s in scores])),
        aggregation=AGGREGATION,
    )
    logger.info("Evaluation done %s", summary.to_line())
    return EvalReport(scores=scores, summary=summary)


def evaluate_city(predictor: Predictor, windows: Sequence[SequenceExample], **kwargs) -> EvalReport:
    """Predict every window, score each one, and average unweighted over windows."""
    return evaluate_predictions(windows, predictor.predict(windows), **kwargs)


def report_frame(report: EvalReport) -> pd.DataFrame:
    rows = [[s.city, s.uid, s.day, s.accuracy, s.geo_bleu, s.dtw] for s in report.scores]
    s = report.summary
    rows.append([s.city, "ALL", "ALL", s.accuracy, s.geo_bleu, s.dtw])
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def summary_path(report_path: str) -> str:
    return report_path + SUMMARY_SUFFIX


def write_summary(summary: CitySummary, path: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(summary.to_line() + "\n")
    except OSError as exc:
        raise DataFileError(f"cannot write summary {path}: {exc}") from exc


def write_report(report: EvalReport, path: str) -> None:
    """
    CSV with a leading `# aggregation=...` comment line and a final city summary row.

    The key=value summary line is also written to `<path>.summary`.
    """
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(f"# aggregation={report.summary.aggregation}\n")
            report_frame(report).to_csv(f, index=False, lineterminator="\n", float_format="%.6f")
    except OSError as exc:
        raise DataFileError(f"cannot write report {path}: {exc}") from exc
    write_summary(report.summary, summary_path(path))


def average_summaries(summaries: Sequence[CitySummary]) -> CitySummary:
    """Unweighted mean of per-seed city summaries of the same city and windows."""
    if not summaries:
        raise ValueError("average_summaries needs at least one summary")
    first = summaries[0]
    if any(s.city != first.city or s.windows != first.windows for s in summaries):
        raise ShapeError("seed summaries cover different cities or window counts")
    return CitySummary(
        city=first.city,
        windows=first.windows,
        accuracy=float(np.mean([s.accuracy for s in summaries])),
        geo_bleu=float(np.mean([s.geo_bleu for s in summaries])),
        dtw=float(np.mean([s.dtw for s in summaries])),
        aggregation=f"{first.aggregation}/mean-of-{len(summaries)}-seeds",
    )


def export_predictions(windows: Sequence[SequenceExample], predictions: np.ndarray, path: str, grid_size: int) -> None:
    """Write every predicted horizon slot as `uid,d,t,x,y` (x, y 1-based)."""
    if predictions.shape[0] != len(windows):
        raise ShapeError(f"{predictions.shape[0]} prediction rows for {len(windows)} windows")
    horizon = predictions.shape[1]
    xy = classes_to_xy(predictions.reshape(-1), grid_size) + 1
    frame = pd.DataFrame(
        {
            "uid": np.repeat([w.uid for w in windows], horizon).astype(np.int64),
            "d": np.repeat([int(w.target_day) for w in windows], horizon).astype(np.int64),
            "t": np.tile(np.arange(horizon, dtype=np.int64), len(windows)),
            "x": xy[:, 0],
            "y": xy[:, 1],
        }
    )[CSV_COLUMNS]
    frame = frame.sort_values(["uid", "d", "t"], kind="mergesort")
    write_frame_csv(path, frame)
