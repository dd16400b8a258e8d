import math
import os
import tempfile
import unittest

import numpy as np
import pandas as pd

from errors import ConfigError, DataFileError, ShapeError
from metrics.trajectory import TrajPair, accuracy, dtw, geo_bleu
from mobility.windows import build_city_forecast_windows
from models.mobility import GridCell
from services.evaluation_service import (
    average_summaries,
    evaluate_predictions,
    export_predictions,
    summary_path,
    write_report,
)

from fixtures import TINY_GRID, tiny_city


def brute_force_dtw(a, b):
    """Minimum cost over every monotone alignment path, enumerated recursively."""
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))
    n, m = cost.shape
    best = math.inf

    def walk(i, j, total):
        nonlocal best
        total += cost[i, j]
        if i == n - 1 and j == m - 1:
            best = min(best, total)
            return
        if i + 1 < n:
            walk(i + 1, j, total)
        if j + 1 < m:
            walk(i, j + 1, total)
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, total)

    walk(0, 0, 0.0)
    return best


def _perfect_predictions(windows, history_len):
    out = np.zeros((len(windows), 48), dtype=np.int64)
    for row, w in enumerate(windows):
        horizon_targets = w.targets[history_len:]
        observed = w.loss_mask[history_len:].astype(bool)
        out[row, observed] = horizon_targets[observed]
    return out


class AccuracyTests(unittest.TestCase):
    def test_share_of_exact_hits(self):
        pair = TrajPair([(0, 0), (1, 1), (2, 2), (3, 3)], [(0, 0), (1, 1), (0, 0), (3, 3)])
        self.assertEqual(accuracy(pair), 0.75)

    def test_matches_hamming_complement(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            n = int(rng.integers(1, 10))
            a = rng.integers(0, 3, size=(n, 2))
            b = rng.integers(0, 3, size=(n, 2))
            hamming = np.mean(np.any(a != b, axis=1))
            self.assertAlmostEqual(accuracy(TrajPair(a, b)), 1.0 - hamming, places=12)

    def test_length_mismatch_and_empty(self):
        with self.assertRaises(ValueError):
            accuracy(TrajPair([(0, 0)], [(0, 0), (1, 1)]))
        with self.assertRaises(ValueError):
            accuracy(TrajPair(np.zeros((0, 2)), np.zeros((0, 2))))

    def test_grid_cells_accepted(self):
        cells = [GridCell(1, 2, grid_size=4), GridCell(3, 3, grid_size=4)]
        self.assertEqual(accuracy(TrajPair.from_cells(cells, cells)), 1.0)


class DtwTests(unittest.TestCase):
    def test_matches_exhaustive_alignment(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a = rng.integers(0, 6, size=(int(rng.integers(1, 6)), 2)).astype(float)
            b = rng.integers(0, 6, size=(int(rng.integers(1, 6)), 2)).astype(float)
            self.assertAlmostEqual(dtw(TrajPair(a, b)), brute_force_dtw(a, b), places=10)

    def test_symmetric_and_zero_on_identity(self):
        rng = np.random.default_rng(1)
        a = rng.integers(0, 10, size=(5, 2))
        b = rng.integers(0, 10, size=(4, 2))
        self.assertAlmostEqual(dtw(TrajPair(a, b)), dtw(TrajPair(b, a)), places=12)
        self.assertEqual(dtw(TrajPair(a, a)), 0.0)

    def test_constant_offset_over_a_day(self):
        pair = TrajPair(np.zeros((48, 2)), np.tile([3.0, 4.0], (48, 1)))
        self.assertAlmostEqual(dtw(pair), 240.0, places=9)


class GeoBleuTests(unittest.TestCase):
    def test_identity_is_one(self):
        rng = np.random.default_rng(3)
        cells = rng.integers(0, 5, size=(12, 2))
        self.assertAlmostEqual(geo_bleu(TrajPair(cells, cells)), 1.0, places=12)

    def test_single_unigram_decays_with_distance(self):
        self.assertAlmostEqual(geo_bleu(TrajPair([(0, 0)], [(0, 1)])), 0.606531, places=6)
        self.assertAlmostEqual(geo_bleu(TrajPair([(0, 0)], [(3, 4)])), math.exp(-2.5), places=9)

    def test_unigram_score_falls_as_prediction_drifts(self):
        reference = np.array([(20 * i, 3) for i in range(6)], dtype=float)
        scores = [geo_bleu(TrajPair(reference + [k, 0.0], reference), n=1) for k in range(6)]
        for k, score in enumerate(scores):
            self.assertAlmostEqual(score, math.exp(-0.5 * k), places=12)
        self.assertTrue(all(a > b for a, b in zip(scores, scores[1:])))

    def test_short_prediction_gets_brevity_penalty(self):
        score = geo_bleu(TrajPair([(0, 0)], [(0, 0), (0, 0)]))
        self.assertAlmostEqual(score, 0.5 * math.exp(-1.0), places=12)

    def test_unmatched_ngrams_count_against_the_longer_side(self):
        # Unigrams match exactly; the bigram (0,0)->(9,9) is far from (0,0)->(0,0).
        pair = TrajPair([(0, 0), (9, 9)], [(0, 0), (0, 0)])
        unigram = (1.0 + math.exp(-0.5 * math.hypot(9, 9))) / 2
        bigram = math.exp(-0.5 * math.hypot(9, 9) / 2)
        self.assertAlmostEqual(geo_bleu(pair, n=2), math.sqrt(unigram * bigram), places=12)

    def test_weights_and_beta_validation(self):
        pair = TrajPair([(0, 0), (1, 1)], [(0, 0), (1, 2)])
        self.assertLessEqual(geo_bleu(pair, n=2, weights=[1.0, 0.0]), 1.0)
        with self.assertRaises(ConfigError):
            geo_bleu(pair, beta=0.0)
        with self.assertRaises(ConfigError):
            geo_bleu(pair, n=0)


class EvaluationTests(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        city = tiny_city(n_users=3)
        self.windows = build_city_forecast_windows(city, first_day=10, last_day=14, history_len=8, horizon=48)

    def tearDown(self):
        self.tmp.cleanup()

    def test_perfect_predictor_scores_perfectly(self):
        report = evaluate_predictions(self.windows, _perfect_predictions(self.windows, 8), grid_size=TINY_GRID, history_len=8, city="T")
        self.assertEqual(report.summary.windows, len(self.windows))
        self.assertAlmostEqual(report.summary.accuracy, 1.0)
        self.assertAlmostEqual(report.summary.geo_bleu, 1.0)
        self.assertAlmostEqual(report.summary.dtw, 0.0)
        keys = [(s.uid, s.day) for s in report.scores]
        self.assertEqual(keys, sorted(keys))

    def test_report_file_has_aggregation_line_and_summary_row(self):
        predictions = np.zeros((len(self.windows), 48), dtype=np.int64)
        report = evaluate_predictions(self.windows, predictions, grid_size=TINY_GRID, history_len=8, city="T")
        path = os.path.join(self.tmp.name, "report.csv")
        write_report(report, path)
        with open(path, encoding="utf-8") as f:
            self.assertEqual(f.readline().strip(), "# aggregation=per-window-unweighted")
        frame = pd.read_csv(path, skiprows=1)
        self.assertEqual(list(frame.columns), ["city", "uid", "day", "accuracy", "geo_bleu", "dtw"])
        self.assertEqual(str(frame.iloc[-1]["uid"]), "ALL")
        self.assertEqual(len(frame), len(report.scores) + 1)
        self.assertAlmostEqual(float(frame.iloc[-1]["accuracy"]), report.summary.accuracy, delta=1e-6)
        self.assertIn("aggregation=per-window-unweighted", report.summary.to_line())

    def test_summary_line_sidecar_and_seed_mean(self):
        predictions = np.zeros((len(self.windows), 48), dtype=np.int64)
        report = evaluate_predictions(self.windows, predictions, grid_size=TINY_GRID, history_len=8, city="T")
        path = os.path.join(self.tmp.name, "report.csv")
        write_report(report, path)
        with open(summary_path(path), encoding="utf-8") as f:
            self.assertEqual(f.read(), report.summary.to_line() + "\n")
        other = report.summary.model_copy(update={"accuracy": 1.0, "dtw": 0.0})
        mean = average_summaries([report.summary, other])
        self.assertAlmostEqual(mean.accuracy, (report.summary.accuracy + 1.0) / 2)
        self.assertAlmostEqual(mean.dtw, report.summary.dtw / 2)
        self.assertEqual(mean.windows, report.summary.windows)
        self.assertEqual(mean.aggregation, "per-window-unweighted/mean-of-2-seeds")
        with self.assertRaises(ShapeError):
            average_summaries([report.summary, other.model_copy(update={"windows": 1})])

    def test_prediction_export_is_one_based_and_sorted(self):
        predictions = np.full((len(self.windows), 48), TINY_GRID * TINY_GRID - 1, dtype=np.int64)
        path = os.path.join(self.tmp.name, "pred.csv")
        export_predictions(self.windows, predictions, path, TINY_GRID)
        frame = pd.read_csv(path)
        self.assertEqual(len(frame), 48 * len(self.windows))
        self.assertTrue((frame["x"] == TINY_GRID).all() and (frame["y"] == TINY_GRID).all())
        self.assertTrue(frame.sort_values(["uid", "d", "t"]).index.equals(frame.index))

    def test_no_windows_is_an_error(self):
        with self.assertRaises(DataFileError):
            evaluate_predictions([], np.zeros((0, 48), dtype=np.int64), grid_size=TINY_GRID)


if __name__ == "__main__":
    unittest.main()
