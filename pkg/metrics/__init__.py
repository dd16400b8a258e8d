"""Trajectory similarity metrics: accuracy, DTW and GEO-BLEU."""

from metrics.trajectory import TrajPair, accuracy, dtw, geo_bleu

__all__ = ["TrajPair", "accuracy", "dtw", "geo_bleu"]
