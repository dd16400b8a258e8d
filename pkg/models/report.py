from typing import List

from pydantic import BaseModel, Field


class WindowScore(BaseModel):
    city: str
    uid: int
    day: int
    accuracy: float
    geo_bleu: float
    dtw: float
    evaluated_slots: int


class CitySummary(BaseModel):
    city: str
    windows: int
    accuracy: float
    geo_bleu: float
    dtw: float
    aggregation: str = "per-window-unweighted"

    def to_line(self) -> str:
        return (
            f"city={self.city} windows={self.windows} accuracy={self.accuracy:.6f} "
            f"geo_bleu={self.geo_bleu:.6f} dtw={self.dtw:.6f} aggregation={self.aggregation}"
        )


class EvalReport(BaseModel):
    """Per-window scores in (uid, day) order plus their unweighted city means."""

    scores: List[WindowScore] = Field(default_factory=list)
    summary: CitySummary
