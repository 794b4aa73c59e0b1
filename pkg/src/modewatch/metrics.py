"""Displacement errors between predicted and ground-truth trajectories."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np


class Metric(str, Enum):
    ADE = "ade"
    FDE = "fde"
    RMSE = "rmse"


@dataclass(frozen=True)
class Trajectory:
    """Planar positions over the prediction horizon, shape (H, 2), in meters."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"trajectory must have shape (H, 2), got {pts.shape}")
        if pts.shape[0] == 0:
            raise ValueError("trajectory is empty")
        if not np.all(np.isfinite(pts)):
            raise ValueError("trajectory coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def horizon(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class ErrorRecord:
    t: int
    ade: float
    fde: float
    rmse: float
    true_mode: int | None = None

    def value(self, metric: Metric | str) -> float:
        return getattr(self, Metric(metric).value)


def _as_traj(tr) -> Trajectory:
    return tr if isinstance(tr, Trajectory) else Trajectory(tr)


def _step_distances(pred, truth) -> np.ndarray:
    p, q = _as_traj(pred), _as_traj(truth)
    if p.horizon != q.horizon:
        raise ValueError(f"horizon mismatch: {p.horizon} vs {q.horizon}")
    return np.hypot(*(p.points - q.points).T)


def _root_mean_square(d: np.ndarray) -> float:
    # scaling by the largest distance avoids under/overflow in d**2 and makes
    # a one-step horizon return that step's distance exactly
    top = float(np.max(d))
    if top == 0.0:
        return 0.0
    u = d / top
    return top * float(np.sqrt(np.mean(u * u)))


def ade(pred, truth) -> float:
    return float(np.mean(_step_distances(pred, truth)))


def fde(pred, truth) -> float:
    return float(_step_distances(pred, truth)[-1])


def rmse(pred, truth) -> float:
    return _root_mean_square(_step_distances(pred, truth))


def pair_errors(pred, truth, t: int = 0, true_mode: int | None = None) -> ErrorRecord:
    d = _step_distances(pred, truth)
    return ErrorRecord(
        t, float(np.mean(d)), float(d[-1]), _root_mean_square(d), true_mode
    )


def error_stream(pairs: Iterable[tuple], metric: Metric | str = Metric.ADE) -> list[ErrorRecord]:
    """One record per (pred, truth) pair, in input order, with ``t`` from 1.

    All three metrics are filled in; ``metric`` is validated so callers fail
    early on a typo even though every record carries every metric.
    """
    Metric(metric)
    out = []
    for i, (pred, truth) in enumerate(pairs):
        try:
            out.append(pair_errors(pred, truth, t=i + 1))
        except ValueError as exc:
            raise ValueError(f"pair {i}: {exc}") from exc
    return out


def aggregate_scenes(
    scenes: Sequence[Sequence[tuple]], how: str = "mean"
) -> list[ErrorRecord]:
    """Collapse each scene's per-agent errors into one record (mean or max)."""
    if how not in ("mean", "max"):
        raise ValueError(f"aggregate must be 'mean' or 'max', got {how!r}")
    reduce = np.mean if how == "mean" else np.max
    out = []
    for t, agents in enumerate(scenes, start=1):
        recs = error_stream(agents)
        out.append(
            ErrorRecord(
                t,
                float(reduce([r.ade for r in recs])),
                float(reduce([r.fde for r in recs])),
                float(reduce([r.rmse for r in recs])),
            )
        )
    return out
