"""Vectorized detector runs over many streams at once.

The recursions are sequential in time but independent across streams, so each
time step is applied to every row of a 2-D array at once. Row ``i`` of a run
is bit-for-bit independent of every other row, which is what makes results
invariant to how trials are chunked across workers.

Per-stream quantities that do not depend on detector state (transformed
values, MAP modes, log-likelihood ratios) are computed once in
:func:`prepare` and shared by every detector and threshold scale that reads
the same streams. Rows of a run point at prepared streams through
``stream_index``, so one pass can evaluate many threshold scales.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detectors import D_FLOOR, DetectorConfig
from .mixture import MixtureModel, component_logpdf_matrix, log_density_array, _LOG_SQRT_2PI


@dataclass
class PreparedStreams:
    x: np.ndarray  # transformed values, (n, T)
    mode: np.ndarray  # MAP mode, (n, T)
    llr_mode: np.ndarray  # ln g - ln f_{mode}, (n, T)
    llr_global: np.ndarray  # ln g - ln f, (n, T)

    @property
    def shape(self) -> tuple[int, int]:
        return self.x.shape


@dataclass
class BatchRun:
    first_alarm: np.ndarray  # 1-based time of the first alarm, 0 if none
    alarm_count: np.ndarray  # alarms per row (renewal runs)
    scores: np.ndarray | None  # statistic of the active mode per step
    thresholds: np.ndarray | None = None  # threshold of the active mode per step


def prepare(eps: np.ndarray, pre: MixtureModel, post: MixtureModel) -> PreparedStreams:
    eps = np.atleast_2d(np.asarray(eps, dtype=float))
    n, t = eps.shape
    flat = eps.ravel()
    x = pre.to_domain_array(flat)
    z = (x[:, None] - pre.means[None, :]) / pre.stds[None, :]
    with np.errstate(divide="ignore"):
        logw = np.log(np.array(pre.weights))
    weighted = logw[None, :] + (-0.5 * z * z - np.log(pre.stds)[None, :] - _LOG_SQRT_2PI)
    mode = np.argmax(weighted, axis=1)
    logf = component_logpdf_matrix(pre, flat)
    logg = log_density_array(post, flat)
    llr_mode = logg - logf[np.arange(flat.size), mode]
    llr_global = logg - log_density_array(pre, flat)
    return PreparedStreams(
        x.reshape(n, t),
        mode.reshape(n, t),
        llr_mode.reshape(n, t),
        llr_global.reshape(n, t),
    )


def _rows(prep: PreparedStreams, scales, stream_index):
    n = prep.shape[0]
    if stream_index is None:
        stream_index = np.arange(n)
    stream_index = np.asarray(stream_index, dtype=np.int64)
    scales = np.broadcast_to(np.asarray(scales, dtype=float), stream_index.shape).copy()
    return stream_index, scales


def run_mode_aware(
    prep: PreparedStreams,
    config: DetectorConfig,
    scales=1.0,
    stream_index=None,
    renewal: bool = False,
    record: bool = False,
) -> BatchRun:
    """Run the mode-aware detector on prepared streams.

    Args:
        scales: Per-row threshold multiplier, applied to ``b`` and to
            ``ln((1 - beta) / alpha)`` exactly as :meth:`DetectorConfig.scaled`.
        renewal: Reset a row's detector state after each alarm and keep going.
            Otherwise rows keep running past their first alarm without reset.
        record: Keep the active mode's statistic at every step.
    """
    sidx, scales = _rows(prep, scales, stream_index)
    rows = sidx.size
    k, s = config.k, config.window
    T = prep.shape[1]
    r = np.array(config.r)
    b = np.array(config.b)
    boundary = np.array(config.log_boundary)
    comp_std = np.array([c.std for c in config.pre_change.components])
    lam = config.lam

    W = np.zeros((rows, k))
    theta = scales[:, None] * b[None, :]
    buf = np.zeros((rows, k, s))
    cnt = np.zeros((rows, k), dtype=np.int64)
    pos = np.zeros((rows, k), dtype=np.int64)
    ar = np.arange(rows)
    slots = np.arange(s)[None, :]
    first = np.zeros(rows, dtype=np.int64)
    count = np.zeros(rows, dtype=np.int64)
    scores = np.empty((rows, T)) if record else None
    thresholds = np.empty((rows, T)) if record else None

    for t in range(T):
        m = prep.mode[sidx, t]
        xt = prep.x[sidx, t]
        p = pos[ar, m]
        buf[ar, m, p] = xt
        pos[ar, m] = (p + 1) % s
        c = np.minimum(cnt[ar, m] + 1, s)
        cnt[ar, m] = c

        win = buf[ar, m]
        mask = slots < c[:, None]
        mean = np.where(mask, win, 0.0).sum(axis=1) / c
        dev = np.where(mask, win - mean[:, None], 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            sigma = np.sqrt((dev * dev).sum(axis=1) / (c - 1))
        sigma = np.where(c >= 2, sigma, comp_std[m])

        d = np.maximum(r[m] * sigma, D_FLOOR)
        drift = d / 2.0
        target = 2.0 / (d * d) * (scales * boundary[m])
        th = lam * target + (1.0 - lam) * theta[ar, m]
        w = np.maximum(W[ar, m] + (prep.llr_mode[sidx, t] - drift), 0.0)
        theta[ar, m] = th
        W[ar, m] = w
        if record:
            scores[:, t] = w
            thresholds[:, t] = th

        alarm = w >= th
        if alarm.any():
            hit = np.flatnonzero(alarm)
            new = hit[first[hit] == 0]
            first[new] = t + 1
            count[hit] += 1
            if renewal:
                W[hit] = 0.0
                theta[hit] = scales[hit, None] * b[None, :]
                cnt[hit] = 0
                pos[hit] = 0
    return BatchRun(first, count, scores, thresholds)


def run_global(
    prep: PreparedStreams,
    threshold: float,
    scales=1.0,
    stream_index=None,
    renewal: bool = False,
    record: bool = False,
) -> BatchRun:
    """Run the global CUSUM with per-row threshold ``scales * threshold``."""
    sidx, scales = _rows(prep, scales, stream_index)
    rows = sidx.size
    T = prep.shape[1]
    thr = scales * threshold
    W = np.zeros(rows)
    first = np.zeros(rows, dtype=np.int64)
    count = np.zeros(rows, dtype=np.int64)
    scores = np.empty((rows, T)) if record else None
    for t in range(T):
        W = np.maximum(W + prep.llr_global[sidx, t], 0.0)
        if record:
            scores[:, t] = W
        alarm = W >= thr
        if alarm.any():
            hit = np.flatnonzero(alarm)
            new = hit[first[hit] == 0]
            first[new] = t + 1
            count[hit] += 1
            if renewal:
                W[hit] = 0.0
    thresholds = np.broadcast_to(thr[:, None], (rows, T)) if record else None
    return BatchRun(first, count, scores, thresholds)
