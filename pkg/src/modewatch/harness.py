"""Monte Carlo evaluation of change detectors on synthetic error streams.

A :class:`Scenario` describes one family of streams: latent modes drawn from
a :class:`~modewatch.dynamics.ModeSequenceSpec`, pre-change errors drawn from
the active mixture component, and post-change errors drawn from ``g`` from
the change time ``gamma`` onward (``gamma=None`` gives a null stream that
never changes).

Trial ``i`` of a stream family keyed ``key`` under master seed ``s`` uses seed
``derive_seed(s, key, i)``; its modes use ``derive_seed(seed, 0)`` and its
noise ``derive_seed(seed, 1)``. Nothing else feeds the stream, so results do
not depend on the order or the process in which trials are simulated.

Detectors are driven through small runner objects exposing ``run(streams,
scales, stream_index, renewal, record)`` and returning a
:class:`~modewatch.batch.BatchRun`. The built-in runners use the vectorized
engine in :mod:`modewatch.batch`; :class:`FactoryRunner` wraps any
step-by-step detector.

Conventions used by the estimators:

* Delay is ``tau - gamma + 1`` for trials with ``tau >= gamma``. Trials that
  never alarm are censored at ``L - gamma + 1`` and counted in
  ``censored_frac``. Trials that alarm before ``gamma`` are false alarms and
  are left out of the delay average.
* FAR is alarms per null step with the detector restarted after each alarm;
  MTFA is null steps per alarm, so ``far * mtfa == 1`` up to rounding.
* WADD takes, for each change time, the worst mean delay over equal-count
  buckets of the statistic value just before the change, then the worst
  change time.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import batch
from .detectors import DetectorConfig
from .dynamics import ModeSequenceSpec, generate
from .errors import ConfigError, InsufficientDataError
from .mixture import GaussianComponent, MixtureModel, Transform, fit_em, log_density_array
from .rng import derive_seed, make_rng

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
NULL_KEY = 0
FIT_KEY = 99
MIN_NULL_ALARMS = 30


# -- scenarios and streams ---------------------------------------------------


def _as_mixture(model, transform: Transform) -> MixtureModel:
    if isinstance(model, GaussianComponent):
        return MixtureModel((1.0,), (model,), transform)
    return model


@dataclass(frozen=True)
class Scenario:
    spec: ModeSequenceSpec
    pre_change: MixtureModel
    post_change: MixtureModel
    gamma: int | None
    length: int

    def __post_init__(self):
        object.__setattr__(
            self, "post_change", _as_mixture(self.post_change, self.pre_change.transform)
        )
        if isinstance(self.length, bool) or int(self.length) != self.length or self.length < 1:
            raise ConfigError("length", f"must be an integer >= 1, got {self.length!r}")
        if self.spec.k != self.pre_change.k:
            raise ConfigError("pi", f"{self.spec.k} modes but {self.pre_change.k} components")
        if self.gamma is not None:
            if int(self.gamma) != self.gamma or not 1 <= self.gamma <= self.length:
                raise ConfigError("gamma", f"must lie in [1, {self.length}], got {self.gamma!r}")
            object.__setattr__(self, "gamma", int(self.gamma))

    def with_gamma(self, gamma: int | None) -> "Scenario":
        return replace(self, gamma=gamma)

    def with_length(self, length: int) -> "Scenario":
        return replace(self, length=length)


def default_gammas(length: int) -> tuple[int, ...]:
    """Change-time grid ``{1, L/4, L/2, 3L/4}`` (duplicates dropped)."""
    grid = [1, length // 4, length // 2, (3 * length) // 4]
    return tuple(sorted({g for g in grid if g >= 1}))


def simulate_stream(scenario: Scenario, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw one raw error stream and its latent modes.

    Returns:
        ``(eps, modes)`` with ``eps[t-1]`` the error at time ``t``. Errors
        before ``gamma`` come from component ``modes[t-1]`` of the pre-change
        mixture; from ``gamma`` on they come from the post-change model.
    """
    L = scenario.length
    modes = generate(scenario.spec, L, derive_seed(seed, 0)).modes
    rng = make_rng(derive_seed(seed, 1))
    z = rng.standard_normal(L)
    u = rng.random(L)
    pre = scenario.pre_change
    x = pre.means[modes] + pre.stds[modes] * z
    eps = pre.from_domain_array(x)
    g = scenario.gamma
    if g is not None:
        post = scenario.post_change
        lab = np.searchsorted(np.cumsum(post.weights), u[g - 1 :], side="right")
        lab = np.minimum(lab, post.k - 1)
        y = post.means[lab] + post.stds[lab] * z[g - 1 :]
        eps[g - 1 :] = post.from_domain_array(y)
    return eps, modes


@dataclass
class StreamSet:
    """A block of equally long streams sharing one change time."""

    eps: np.ndarray
    modes: np.ndarray
    gamma: int | None
    seeds: tuple[int, ...] = ()
    _prepared: dict = field(default_factory=dict, repr=False)

    @property
    def trials(self) -> int:
        return self.eps.shape[0]

    @property
    def length(self) -> int:
        return self.eps.shape[1]

    def labels(self) -> np.ndarray:
        """Per-step labels, True from the change time onward."""
        lab = np.zeros(self.eps.shape, dtype=bool)
        if self.gamma is not None:
            lab[:, self.gamma - 1 :] = True
        return lab

    def prepared(self, pre: MixtureModel, post: MixtureModel) -> batch.PreparedStreams:
        key = (pre, post)
        if key not in self._prepared:
            self._prepared[key] = batch.prepare(self.eps, pre, post)
        return self._prepared[key]


def simulate_streams(scenario: Scenario, master_seed: int, trials: int, key: int = 0) -> StreamSet:
    if trials < 1:
        raise ConfigError("trials", f"must be >= 1, got {trials}")
    seeds = tuple(derive_seed(master_seed, key, i) for i in range(trials))
    eps = np.empty((trials, scenario.length))
    modes = np.empty((trials, scenario.length), dtype=np.int8)
    for i, s in enumerate(seeds):
        eps[i], modes[i] = simulate_stream(scenario, s)
    return StreamSet(eps, modes, scenario.gamma, seeds)


# -- detector runners --------------------------------------------------------


class ModeAwareRunner:
    name = "mode_aware"

    def __init__(self, config: DetectorConfig):
        self.config = config

    def run(self, streams: StreamSet, scales=1.0, stream_index=None, renewal=False, record=False):
        prep = streams.prepared(self.config.pre_change, self.config.post_change)
        return batch.run_mode_aware(prep, self.config, scales, stream_index, renewal, record)


class GlobalRunner:
    name = "global"

    def __init__(self, pre: MixtureModel, post: MixtureModel, threshold: float):
        if not threshold > 0:
            raise ConfigError("threshold", f"must be > 0, got {threshold!r}")
        self.pre = pre
        self.post = _as_mixture(post, pre.transform)
        self.threshold = float(threshold)

    @classmethod
    def from_config(cls, config: DetectorConfig) -> "GlobalRunner":
        if config.threshold is None:
            raise ConfigError("threshold", "required for the global detector")
        return cls(config.pre_change, config.post_change, config.threshold)

    def run(self, streams: StreamSet, scales=1.0, stream_index=None, renewal=False, record=False):
        prep = streams.prepared(self.pre, self.post)
        return batch.run_global(prep, self.threshold, scales, stream_index, renewal, record)


class FactoryRunner:
    """Drive any step-by-step detector built by ``factory(scale)``.

    The detector must expose ``step(eps)`` returning an object with
    ``alarmed`` and ``statistic`` attributes. After an alarm a fresh detector
    is built, so recorded scores continue past the first alarm.
    """

    name = "custom"

    def __init__(self, factory: Callable[[float], object], name: str | None = None):
        self.factory = factory
        if name:
            self.name = name

    def run(self, streams: StreamSet, scales=1.0, stream_index=None, renewal=False, record=False):
        n, T = streams.eps.shape
        sidx = np.arange(n) if stream_index is None else np.asarray(stream_index, dtype=np.int64)
        scales = np.broadcast_to(np.asarray(scales, dtype=float), sidx.shape)
        first = np.zeros(sidx.size, dtype=np.int64)
        count = np.zeros(sidx.size, dtype=np.int64)
        scores = np.empty((sidx.size, T)) if record else None
        for row, (i, c) in enumerate(zip(sidx.tolist(), scales.tolist())):
            det = self.factory(c)
            for t, eps in enumerate(streams.eps[i].tolist()):
                out = det.step(eps)
                if record:
                    scores[row, t] = out.statistic
                if out.alarmed:
                    if first[row] == 0:
                        first[row] = t + 1
                    count[row] += 1
                    if not (renewal or record):
                        break
                    det = self.factory(c)
        return batch.BatchRun(first, count, scores)


# -- trial bookkeeping -------------------------------------------------------


@dataclass(frozen=True)
class TrialResult:
    tau: int | None
    gamma: int | None
    seed: int

    @property
    def delay(self) -> int | None:
        if self.tau is None or self.gamma is None or self.tau < self.gamma:
            return None
        return self.tau - self.gamma + 1

    @property
    def false_alarm(self) -> bool:
        return self.tau is not None and (self.gamma is None or self.tau < self.gamma)


def trial_results(first_alarm: np.ndarray, gamma: int | None, seeds: Sequence[int]) -> list[TrialResult]:
    return [
        TrialResult(int(a) if a > 0 else None, gamma, int(s))
        for a, s in zip(np.asarray(first_alarm).tolist(), seeds)
    ]


def conditional_delays(first_alarm: np.ndarray, gamma: int, length: int):
    """Delays of the trials still running at ``gamma``.

    Returns:
        ``(delays, censored, valid)`` where ``valid`` marks trials without a
        false alarm, ``delays`` holds their delays (censored at
        ``length - gamma + 1``) and ``censored`` marks the ones with no alarm.
    """
    a = np.asarray(first_alarm)
    valid = (a == 0) | (a >= gamma)
    censored = a[valid] == 0
    delays = np.where(censored, length - gamma + 1, a[valid] - gamma + 1).astype(float)
    return delays, censored, valid


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    if x.size == 0:
        return math.nan, math.nan
    if x.size == 1:
        return float(x[0]), math.nan
    return float(np.mean(x)), float(np.std(x, ddof=1) / math.sqrt(x.size))


# -- WADD --------------------------------------------------------------------


@dataclass(frozen=True)
class GammaDelay:
    gamma: int
    trials: int
    mean_delay: float
    stderr: float
    worst_bucket_delay: float
    worst_bucket_stderr: float
    censored_frac: float
    false_alarms: int
    buckets: tuple = field(default=(), repr=False, compare=False)  # delays per history bucket


@dataclass(frozen=True)
class WaddEstimate:
    """Worst-case delay over change times and pre-change history buckets.

    ``wadd`` is cross-fitted: the worst (change time, bucket) cell is chosen
    on one half of the trials and its mean delay read off the other half,
    then the halves swap and the two readings are averaged. Taking the plain
    maximum of many noisy cell means is biased upward at small trial counts;
    that plain maximum is kept as ``naive_wadd`` for reference.
    """

    wadd: float
    stderr: float
    worst_gamma: int
    mean_delay: float
    censored_frac: float
    per_gamma: tuple[GammaDelay, ...]
    naive_wadd: float = math.nan

    @property
    def lower_bound_only(self) -> bool:
        """True when censoring means the true delay may be larger."""
        return self.censored_frac > 0


def gamma_delay(first_alarm, pre_stat, gamma: int, length: int, buckets: int = 4) -> GammaDelay:
    """Delay summary at one change time, bucketing by the statistic at ``gamma - 1``."""
    delays, censored, valid = conditional_delays(first_alarm, gamma, length)
    n = delays.size
    mean, se = _mean_se(delays)
    worst, worst_se = mean, se
    parts = [delays] if n else []
    if pre_stat is not None and gamma > 1 and n >= 2 * buckets:
        s = np.asarray(pre_stat, dtype=float)[valid]
        if np.ptp(s) > 0:
            order = np.argsort(s, kind="stable")
            parts = [delays[np.sort(idx)] for idx in np.array_split(order, buckets)]
            for part in parts:
                m, e = _mean_se(part)
                if m > worst:
                    worst, worst_se = m, e
    return GammaDelay(
        gamma,
        int(n),
        mean,
        se,
        worst,
        worst_se,
        float(censored.mean()) if n else math.nan,
        int((~valid).sum()),
        tuple(parts),
    )


def _cross_fit(cells: Sequence[np.ndarray]) -> tuple[float, float] | None:
    """Two-fold estimate of the largest cell mean; None if a fold is empty."""
    halves = [(c[0::2], c[1::2]) for c in cells]
    if any(a.size == 0 or b.size == 0 for a, b in halves):
        return None
    readings = []
    for pick, read in ((0, 1), (1, 0)):
        j = int(np.argmax([h[pick].mean() for h in halves]))
        readings.append(_mean_se(halves[j][read]))
    est = 0.5 * (readings[0][0] + readings[1][0])
    se = 0.5 * math.sqrt(sum(e * e for _, e in readings if math.isfinite(e)))
    return est, se


def summarize_wadd(per_gamma: Sequence[GammaDelay]) -> WaddEstimate:
    usable = [g for g in per_gamma if g.trials > 0]
    if not usable:
        raise InsufficientDataError("every trial raised a false alarm before the change")
    worst = max(usable, key=lambda g: (g.worst_bucket_delay, -g.gamma))
    n = sum(g.trials for g in usable)
    cens = sum(g.censored_frac * g.trials for g in usable) / n
    fitted = _cross_fit([c for g in usable for c in g.buckets])
    wadd, se = fitted if fitted is not None else (worst.worst_bucket_delay, worst.worst_bucket_stderr)
    return WaddEstimate(
        wadd,
        se,
        worst.gamma,
        float(np.mean([g.mean_delay for g in usable])),
        float(cens),
        tuple(per_gamma),
        worst.worst_bucket_delay,
    )


def estimate_wadd(
    runner,
    scenario: Scenario,
    trials: int,
    master_seed: int,
    gammas: Sequence[int] | None = None,
    scale: float = 1.0,
    buckets: int = 4,
    min_trials: int = 100,
) -> WaddEstimate:
    """Worst-case average detection delay over a grid of change times."""
    if trials < min_trials:
        raise InsufficientDataError(f"need at least {min_trials} trials per change time, got {trials}")
    gammas = tuple(gammas) if gammas is not None else default_gammas(scenario.length)
    out = []
    for j, g in enumerate(gammas):
        ss = simulate_streams(scenario.with_gamma(g), master_seed, trials, key=j + 1)
        res = runner.run(ss, scale, record=g > 1)
        pre_stat = res.scores[:, g - 2] if g > 1 else None
        out.append(gamma_delay(res.first_alarm, pre_stat, g, scenario.length, buckets))
    return summarize_wadd(out)


# -- FAR / MTFA --------------------------------------------------------------


@dataclass(frozen=True)
class FarEstimate:
    far: float
    mtfa: float
    alarms: int
    steps: int
    upper_bound_only: bool = False


def far_from_counts(alarms: int, steps: int) -> FarEstimate:
    if steps <= 0:
        raise InsufficientDataError("no null steps")
    if alarms == 0:
        return FarEstimate(0.0, math.inf, 0, int(steps), True)
    return FarEstimate(alarms / steps, steps / alarms, int(alarms), int(steps))


def estimate_far_mtfa(
    runner,
    scenario: Scenario,
    trials: int,
    horizon: int,
    master_seed: int,
    scale: float = 1.0,
    min_alarms: int = MIN_NULL_ALARMS,
    max_widen: int = 3,
) -> FarEstimate:
    """False-alarm rate and mean time to false alarm from renewal null runs.

    If fewer than ``min_alarms`` alarms are seen, the horizon is doubled (up
    to ``max_widen`` times) with a warning. With no alarms at all the result
    has ``far == 0`` and ``upper_bound_only`` set.
    """
    null = scenario.with_gamma(None)
    for attempt in range(max_widen + 1):
        ss = simulate_streams(null.with_length(horizon), master_seed, trials, key=NULL_KEY)
        res = runner.run(ss, scale, renewal=True)
        alarms = int(res.alarm_count.sum())
        if alarms >= min_alarms or attempt == max_widen:
            break
        warnings.warn(
            f"only {alarms} null alarms in {trials * horizon} steps; widening horizon to {2 * horizon}",
            stacklevel=2,
        )
        horizon *= 2
    if 0 < alarms < min_alarms:
        warnings.warn(f"FAR estimate rests on only {alarms} alarms", stacklevel=2)
    return far_from_counts(alarms, trials * horizon)


# -- ROC / PR ----------------------------------------------------------------


@dataclass(frozen=True)
class RocResult:
    auroc: float
    aupr: float
    fpr: np.ndarray
    tpr: np.ndarray
    precision: np.ndarray
    recall: np.ndarray


def roc_pr(scores, labels) -> RocResult:
    """AUROC (Mann-Whitney, ties count one half) and step-integrated AUPR.

    Curve points are taken at every distinct score, highest first, with the
    origin prepended to the ROC curve.
    """
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise InsufficientDataError("need both positive and negative labels; ROC undefined")

    ranks = stats.rankdata(s)
    auroc = (ranks[y].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0)

    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), s.size - 1]
    tp = np.cumsum(y_sorted)[last].astype(float)
    fp = (last + 1) - tp
    tpr = tp / n1
    fpr = fp / n0
    precision = tp / (last + 1)
    recall = tpr
    aupr = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return RocResult(
        float(auroc),
        aupr,
        np.r_[0.0, fpr],
        np.r_[0.0, tpr],
        precision,
        recall,
    )


def average_curves(results: Sequence[RocResult], points: int = 101):
    """Average ROC (vertically, at fixed FPR) and PR (at fixed recall) curves.

    Precision at recall level ``r`` is read from the first curve point whose
    recall reaches ``r``.
    """
    grid = np.linspace(0.0, 1.0, points)
    tpr = np.mean([np.interp(grid, r.fpr, r.tpr) for r in results], axis=0)
    prec = []
    for r in results:
        idx = np.minimum(np.searchsorted(r.recall, grid, side="left"), r.recall.size - 1)
        prec.append(r.precision[idx])
    return grid, tpr, grid.copy(), np.mean(prec, axis=0)


# -- sweeps ------------------------------------------------------------------


@dataclass(frozen=True)
class SweepPoint:
    threshold_scale: float
    far: float
    mean_delay: float
    stderr: float
    censored_frac: float
    trials: int
    alarms: int


def _check_grid(scales) -> np.ndarray:
    grid = np.asarray(scales, dtype=float)
    if grid.ndim != 1 or grid.size < 5:
        raise ConfigError("threshold_grid", "need at least 5 threshold scales")
    if not np.all(np.isfinite(grid)) or np.any(grid <= 0):
        raise ConfigError("threshold_grid", "scales must be finite and > 0")
    if np.unique(grid).size != grid.size:
        raise ConfigError("threshold_grid", "scales must be distinct")
    return grid


def null_alarm_counts(runner, null: StreamSet, scales) -> np.ndarray:
    """Renewal alarm counts per scale, summed over the null streams."""
    scales = np.asarray(scales, dtype=float)
    n, R = null.trials, scales.size
    res = runner.run(null, np.tile(scales, n), np.repeat(np.arange(n), R), renewal=True)
    return res.alarm_count.reshape(n, R).sum(axis=0)


def delays_at_scales(runner, change_sets: Sequence[StreamSet], scales, record_first: bool = False):
    """First-alarm times per change-time set, shape (trials, len(scales))."""
    scales = np.asarray(scales, dtype=float)
    out, recorded = [], []
    for ss in change_sets:
        n, R = ss.trials, scales.size
        res = runner.run(ss, np.tile(scales, n), np.repeat(np.arange(n), R), record=record_first)
        out.append(res.first_alarm.reshape(n, R))
        if record_first:
            recorded.append(res.scores.reshape(n, R, -1)[:, 0, :])
    return (out, recorded) if record_first else out


def sweep_delay_vs_far(
    runner,
    scenario: Scenario,
    scales,
    trials: int,
    master_seed: int,
    null_trials: int,
    null_horizon: int,
    gammas: Sequence[int] | None = None,
) -> list[SweepPoint]:
    """Delay-versus-FAR curve over a grid of threshold scales, highest FAR first."""
    grid = _check_grid(scales)
    null = simulate_streams(scenario.with_gamma(None).with_length(null_horizon), master_seed, null_trials, NULL_KEY)
    counts = null_alarm_counts(runner, null, grid)
    gammas = tuple(gammas) if gammas is not None else default_gammas(scenario.length)
    sets = [
        simulate_streams(scenario.with_gamma(g), master_seed, trials, key=j + 1)
        for j, g in enumerate(gammas)
    ]
    firsts = delays_at_scales(runner, sets, grid)
    steps = null_trials * null_horizon
    points = []
    for r, c in enumerate(grid.tolist()):
        means, ses, cens, n = [], [], [], 0
        for g, fa in zip(gammas, firsts):
            d, cz, _ = conditional_delays(fa[:, r], g, scenario.length)
            m, e = _mean_se(d)
            means.append(m)
            ses.append(e)
            cens.append(cz.sum())
            n += d.size
        far = far_from_counts(int(counts[r]), steps).far
        points.append(
            SweepPoint(
                c,
                far,
                float(np.mean(means)),
                float(math.sqrt(np.sum(np.square(ses))) / len(ses)),
                float(np.sum(cens) / n) if n else math.nan,
                n,
                int(counts[r]),
            )
        )
    return sorted(points, key=lambda p: (-p.far, p.threshold_scale))


# -- calibration -------------------------------------------------------------


def interpolate_scale(scales, counts, steps: int, target_far: float) -> float | None:
    """Scale at which the renewal FAR curve crosses ``target_far``.

    Interpolates ``log FAR`` linearly in ``log scale`` after forcing the curve
    to be non-increasing. Returns None when the target is not bracketed.
    """
    order = np.argsort(scales)
    sc = np.asarray(scales, dtype=float)[order]
    far = np.asarray(counts, dtype=float)[order] / steps
    far = np.minimum.accumulate(far)
    if not (far[0] >= target_far >= far[-1]) or far[0] == 0:
        return None
    with np.errstate(divide="ignore"):
        lf = np.log(far)
    lt = math.log(target_far)
    # first index at or below the target
    j = int(np.argmax(lf <= lt))
    if j == 0 or lf[j] == lt:
        return float(sc[j])
    i = j - 1
    while i > 0 and lf[i] == lf[j - 1] and lf[i - 1] == lf[i]:
        i -= 1
    if not np.isfinite(lf[j]):
        return float(sc[i])
    w = (lt - lf[i]) / (lf[j] - lf[i])
    return float(math.exp(math.log(sc[i]) + w * (math.log(sc[j]) - math.log(sc[i]))))


# -- benchmark configuration -------------------------------------------------


def _require(doc: dict, key: str, section: str):
    if key not in doc:
        raise ConfigError(key, f"missing from '{section}'")
    return doc[key]


def _int(value, key: str, lo: int) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise ConfigError(key, f"must be an integer, got {value!r}")
    if value < lo:
        raise ConfigError(key, f"must be >= {lo}, got {value!r}")
    return int(value)


def _model(doc, key: str, transform: str | None = None) -> MixtureModel:
    if not isinstance(doc, dict):
        raise ConfigError(key, "expected a model object")
    if transform is not None and "transform" not in doc:
        doc = {**doc, "transform": transform}
    try:
        return MixtureModel.from_dict(doc)
    except ConfigError as exc:
        raise ConfigError(f"{key}.{exc.key}", str(exc).split(": ", 1)[-1]) from None


DETECTOR_KEYS = (
    "b0", "b1", "r0", "r1", "alpha0", "alpha1", "beta0", "beta1",
    "window", "lambda", "threshold", "pre_change", "post_change",
)


def detector_config_from_dict(doc: dict, pre: MixtureModel | None = None, post: MixtureModel | None = None) -> DetectorConfig:
    """Build a :class:`DetectorConfig` from the flat ``b0, b1, ...`` layout.

    Per-mode keys run ``b0 .. b{K-1}``. ``pre_change``/``post_change`` in the
    block override the models passed in.
    """
    if not isinstance(doc, dict):
        raise ConfigError("detector", "expected an object")
    if "pre_change" in doc:
        pre = _model(doc["pre_change"], "pre_change")
    if "post_change" in doc:
        post = _model(doc["post_change"], "post_change", pre.transform.value if pre else None)
    if pre is None:
        raise ConfigError("pre_change", "missing")
    if post is None:
        raise ConfigError("post_change", "missing")
    k = pre.k
    per = {}
    for name in ("b", "r", "alpha", "beta"):
        vals = []
        for m in range(k):
            v = _require(doc, f"{name}{m}", "detector")
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{name}{m}", f"must be a number, got {v!r}")
            vals.append(float(v))
        per[name] = tuple(vals)
    threshold = doc.get("threshold")
    if threshold is not None and (isinstance(threshold, bool) or not isinstance(threshold, (int, float))):
        raise ConfigError("threshold", f"must be a number, got {threshold!r}")
    lam = _require(doc, "lambda", "detector")
    if isinstance(lam, bool) or not isinstance(lam, (int, float)):
        raise ConfigError("lambda", f"must be a number, got {lam!r}")
    return DetectorConfig(
        b=per["b"],
        r=per["r"],
        alpha=per["alpha"],
        beta=per["beta"],
        window=_int(_require(doc, "window", "detector"), "window", 2),
        lam=float(lam),
        pre_change=pre,
        post_change=post,
        threshold=None if threshold is None else float(threshold),
    )


@dataclass(frozen=True)
class BenchmarkConfig:
    """Validated benchmark document.

    ``trials`` change streams of length ``horizon`` are drawn per change time
    and per seed; ``null_trials`` null streams of length ``null_horizon`` per
    seed feed FAR estimation and threshold calibration. The global detector
    runs at ``threshold_grid`` times its threshold; the mode-aware detector is
    calibrated to the same FAR at each grid point.
    """

    name: str
    scenario: Scenario
    detector: DetectorConfig
    gammas: tuple[int, ...]
    trials: int
    horizon: int
    null_trials: int
    null_horizon: int
    threshold_grid: tuple[float, ...]
    master_seed: int
    seeds: int
    headline: int
    lgmm_k: int
    fit_samples: int
    wadd_buckets: int
    far_tolerance: float
    document: dict = field(compare=False, repr=False)

    @property
    def has_change(self) -> bool:
        return len(self.gammas) > 0

    def digest(self) -> str:
        return config_digest(self.document)

    @classmethod
    def from_dict(cls, doc: dict) -> "BenchmarkConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config", "expected an object")
        version = doc.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError("schema_version", f"unsupported version {version!r}")
        for section in ("scenario", "detector", "evaluation"):
            if not isinstance(doc.get(section), dict):
                raise ConfigError(section, "missing section")
        sc, ev = doc["scenario"], doc["evaluation"]
        bl = doc.get("baselines", {}) or {}
        if not isinstance(bl, dict):
            raise ConfigError("baselines", "expected an object")

        pre = _model(_require(sc, "pre_change", "scenario"), "pre_change")
        post_doc = sc.get("post_change")
        post = _model(post_doc, "post_change", pre.transform.value) if post_doc is not None else pre
        dyn = ModeSequenceSpec.from_dict(_require(sc, "dynamics", "scenario"))

        horizon = _int(_require(ev, "horizon", "evaluation"), "horizon", 1)
        trials = _int(_require(ev, "trials", "evaluation"), "trials", 1)
        if trials < 100:
            raise ConfigError("trials", f"need at least 100 trials per change time, got {trials}")
        if post_doc is None:
            gammas: tuple[int, ...] = ()
        elif "gammas" in sc:
            gammas = tuple(_int(g, "gammas", 1) for g in sc["gammas"])
        else:
            gammas = default_gammas(horizon)
        if any(g > horizon for g in gammas):
            raise ConfigError("gammas", f"change times must be <= horizon {horizon}")
        if len(set(gammas)) != len(gammas):
            raise ConfigError("gammas", "change times must be distinct")
        scenario = Scenario(dyn, pre, post, None, horizon)

        det = detector_config_from_dict(doc["detector"], pre, post)
        if det.threshold is None:
            raise ConfigError("threshold", "required for the global baseline")
        grid = tuple(float(x) for x in _check_grid(_require(ev, "threshold_grid", "evaluation")))
        headline = _int(ev.get("headline", len(grid) // 2), "headline", 0)
        if headline >= len(grid):
            raise ConfigError("headline", f"must index threshold_grid (size {len(grid)})")
        tol = ev.get("far_tolerance", 0.05)
        if not isinstance(tol, (int, float)) or not 0 < tol < 1:
            raise ConfigError("far_tolerance", f"must lie in (0, 1), got {tol!r}")
        lg = bl.get("lgmm", {}) or {}
        nll = bl.get("nll", {}) or {}
        fit_samples = _int(lg.get("fit_samples", nll.get("fit_samples", 5000)), "fit_samples", 20)
        return cls(
            name=str(doc.get("name", "benchmark")),
            scenario=scenario,
            detector=det,
            gammas=gammas,
            trials=trials,
            horizon=horizon,
            null_trials=_int(ev.get("null_trials", 25), "null_trials", 1),
            null_horizon=_int(ev.get("null_horizon", 2000), "null_horizon", 1),
            threshold_grid=grid,
            master_seed=_int(_require(ev, "master_seed", "evaluation"), "master_seed", 0),
            seeds=_int(ev.get("seeds", 20), "seeds", 1),
            headline=headline,
            lgmm_k=_int(lg.get("k", 2), "lgmm.k", 1),
            fit_samples=fit_samples,
            wadd_buckets=_int(ev.get("wadd_buckets", 4), "wadd_buckets", 1),
            far_tolerance=float(tol),
            document=doc,
        )


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_digest(doc: dict) -> str:
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()


# -- benchmark ---------------------------------------------------------------


def _runners(cfg: BenchmarkConfig):
    return ModeAwareRunner(cfg.detector), GlobalRunner.from_config(cfg.detector)


def _seed(cfg: BenchmarkConfig, s: int) -> int:
    return derive_seed(cfg.master_seed, s)


def _null_streams(cfg: BenchmarkConfig, s: int) -> StreamSet:
    null = cfg.scenario.with_gamma(None).with_length(cfg.null_horizon)
    return simulate_streams(null, _seed(cfg, s), cfg.null_trials, NULL_KEY)


def _null_phase(args):
    """Null alarm counts for one seed: (global at grid, mode-aware at scales)."""
    cfg, s, ma_scales, with_global = args
    ma, gl = _runners(cfg)
    null = _null_streams(cfg, s)
    ma_counts = null_alarm_counts(ma, null, ma_scales) if len(ma_scales) else np.zeros(0, np.int64)
    gl_counts = null_alarm_counts(gl, null, cfg.threshold_grid) if with_global else None
    return ma_counts, gl_counts


def _fit_baselines(cfg: BenchmarkConfig, s: int):
    seed = _seed(cfg, s)
    eps, _ = simulate_stream(
        cfg.scenario.with_gamma(None).with_length(cfg.fit_samples), derive_seed(seed, FIT_KEY)
    )
    lgmm, _ = fit_em(eps, k=cfg.lgmm_k, seed=derive_seed(seed, FIT_KEY, 1), transform=cfg.scenario.pre_change.transform)
    nll = GaussianComponent(float(np.mean(eps)), float(np.std(eps, ddof=1)))
    return lgmm, nll


def _change_phase(args):
    """Per-seed change-stream results at the matched scale pairs."""
    cfg, s, ma_scales, gl_scales = args
    ma, gl = _runners(cfg)
    lgmm, nll = _fit_baselines(cfg, s)
    seed = _seed(cfg, s)
    out = {"first": {"mode_aware": [], "global": []}, "pre_stat": {"mode_aware": [], "global": []}}
    scores = {"mode_aware": [], "global": [], "lgmm": [], "nll": []}
    labels = []
    for j, g in enumerate(cfg.gammas):
        ss = simulate_streams(cfg.scenario.with_gamma(g), seed, cfg.trials, key=j + 1)
        for name, runner, sc in (("mode_aware", ma, ma_scales), ("global", gl, gl_scales)):
            firsts, rec = delays_at_scales(runner, [ss], sc, record_first=True)
            out["first"][name].append(firsts[0])
            out["pre_stat"][name].append(rec[0][:, g - 2] if g > 1 else None)
            scores[name].append(rec[0].ravel())
        flat = ss.eps.ravel()
        scores["lgmm"].append(-log_density_array(lgmm, flat))
        scores["nll"].append(-nll_logpdf(nll, flat))
        labels.append(ss.labels().ravel())
    y = np.concatenate(labels)
    out["roc"] = {name: roc_pr(np.concatenate(v), y) for name, v in scores.items()}
    out["baselines"] = {"lgmm": lgmm.to_dict(), "nll": nll.to_dict()}
    return out


def nll_logpdf(component: GaussianComponent, eps: np.ndarray) -> np.ndarray:
    z = (np.asarray(eps, dtype=float) - component.mean) / component.std
    return -0.5 * z * z - math.log(component.std) - 0.5 * math.log(2.0 * math.pi)


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _sum_counts(parts):
    return np.sum(np.stack(parts), axis=0)


@dataclass
class EvaluationReport:
    """Aggregated benchmark results.

    The top-level ``wadd``/``far``/``mtfa``/``auroc``/``aupr`` are the
    mode-aware detector's values at the headline grid point; every detector's
    numbers are under ``detectors`` and paired seed-level tests under
    ``comparison``.
    """

    wadd: float | None
    far: float | None
    mtfa: float | None
    auroc: float | None
    aupr: float | None
    sweep: list
    trial_count: int
    config_digest: str
    detectors: dict = field(default_factory=dict)
    comparison: dict = field(default_factory=dict)
    calibration: dict = field(default_factory=dict)
    roc_curves: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    name: str = "benchmark"

    def to_dict(self) -> dict:
        doc = {
            "name": self.name,
            "schema_version": SCHEMA_VERSION,
            "config_digest": self.config_digest,
            "trial_count": self.trial_count,
            "wadd": self.wadd,
            "far": self.far,
            "mtfa": self.mtfa,
            "auroc": self.auroc,
            "aupr": self.aupr,
            "sweep": self.sweep,
            "detectors": self.detectors,
            "comparison": self.comparison,
            "calibration": self.calibration,
            "notes": self.notes,
        }
        return _finite(doc)


def _finite(obj):
    """Replace non-finite floats by None so the report is strict JSON."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _finite(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def paired_test(a: np.ndarray, b: np.ndarray, confidence: float = 0.95) -> dict:
    """One-sided paired t-test of ``mean(a - b) > 0`` across seeds."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    n = d.size
    mean = float(np.mean(d))
    if n < 2:
        return {"n": n, "mean_diff": mean, "t": math.nan, "p_value": math.nan, "lower_bound": math.nan, "significant": False}
    sd = float(np.std(d, ddof=1))
    se = sd / math.sqrt(n)
    q = float(stats.t.ppf(confidence, n - 1))
    if se == 0:
        t, p = (math.inf if mean > 0 else -math.inf if mean < 0 else 0.0), (0.0 if mean > 0 else 1.0)
    else:
        t = mean / se
        p = float(stats.t.sf(t, n - 1))
    return {
        "n": n,
        "mean_diff": mean,
        "t": t,
        "p_value": p,
        "lower_bound": mean - q * se,
        "significant": bool(p < 1.0 - confidence),
    }


def _calibrate(cfg, workers, gl_counts, steps):
    """Mode-aware scales whose pooled null FAR matches each global grid point."""
    targets = [c / steps for c in gl_counts.tolist()]
    # start from a wide log grid and widen until every reachable target is bracketed
    lo, hi, n = 1.0 / 64, 64.0, 25
    evaluated: dict[float, int] = {}
    for _ in range(4):
        grid = np.geomspace(lo, hi, n)
        new = [c for c in grid.tolist() if c not in evaluated]
        parts = _map(_null_phase, [(cfg, s, new, False) for s in range(cfg.seeds)], workers)
        for c, k in zip(new, _sum_counts([p[0] for p in parts]).tolist()):
            evaluated[c] = int(k)
        sc = np.array(sorted(evaluated))
        cnt = np.array([evaluated[c] for c in sc])
        need_lower = any(t > cnt[0] / steps for t in targets if t > 0)
        need_higher = any(t < cnt[-1] / steps for t in targets if t > 0)
        if not (need_lower or need_higher):
            break
        lo, hi = (lo / 16 if need_lower else lo), (hi * 16 if need_higher else hi)

    def current(t):
        sc = np.array(sorted(evaluated))
        return interpolate_scale(sc, [evaluated[c] for c in sc], steps, t)

    scales = [current(t) if t > 0 else None for t in targets]
    history = []
    for rnd in range(5):
        todo = sorted({c for c in scales if c is not None and c not in evaluated})
        if todo:
            parts = _map(_null_phase, [(cfg, s, todo, False) for s in range(cfg.seeds)], workers)
            for c, k in zip(todo, _sum_counts([p[0] for p in parts]).tolist()):
                evaluated[c] = int(k)
        ratios = [
            (evaluated[c] / steps) / t if c is not None else None for c, t in zip(scales, targets)
        ]
        history.append(ratios)
        if rnd == 4 or all(r is None or abs(r - 1.0) <= cfg.far_tolerance for r in ratios):
            break
        scales = [
            c if (r is None or abs(r - 1.0) <= cfg.far_tolerance) else current(t)
            for c, r, t in zip(scales, ratios, targets)
        ]
    # keep whichever evaluated scale came closest to each target
    for i, (c, t) in enumerate(zip(scales, targets)):
        if c is None:
            continue
        err = {x: abs(k / steps / t - 1.0) for x, k in evaluated.items() if k > 0}
        best = min(err, key=lambda x: (err[x], x != c, x))
        scales[i] = best
    counts = [evaluated[c] if c is not None else None for c in scales]
    return scales, counts, len(evaluated)


def run_benchmark(cfg: BenchmarkConfig, workers: int = 1) -> tuple[EvaluationReport, dict]:
    """Run the full benchmark.

    Returns:
        ``(report, tables)`` where ``tables`` holds the rows of ``sweep.csv``
        and ``roc.csv``.
    """
    notes = []
    steps = cfg.seeds * cfg.null_trials * cfg.null_horizon
    parts = _map(_null_phase, [(cfg, s, [], True) for s in range(cfg.seeds)], workers)
    gl_counts = _sum_counts([p[1] for p in parts])
    ma_scales, ma_counts, n_cal = _calibrate(cfg, workers, gl_counts, steps)

    calibration = {"null_steps": steps, "scales_evaluated": n_cal, "points": []}
    for i, c in enumerate(cfg.threshold_grid):
        g_far = far_from_counts(int(gl_counts[i]), steps)
        m_far = far_from_counts(ma_counts[i], steps) if ma_counts[i] is not None else None
        ratio = m_far.far / g_far.far if m_far is not None and g_far.far > 0 else None
        calibration["points"].append(
            {
                "global_scale": c,
                "mode_aware_scale": ma_scales[i],
                "global_far": g_far.far,
                "mode_aware_far": None if m_far is None else m_far.far,
                "far_ratio": ratio,
                "matched": ratio is not None and abs(ratio - 1.0) <= 0.1,
            }
        )
        if ma_scales[i] is None:
            notes.append(f"grid point {i}: global FAR is zero or out of reach; left unmatched")

    matched = [i for i, c in enumerate(ma_scales) if c is not None]
    detectors: dict = {"mode_aware": {}, "global": {}}
    for name, counts in (("mode_aware", ma_counts), ("global", gl_counts.tolist())):
        fh = counts[cfg.headline]
        est = far_from_counts(fh, steps) if fh is not None else None
        detectors[name]["far"] = None if est is None else est.far
        detectors[name]["mtfa"] = None if est is None else est.mtfa
        detectors[name]["far_upper_bound_only"] = None if est is None else est.upper_bound_only
        detectors[name]["null_alarms"] = fh

    report = EvaluationReport(
        wadd=None, far=detectors["mode_aware"]["far"], mtfa=detectors["mode_aware"]["mtfa"],
        auroc=None, aupr=None, sweep=[], trial_count=0, config_digest=cfg.digest(),
        detectors=detectors, calibration=calibration, notes=notes, name=cfg.name,
    )
    tables = {"sweep": [], "roc": []}
    if not cfg.has_change:
        notes.append("no positives; ROC undefined")
        return report, tables
    if cfg.headline not in matched:
        raise InsufficientDataError("headline grid point could not be FAR-matched")

    ma_sc = [ma_scales[i] for i in matched]
    gl_sc = [cfg.threshold_grid[i] for i in matched]
    per_seed = _map(_change_phase, [(cfg, s, ma_sc, gl_sc) for s in range(cfg.seeds)], workers)
    L = cfg.horizon
    report.trial_count = cfg.seeds * cfg.trials * len(cfg.gammas)

    # seed-level mean delays, shape (seeds, points)
    seed_delay = {}
    for name, counts, scales in (
        ("mode_aware", ma_counts, ma_sc),
        ("global", gl_counts.tolist(), gl_sc),
    ):
        md = np.empty((cfg.seeds, len(matched)))
        sweep = []
        for p, i in enumerate(matched):
            per_gamma = []
            by_gamma = np.empty((cfg.seeds, len(cfg.gammas)))
            for j, g in enumerate(cfg.gammas):
                fa = np.concatenate([r["first"][name][j][:, p] for r in per_seed])
                pre = None
                if g > 1:
                    pre = np.concatenate([r["pre_stat"][name][j] for r in per_seed])
                per_gamma.append(gamma_delay(fa, pre, g, L, cfg.wadd_buckets))
                for s, r in enumerate(per_seed):
                    d, _, _ = conditional_delays(r["first"][name][j][:, p], g, L)
                    by_gamma[s, j] = d.mean() if d.size else math.nan
            # change times where every trial false-alarmed carry no delay information
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                md[:, p] = np.nanmean(by_gamma, axis=1)
            w = summarize_wadd(per_gamma)
            far = far_from_counts(counts[i], steps)
            se = float(np.std(md[:, p], ddof=1) / math.sqrt(cfg.seeds)) if cfg.seeds > 1 else math.nan
            point = {
                "detector": name,
                "threshold_scale": scales[p],
                "far": far.far,
                "mean_delay": float(np.mean(md[:, p])),
                "stderr": se,
                "censored_frac": w.censored_frac,
                "trials": int(sum(g.trials for g in per_gamma)),
                "null_alarms": int(counts[i]),
            }
            sweep.append(point)
            if i == cfg.headline:
                detectors[name].update(
                    wadd=w.wadd,
                    wadd_stderr=w.stderr,
                    wadd_worst_gamma=w.worst_gamma,
                    wadd_lower_bound_only=w.lower_bound_only,
                    mean_delay=point["mean_delay"],
                    mean_delay_stderr=se,
                    censored_frac=w.censored_frac,
                    false_alarms_before_change=int(sum(g.false_alarms for g in per_gamma)),
                    per_gamma=[
                        {"gamma": g.gamma, "trials": g.trials, "mean_delay": g.mean_delay,
                         "stderr": g.stderr, "worst_bucket_delay": g.worst_bucket_delay,
                         "censored_frac": g.censored_frac, "false_alarms": g.false_alarms}
                        for g in per_gamma
                    ],
                )
        sweep.sort(key=lambda q: (-q["far"], q["threshold_scale"]))
        detectors[name]["sweep"] = sweep
        seed_delay[name] = md
        tables["sweep"].extend(sweep)

    for name in ("mode_aware", "global", "lgmm", "nll"):
        rocs = [r["roc"][name] for r in per_seed]
        au = np.array([r.auroc for r in rocs])
        ap = np.array([r.aupr for r in rocs])
        d = detectors.setdefault(name, {})
        d["auroc"] = float(au.mean())
        d["auroc_stderr"] = float(au.std(ddof=1) / math.sqrt(au.size)) if au.size > 1 else None
        d["aupr"] = float(ap.mean())
        d["auroc_per_seed"] = au.tolist()
        fpr, tpr, recall, precision = average_curves(rocs)
        for row in zip(fpr.tolist(), tpr.tolist(), precision.tolist(), recall.tolist()):
            tables["roc"].append({"detector": name, "fpr": row[0], "tpr": row[1], "precision": row[2], "recall": row[3]})
    detectors["lgmm"]["fitted_model_seed0"] = per_seed[0]["baselines"]["lgmm"]
    detectors["nll"]["fitted_model_seed0"] = per_seed[0]["baselines"]["nll"]

    comparison = {"delay": [], "auroc": {}}
    for p, i in enumerate(matched):
        ma_d, gl_d = seed_delay["mode_aware"][:, p], seed_delay["global"][:, p]
        test = paired_test(gl_d, ma_d)
        test.update(
            grid_index=i,
            headline=i == cfg.headline,
            far_ratio=calibration["points"][i]["far_ratio"],
            mode_aware_delay=float(ma_d.mean()),
            global_delay=float(gl_d.mean()),
            reduction=float(1.0 - ma_d.mean() / gl_d.mean()),
            mode_aware_per_seed=ma_d.tolist(),
            global_per_seed=gl_d.tolist(),
        )
        comparison["delay"].append(test)
    au = {k: np.array(detectors[k]["auroc_per_seed"]) for k in ("mode_aware", "global", "lgmm", "nll")}
    comparison["auroc"] = {
        "mode_aware_vs_global": paired_test(au["mode_aware"], au["global"]),
        "mode_aware_vs_lgmm": paired_test(au["mode_aware"], au["lgmm"]),
        "mode_aware_vs_nll": paired_test(au["mode_aware"], au["nll"]),
        "global_vs_lgmm": paired_test(au["global"], au["lgmm"]),
        "global_vs_nll": paired_test(au["global"], au["nll"]),
    }

    ma = detectors["mode_aware"]
    report.wadd = ma["wadd"]
    report.auroc = ma["auroc"]
    report.aupr = ma["aupr"]
    report.sweep = [[q["far"], q["mean_delay"]] for q in ma["sweep"]]
    report.comparison = comparison
    return report, tables
