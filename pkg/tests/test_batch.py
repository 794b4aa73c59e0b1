import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from modewatch.batch import prepare, run_global, run_mode_aware
from modewatch.detectors import DetectorConfig, GlobalCusum, ModeAwareCusum
from modewatch.mixture import GaussianComponent, MixtureModel

PRE = MixtureModel((0.44, 0.56), (GaussianComponent(0.0, 0.5), GaussianComponent(1.0, 0.5)), "log")
POST = MixtureModel((1.0,), (GaussianComponent(1.75, 0.5),), "log")


def config(**kw):
    base = dict(b=(6.0, 9.0), r=(1.0, 0.5), alpha=(0.05, 0.05), beta=(0.05, 0.05), window=7, lam=0.4)
    base.update(kw)
    return DetectorConfig(pre_change=PRE, post_change=POST, threshold=4.0, **base)


def streams(seed, n=12, T=150, loc=0.9):
    rng = np.random.default_rng(seed)
    return np.exp(rng.normal(loc, 0.8, (n, T)))


def scalar_first_alarm(det, row):
    for out in det.run(row.tolist()):
        if out.alarmed:
            return out.t
    return 0


@given(st.integers(0, 2**32 - 1), st.floats(0.3, 3.0))
def test_mode_aware_batch_matches_scalar(seed, c):
    cfg = config()
    eps = streams(seed)
    run = run_mode_aware(prepare(eps, PRE, POST), cfg, scales=c, record=True)
    for i, row in enumerate(eps):
        det = ModeAwareCusum(cfg.scaled(c))
        outs = det.run(row.tolist())
        assert run.first_alarm[i] == (outs[-1].t if outs[-1].alarmed else 0)
        got = run.scores[i, : len(outs)]
        assert got == pytest.approx([o.statistic for o in outs], rel=1e-12, abs=1e-12)
        assert run.thresholds[i, : len(outs)] == pytest.approx([o.threshold for o in outs], rel=1e-12)


@given(st.integers(0, 2**32 - 1), st.floats(0.3, 3.0))
def test_global_batch_matches_scalar(seed, c):
    eps = streams(seed)
    run = run_global(prepare(eps, PRE, POST), 4.0, scales=c, record=True)
    for i, row in enumerate(eps):
        det = GlobalCusum(PRE, POST, 4.0 * c)
        outs = det.run(row.tolist())
        assert run.first_alarm[i] == (outs[-1].t if outs[-1].alarmed else 0)
        assert run.scores[i, : len(outs)] == pytest.approx([o.statistic for o in outs], abs=1e-12)


def test_rows_independent_of_chunking():
    eps = streams(3, n=40)
    cfg = config()
    prep = prepare(eps, PRE, POST)
    whole = run_mode_aware(prep, cfg, scales=np.linspace(0.5, 2, 40), renewal=True)
    parts = [
        run_mode_aware(prepare(eps[a:b], PRE, POST), cfg, scales=np.linspace(0.5, 2, 40)[a:b], renewal=True)
        for a, b in ((0, 7), (7, 8), (8, 40))
    ]
    assert np.array_equal(whole.first_alarm, np.concatenate([p.first_alarm for p in parts]))
    assert np.array_equal(whole.alarm_count, np.concatenate([p.alarm_count for p in parts]))


def test_stream_index_reuses_prepared_rows():
    eps = streams(5, n=3)
    cfg = config()
    prep = prepare(eps, PRE, POST)
    scales = [0.5, 1.0, 2.0]
    idx = np.repeat(np.arange(3), 3)
    run = run_mode_aware(prep, cfg, scales=np.tile(scales, 3), stream_index=idx)
    for j, (i, c) in enumerate(zip(idx, np.tile(scales, 3))):
        assert run.first_alarm[j] == scalar_first_alarm(ModeAwareCusum(cfg.scaled(c)), eps[i])


def test_renewal_counts_match_restarted_scalar_detector():
    eps = streams(9, n=4, T=400, loc=1.3)
    cfg = config()
    run = run_mode_aware(prepare(eps, PRE, POST), cfg, renewal=True)
    for i, row in enumerate(eps):
        det, alarms = ModeAwareCusum(cfg), 0
        for e in row:
            if det.step(float(e)).alarmed:
                alarms += 1
                det.reset()
        assert run.alarm_count[i] == alarms
    g = run_global(prepare(eps, PRE, POST), 4.0, renewal=True)
    for i, row in enumerate(eps):
        det, alarms = GlobalCusum(PRE, POST, 4.0), 0
        for e in row:
            if det.step(float(e)).alarmed:
                alarms += 1
                det.reset()
        assert g.alarm_count[i] == alarms
    assert run.alarm_count.sum() > 4 and g.alarm_count.sum() > 4


def test_prepare_shapes_and_modes():
    eps = streams(1, n=2, T=5)
    prep = prepare(eps, PRE, POST)
    assert prep.shape == (2, 5)
    assert np.allclose(prep.x, np.log(eps))
    from modewatch.mixture import map_mode

    assert prep.mode.tolist() == [[map_mode(PRE, float(e)) for e in row] for row in eps]
    assert np.all(np.isfinite(prep.llr_mode)) and not math.isnan(prep.llr_global.sum())
