import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from modewatch.detectors import (
    D_FLOOR,
    DetectorConfig,
    GlobalCusum,
    ModeAwareCusum,
    drift_and_target,
    lgmm_score,
    nll_score,
    variance_estimate,
)
from modewatch.errors import ConfigError, DetectorAlarmedError, DomainError
from modewatch.mixture import GaussianComponent, MixtureModel, density

import oracles

LN19 = 2.9444389791664403  # ln(0.95 / 0.05)


def make_config(pre, post, **kw):
    base = dict(b=(5.0, 5.0), r=(1.0, 0.5), alpha=(0.05, 0.05), beta=(0.05, 0.05), window=10, lam=0.5)
    base.update(kw)
    return DetectorConfig(pre_change=pre, post_change=post, **base)


def oracle_for(cfg, log_domain=True):
    pre, post = cfg.pre_change, cfg.post_change
    return oracles.Alg1Oracle(
        pre.weights,
        [(c.mean, c.std) for c in pre.components],
        (post.weights, [(c.mean, c.std) for c in post.components]),
        cfg.b, cfg.r, cfg.alpha, cfg.beta, cfg.window, cfg.lam, log_domain,
    )


class FixedModes:
    """Estimator that replays a hand-fixed mode sequence."""

    def __init__(self, modes):
        self.modes = iter(modes)

    def __call__(self, model, eps):
        return next(self.modes)


# -- configuration -----------------------------------------------------------


def test_config_validation(two_mode_log, post_log):
    cases = [
        (dict(b=(0.0, 5.0)), "b0"),
        (dict(r=(1.0, -1.0)), "r1"),
        (dict(alpha=(1.0, 0.05)), "alpha0"),
        (dict(beta=(0.05, 0.0)), "beta1"),
        (dict(alpha=(0.6, 0.05), beta=(0.5, 0.05)), "alpha0"),
        (dict(window=1), "window"),
        (dict(window=2.5), "window"),
        (dict(lam=0.0), "lambda"),
        (dict(lam=1.5), "lambda"),
        (dict(b=(5.0,)), "b"),
        (dict(threshold=-1.0), "threshold"),
    ]
    for kw, key in cases:
        with pytest.raises(ConfigError) as e:
            make_config(two_mode_log, post_log, **kw)
        assert e.value.key == key


def test_config_warns_when_low_error_mode_is_less_conservative(two_mode_log, post_log):
    with pytest.warns(UserWarning, match="r0 < r1"):
        make_config(two_mode_log, post_log, r=(0.5, 1.0))


def test_config_accepts_bare_component_as_post(two_mode_log):
    cfg = make_config(two_mode_log, GaussianComponent(1.75, 0.5))
    assert cfg.post_change.k == 1 and cfg.post_change.transform == two_mode_log.transform


@given(st.floats(0.1, 10.0))
def test_scaled_multiplies_every_threshold(c):
    pre = MixtureModel((0.5, 0.5), (GaussianComponent(0, 1), GaussianComponent(2, 1)), "identity")
    cfg = make_config(pre, GaussianComponent(4, 1), threshold=3.0)
    sc = cfg.scaled(c)
    assert sc.b == pytest.approx(tuple(c * b for b in cfg.b), rel=1e-15)
    assert sc.threshold == pytest.approx(3.0 * c, rel=1e-15)
    for lb, lb2 in zip(cfg.log_boundary, sc.log_boundary):
        assert lb2 == pytest.approx(c * lb, rel=1e-12)


# -- threshold mathematics ------------------------------------------------------


def test_target_at_unit_drift():
    drift, target = drift_and_target(1.0, 1.0, LN19)
    assert drift == 0.5
    assert target == pytest.approx(5.8888779583328805, abs=1e-15)


def test_drift_floor():
    drift, target = drift_and_target(0.0, 1.0, LN19)
    assert drift == D_FLOOR / 2
    assert math.isfinite(target) and target > 1e12


def test_variance_estimate_examples(rng):
    assert variance_estimate([1, 1, 1, 1]) == 0.0
    assert variance_estimate([0, 2]) == pytest.approx(math.sqrt(2), abs=1e-15)
    assert abs(variance_estimate(rng.normal(0, 3, 1000).tolist()) - 3) <= 0.2
    with pytest.raises(ValueError):
        variance_estimate([1.0])


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40))
def test_variance_estimate_is_sample_std(xs):
    assert variance_estimate(xs) == pytest.approx(float(np.std(xs, ddof=1)), rel=1e-9, abs=1e-9)


@pytest.mark.parametrize("lam", [0.1, 0.5, 1.0])
def test_threshold_converges_geometrically(lam):
    # identity domain, single mode with a constant window: sigma is pinned
    # once the window holds two equal-spread values, so h is constant
    pre = MixtureModel((1.0,), (GaussianComponent(0.0, 1.0),), "identity")
    cfg = DetectorConfig((40.0,), (1.0,), (0.05,), (0.05,), 2, lam, pre, GaussianComponent(0.0, 1.0))
    det = ModeAwareCusum(cfg)
    xs = [-0.5, 0.5] * 30  # a window of two points one apart: sigma = 1/sqrt(2)
    h = 4.0 * LN19
    det.step(xs[0])
    det.step(xs[1])
    theta0 = det.state.theta[0]
    for n, x in enumerate(xs[2:40], start=1):
        det.step(x)
        expect = (1 - lam) ** n * (theta0 - h)
        assert det.state.theta[0] - h == pytest.approx(expect, abs=1e-12)


# -- Algorithm 1 step semantics ---------------------------------------------------


def test_step_matches_oracle_with_fixed_modes(two_mode_log, post_log, rng):
    cfg = make_config(two_mode_log, post_log, window=4, lam=0.3, b=(50.0, 50.0))
    eps = np.exp(rng.normal(0.5, 0.8, 20))
    modes = [0, 0, 1, 1, 1, 0, 1, 0, 0, 0, 1, 1, 0, 1, 0, 1, 1, 1, 0, 0]
    det = ModeAwareCusum(cfg, estimator=FixedModes(modes))
    ref = oracle_for(cfg)
    for e, m in zip(eps, modes):
        out = det.step(float(e))
        exp = ref.step(float(e), mode=m)
        assert out.estimated_mode == m
        assert det.state.W == pytest.approx(exp["W"], rel=1e-12, abs=1e-12)
        assert det.state.theta == pytest.approx(exp["theta"], rel=1e-12, abs=1e-12)
        assert out.llr == pytest.approx(exp["llr"], abs=1e-12)
        assert out.alarmed == exp["alarmed"]


@given(st.integers(0, 2**32 - 1))
def test_trace_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    pre = MixtureModel(
        (0.44, 0.56), (GaussianComponent(0.0, 0.5), GaussianComponent(1.0, 0.5)), "log"
    )
    post = MixtureModel((1.0,), (GaussianComponent(float(rng.uniform(1, 2.5)), 0.5),), "log")
    cfg = make_config(
        pre, post, window=int(rng.integers(2, 12)), lam=float(rng.uniform(0.05, 1.0)),
        b=tuple(rng.uniform(2, 30, 2)),
    )
    det, ref = ModeAwareCusum(cfg), oracle_for(cfg)
    for e in np.exp(rng.normal(0.7, 0.8, 80)):
        out, exp = det.step(float(e)), ref.step(float(e))
        assert out.estimated_mode == exp["mode"]
        assert det.state.W == pytest.approx(exp["W"], rel=1e-12, abs=1e-12)
        assert det.state.theta == pytest.approx(exp["theta"], rel=1e-12, abs=1e-12)
        assert out.alarmed == exp["alarmed"]
        if out.alarmed:
            break
    assert det.state.alarm == ref.alarm


def test_statistic_equals_scan_identity_per_mode(two_mode_log, post_log, rng):
    cfg = make_config(two_mode_log, post_log, b=(1e9, 1e9), lam=1.0)
    det, ref = ModeAwareCusum(cfg), oracle_for(cfg)
    incs = {0: [], 1: []}
    for e in np.exp(rng.normal(0.8, 0.9, 200)):
        out = det.step(float(e))
        exp = ref.step(float(e))
        m = out.estimated_mode
        incs[m].append(exp["llr"] - exp["drift"])
        assert out.statistic == pytest.approx(oracles.scan_cusum(incs[m])[-1], abs=1e-9)


def test_inactive_mode_is_untouched(two_mode_log, post_log, rng):
    cfg = make_config(two_mode_log, post_log, b=(1e9, 1e9))
    det = ModeAwareCusum(cfg)
    for e in np.exp(rng.normal(0.5, 0.8, 100)):
        other = 1 - two_mode_log_map(two_mode_log, float(e))
        before = (det.state.W[other], det.state.theta[other], list(det.state.buffers[other]))
        out = det.step(float(e))
        assert out.estimated_mode == 1 - other
        assert (det.state.W[other], det.state.theta[other], list(det.state.buffers[other])) == before
        assert len(det.state.buffers[out.estimated_mode]) <= cfg.window


def two_mode_log_map(model, eps):
    from modewatch.mixture import map_mode

    return map_mode(model, eps)


def test_alarm_iff_statistic_reaches_threshold(two_mode_log, post_log, rng):
    cfg = make_config(two_mode_log, post_log, b=(2.0, 2.0), lam=0.2)
    for _ in range(20):
        det = ModeAwareCusum(cfg)
        outs = det.run(np.exp(rng.normal(1.5, 0.6, 200)).tolist())
        for o in outs:
            assert o.alarmed == (o.statistic >= o.threshold)
            assert o.statistic >= 0 and o.threshold > 0
        assert all(not o.alarmed for o in outs[:-1])


def test_step_after_alarm_rejected(two_mode_log, post_log):
    cfg = make_config(two_mode_log, post_log, b=(1e-3, 1e-3), lam=1e-9, r=(1e-3, 1e-3))
    det = ModeAwareCusum(cfg)
    outs = det.run([math.exp(3.0)] * 10)
    assert outs[-1].alarmed
    with pytest.raises(DetectorAlarmedError):
        det.step(1.0)
    det.reset()
    assert det.state.alarm is None and det.state.W == [0.0, 0.0]


def test_domain_errors(two_mode_log, post_log):
    det = ModeAwareCusum(make_config(two_mode_log, post_log))
    for bad in (0.0, -1.0, math.nan, math.inf):
        with pytest.raises(DomainError):
            det.step(bad)
    assert det.state.t == 0


def test_g_equal_to_active_component_never_alarms():
    # one-mode model with g identical to it: llr = 0 and drift > 0 each step
    comp = GaussianComponent(0.3, 0.7)
    pre = MixtureModel((1.0,), (comp,), "log")
    cfg = DetectorConfig((1e-3,), (1.0,), (0.05,), (0.05,), 5, 0.5, pre, comp)
    det = ModeAwareCusum(cfg)
    rng = np.random.default_rng(0)
    for e in np.exp(rng.normal(0.3, 0.7, 2000)):
        out = det.step(float(e))
        assert out.llr == 0.0 and out.statistic == 0.0 and not out.alarmed


def test_reflection_with_zero_post_density():
    # g is so narrow and distant that ln g underflows to a huge negative value
    pre = MixtureModel((0.5, 0.5), (GaussianComponent(0, 1), GaussianComponent(3, 1)), "identity")
    cfg = make_config(pre, GaussianComponent(1e6, 1e-3))
    det = ModeAwareCusum(cfg)
    for x in np.linspace(-3, 6, 50):
        out = det.step(float(x))
        assert out.statistic == 0.0
        assert min(det.state.W) >= 0.0


@given(st.integers(0, 2**32 - 1), st.floats(1.0, 4.0))
def test_raising_thresholds_never_alarms_earlier(seed, c):
    rng = np.random.default_rng(seed)
    pre = MixtureModel(
        (0.44, 0.56), (GaussianComponent(0.0, 0.5), GaussianComponent(1.0, 0.5)), "log"
    )
    cfg = make_config(pre, GaussianComponent(1.75, 0.5), b=(3.0, 3.0), lam=0.4)
    stream = np.exp(rng.normal(1.0, 0.7, 300)).tolist()
    base = ModeAwareCusum(cfg).run(stream)
    high = ModeAwareCusum(cfg.scaled(c)).run(stream)
    tau = base[-1].t if base[-1].alarmed else math.inf
    tau_high = high[-1].t if high[-1].alarmed else math.inf
    assert tau_high >= tau


def test_identical_streams_identical_traces(two_mode_log, post_log, rng):
    cfg = make_config(two_mode_log, post_log)
    stream = np.exp(rng.normal(0.8, 0.8, 300)).tolist()
    assert ModeAwareCusum(cfg).run(stream) == ModeAwareCusum(cfg).run(stream)


# -- global CUSUM -------------------------------------------------------------


def test_global_g_equal_f_stays_zero(two_mode_log, rng):
    det = GlobalCusum(two_mode_log, two_mode_log, 1e-6)
    for e in np.exp(rng.normal(0.5, 1.0, 1000)):
        out = det.step(float(e))
        assert out.statistic == 0.0 and not out.alarmed


def test_global_constant_llr_alarms_at_ten():
    # N(0.5, 1) against N(-0.5, 1) at x = 0.5: ln g/f = 0.5 exactly
    pre = MixtureModel((1.0,), (GaussianComponent(-0.5, 1.0),), "identity")
    det = GlobalCusum(pre, GaussianComponent(0.5, 1.0), 5.0)
    outs = det.run([0.5] * 20)
    assert [o.llr for o in outs] == pytest.approx([0.5] * 10, abs=1e-15)
    assert outs[-1].t == 10 and outs[-1].alarmed
    with pytest.raises(DetectorAlarmedError):
        det.step(0.5)


def test_global_matches_brute_force_double_loop(two_mode_log, post_log):
    rng = np.random.default_rng(7)
    det = GlobalCusum(two_mode_log, post_log, 1e9)
    eps = np.exp(rng.normal(0.9, 0.9, 30))
    outs = det.run(eps.tolist())
    llrs = [math.log(density(post_log, e)) - math.log(density(two_mode_log, e)) for e in eps]
    assert min(llrs) < 0 < max(llrs)
    brute = oracles.scan_cusum_loops(llrs)
    assert [o.statistic for o in outs] == pytest.approx(brute, abs=1e-12)


def test_global_from_config_requires_threshold(two_mode_log, post_log):
    with pytest.raises(ConfigError):
        GlobalCusum.from_config(make_config(two_mode_log, post_log))
    det = GlobalCusum.from_config(make_config(two_mode_log, post_log, threshold=4.0))
    assert det.threshold == 4.0
    with pytest.raises(ConfigError):
        GlobalCusum(two_mode_log, post_log, 0.0)


# -- per-step scores -------------------------------------------------------------


def test_score_examples():
    std = GaussianComponent(0.0, 1.0)
    assert nll_score(std, 0.0) == pytest.approx(0.9189385332046727, abs=1e-15)
    assert nll_score(std, 1.0) == pytest.approx(1.4189385332046727, abs=1e-15)
    assert lgmm_score(MixtureModel((1.0,), (std,), "identity"), 0.0) == pytest.approx(0.9189385332046727, abs=1e-15)
    with pytest.raises(DomainError):
        nll_score(std, math.nan)


@given(st.floats(-5, 5), st.floats(-20, 20), st.floats(0.1, 5))
def test_nll_symmetric_about_mean(mu, dx, s):
    c = GaussianComponent(mu, s)
    assert nll_score(c, mu + dx) == pytest.approx(nll_score(c, mu - dx), rel=1e-12, abs=1e-12)


def test_lgmm_minimized_at_density_peak():
    m = MixtureModel((0.3, 0.7), (GaussianComponent(0, 1), GaussianComponent(3, 0.5)), "identity")
    grid = np.linspace(-4, 7, 2001)
    scores = np.array([lgmm_score(m, float(x)) for x in grid])
    dens = np.array([density(m, float(x)) for x in grid])
    assert np.argmin(scores) == np.argmax(dens)
    assert lgmm_score(m, 12.0) > lgmm_score(m, 0.0)
    with pytest.raises(DomainError):
        lgmm_score(MixtureModel((1.0,), (GaussianComponent(0, 1),), "log"), -1.0)
