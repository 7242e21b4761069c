import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import norm

from rarebias.dynamics import K_B, SimConfig
from rarebias.errors import EstimatorError
from rarebias.estimator import (
    Estimate, cv, ess, from_counts, importance_estimate, loglog_slope, monte_carlo_estimate, scaling_study,
)
from rarebias.netbias import linear_net, zero_net
from rarebias.potentials import PotentialSpec

FLAT = PotentialSpec("flat")


@pytest.mark.parametrize("w, expect", [([1, 1, 1, 1], 4.0), ([1, 2], 1.8), ([1, 0, 0], 1.0)])
def test_ess_values(w, expect):
    assert ess(w) == pytest.approx(expect, rel=1e-15)


@given(st.lists(st.floats(1e-6, 1e6), min_size=1, max_size=50), st.floats(1e-200, 1e200))
def test_ess_bounds_and_scale_invariance(w, c):
    e = ess(w)
    assert 1.0 - 1e-9 <= e <= len(w) + 1e-9
    assert ess(np.array(w) * c) == pytest.approx(e, rel=1e-9)


def test_ess_and_cv_undefined():
    with pytest.raises(EstimatorError):
        ess([0.0, 0.0])
    with pytest.raises(EstimatorError):
        cv([0.0, 0.0])


def test_cv_value():
    assert cv([0.0, 2.0]) == pytest.approx(math.sqrt(2), rel=1e-15)


def test_from_counts():
    e = from_counts(441, 10**8)
    assert e.p_hat == pytest.approx(4.41e-6, rel=1e-12)
    assert e.n_success == 441 and e.ess == 441
    p = 4.41e-6
    assert e.ci_half_width == pytest.approx(1.959963984540054 * math.sqrt(p * (1 - p) / (1e8 - 1)), rel=1e-9)


def test_no_successes_is_degenerate():
    e = from_counts(0, 100)
    assert e.degenerate and e.p_hat == 0.0 and e.ci_half_width == 0.0
    assert "degenerate" in e.summary()


def test_overlaps():
    a = Estimate(1.0, 0.1, 0, 0, 0, 0, 0, 1, 1, 0)
    assert a.overlaps(Estimate(1.15, 0.06, 0, 0, 0, 0, 0, 1, 1, 0))
    assert not a.overlaps(Estimate(1.2, 0.05, 0, 0, 0, 0, 0, 1, 1, 0))


def test_csv_timing_switch():
    e = from_counts(3, 10)
    assert "wall_seconds" in e.to_csv()
    assert "wall_seconds" not in e.to_csv(timing=False)


def test_summary_lists_table_columns():
    s = from_counts(5, 100).summary("x")
    for key in ("confidence interval", "CV", "success rate", "ESS ratio", "time"):
        assert key in s


def test_loglog_slope_exact():
    n = np.array([10, 20, 40, 80])
    assert loglog_slope(n, 3 * n ** -0.5) == pytest.approx(-0.5, abs=1e-12)


def test_zero_bias_matches_monte_carlo(paper):
    cfg = SimConfig(temperature=5000.0, n_steps=300)
    net = zero_net((4,), "with_control_features", np.stack([cfg.start_near, cfg.target]))
    a = importance_estimate(net, paper, cfg, 400, seed=3)
    b = monte_carlo_estimate(paper, cfg, 400, seed=3)
    assert a.p_hat == pytest.approx(b.p_hat, rel=1e-12) and a.n_success == b.n_success
    assert a.ess == pytest.approx(a.n_success)


def _halfplane_cfg(c):
    # eps N dt = 1, so the unbiased x displacement is standard normal
    return SimConfig(temperature=1 / (2 * K_B), n_steps=100, dt=0.01, start_near=[0, 0], target=[50, 50],
                     start_radius=1e-12, event="halfplane", halfplane_x=c)


def test_importance_sampling_unbiased_on_gaussian_tail():
    c = 2.5
    cfg = _halfplane_cfg(c)
    est = importance_estimate(linear_net(-c, 0.0), FLAT, cfg, 4000, seed=1)
    truth = norm.sf(c)
    assert abs(est.p_hat - truth) < 4 * est.ci_half_width / 1.96
    # a well-matched bias beats plain sampling by a wide margin
    assert est.cv < 2.0
    assert est.ess_ratio > 0.2


def test_scaling_study_shapes():
    cfg = _halfplane_cfg(1.0)
    t = scaling_study(linear_net(-1.0, 0.0), FLAT, cfg, [50, 200], replications=4, seed=0)
    assert [r.n for r in t.rows] == [50, 200]
    assert "# slopes" in t.to_csv()
    with pytest.raises(EstimatorError):
        scaling_study(linear_net(-1.0, 0.0), FLAT, cfg, [200, 50], replications=2)


def test_rejects_empty_sample():
    with pytest.raises(EstimatorError):
        monte_carlo_estimate(FLAT, _halfplane_cfg(1.0), 0)


def test_loglog_slope_nonpositive_is_nan():
    from rarebias.estimator import loglog_slope
    assert math.isnan(loglog_slope([1, 2, 4], [0.0, 1.0, 2.0]))
    assert loglog_slope([1, 2, 4], [3, 6, 12]) == pytest.approx(1.0)
