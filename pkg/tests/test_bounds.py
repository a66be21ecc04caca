import numpy as np
import pytest
from scipy import integrate

from diffcount.bounds import (ErrorBudget, GaussianDist, convergence_order,
                              diffused_prior_gap, gaussian_kl,
                              mean_deviation, trajectory_error_decomposition,
                              transition_operator, verify_kl_decomposition)
from diffcount.models import GMM, GMMScoreModel
from diffcount.samplers import REFERENCE_STEPS, SamplerConfig
from diffcount.schedules import NoiseSchedule, build_schedule

# independently computed for the default linear 1000-step table
ALPHA_BAR_1000 = 4.0358297653756835e-05


# ---------------------------------------------------------------------------
# gaussian_kl
# ---------------------------------------------------------------------------

def test_kl_identical_zero():
    p = GaussianDist(np.array([0.3, -0.2]), 1.7)
    assert gaussian_kl(p, p) == 0.0


def test_kl_unit_variance_mean_shift():
    assert gaussian_kl(GaussianDist(1.0, 1.0), GaussianDist(0.0, 1.0)) \
        == pytest.approx(0.5, abs=1e-15)


def test_kl_variance_ratio():
    got = gaussian_kl(GaussianDist(0.0, 2.0), GaussianDist(0.0, 1.0))
    assert got == pytest.approx(0.15342640972002736, abs=1e-12)


def test_kl_nonnegative_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = GaussianDist(rng.normal(size=3), float(rng.uniform(0.1, 5)))
        q = GaussianDist(rng.normal(size=3), float(rng.uniform(0.1, 5)))
        assert gaussian_kl(p, q) >= 0.0


def test_kl_dimension_mismatch():
    with pytest.raises(ValueError):
        gaussian_kl(GaussianDist(np.zeros(2), 1.0),
                    GaussianDist(np.zeros(3), 1.0))


# ---------------------------------------------------------------------------
# diffused prior gap
# ---------------------------------------------------------------------------

def test_gap_zero_for_standard_normal_data():
    for T in (10, 100, 1000):
        s = build_schedule("linear", T)
        assert diffused_prior_gap(np.array([0.0]), 1.0, s) == 0.0


def test_gap_zero_signal_limit():
    with np.errstate(divide="ignore"):
        s = NoiseSchedule(kind="linear", T=1, betas=np.array([1.0 - 1e-16]),
                          alphas=np.array([1e-16]),
                          alpha_bars=np.array([1.0, 0.0]))
    assert diffused_prior_gap(np.array([123.0]), 7.0, s) == 0.0


def test_gap_closed_form():
    s = build_schedule("linear", 1000)
    gap = diffused_prior_gap(np.array([10.0]), 1.0, s)
    assert gap == pytest.approx(0.5 * s.alpha_bars[-1] * 100.0, abs=1e-9)
    assert gap == pytest.approx(0.5 * ALPHA_BAR_1000 * 100.0, rel=1e-9)


def test_gap_monotone_in_T():
    gaps = [diffused_prior_gap(np.array([10.0]), 1.0,
                               build_schedule("linear", T))
            for T in (10, 100, 1000)]
    assert gaps[0] > gaps[1] > gaps[2] > 0


def test_gap_positive_off_fixed_point():
    s = build_schedule("linear", 100)
    assert diffused_prior_gap(np.array([1.0]), 1.0, s) > 0
    assert diffused_prior_gap(np.array([0.0]), 2.0, s) > 0
    with pytest.raises(ValueError):
        diffused_prior_gap(np.array([0.0]), -1.0, s)


# ---------------------------------------------------------------------------
# KL decomposition
# ---------------------------------------------------------------------------

def test_decomposition_perfect_model_exact_prior():
    dec = verify_kl_decomposition(50, model_perturbation=0.0,
                                  exact_prior=True)
    assert dec.lhs == pytest.approx(0.0, abs=1e-9)
    assert dec.rhs == pytest.approx(0.0, abs=1e-9)
    assert dec.prior_gap == pytest.approx(0.0, abs=1e-12)


def test_decomposition_perfect_model_standard_prior():
    dec = verify_kl_decomposition(50, model_perturbation=0.0)
    assert dec.transition_sum == pytest.approx(0.0, abs=1e-15)
    assert dec.rhs == pytest.approx(dec.prior_gap, rel=1e-12)
    assert dec.lhs <= dec.rhs + 1e-9


def test_decomposition_strict_gap():
    dec = verify_kl_decomposition(10, model_perturbation=0.1)
    assert dec.lhs < dec.rhs


def test_decomposition_rhs_monotone_in_perturbation():
    rhs = [verify_kl_decomposition(10, model_perturbation=p).rhs
           for p in (0.0, 0.05, 0.1, 0.2)]
    assert all(a <= b + 1e-15 for a, b in zip(rhs, rhs[1:]))


@pytest.mark.parametrize("T", [10, 100])
@pytest.mark.parametrize("pert", [0.0, 0.05, 0.1, 0.2])
def test_decomposition_bound_grid(T, pert):
    dec = verify_kl_decomposition(T, model_perturbation=pert)
    assert dec.lhs <= dec.rhs + 1e-9


def test_decomposition_schedule_mismatch():
    s = build_schedule("linear", 20)
    with pytest.raises(ValueError):
        verify_kl_decomposition(10, s)


# ---------------------------------------------------------------------------
# transition operator
# ---------------------------------------------------------------------------

def test_transition_identity():
    s = build_schedule("linear", 100)
    assert transition_operator(42.0, 42.0, s) == 1.0


def test_transition_constant_beta():
    c = 0.01
    s = build_schedule("linear", 50, c, c)
    for t1, t2 in ((0.0, 50.0), (3.0, 17.5), (40.0, 10.0)):
        assert transition_operator(t2, t1, s) == pytest.approx(
            np.exp(-0.5 * c * (t2 - t1)), rel=1e-10)


def test_transition_linear_beta_closed_form():
    # quadratic exponent for the linear interpolation on [1, T]
    T, b0, b1 = 200, 1e-4, 0.02
    s = build_schedule("linear", T, b0, b1)
    slope = (b1 - b0) / (T - 1)

    def integral(a, b):
        # int_a^b beta(v) dv with beta(v) = b0 + slope (v - 1)
        return b0 * (b - a) + 0.5 * slope * ((b - 1) ** 2 - (a - 1) ** 2)

    for t1, t2 in ((1.0, 200.0), (10.0, 123.4), (150.0, 50.0)):
        expected = np.exp(-0.5 * integral(t1, t2))
        assert transition_operator(t2, t1, s) == pytest.approx(expected,
                                                               abs=1e-10)


def test_transition_semigroup():
    s = build_schedule("linear", 300)
    rng = np.random.default_rng(5)
    for _ in range(25):
        t1, t2, t3 = sorted(rng.uniform(0, 300, size=3))
        lhs = transition_operator(t3, t2, s) * transition_operator(t2, t1, s)
        rhs = transition_operator(t3, t1, s)
        assert abs(lhs - rhs) < 1e-10


def test_transition_range_check():
    s = build_schedule("linear", 100)
    with pytest.raises(ValueError):
        transition_operator(-1.0, 5.0, s)


# ---------------------------------------------------------------------------
# mean deviation
# ---------------------------------------------------------------------------

def test_mean_deviation_zero():
    s = build_schedule("linear", 10)
    assert np.array_equal(mean_deviation(np.zeros(3), 5, s), np.zeros(3))


def test_mean_deviation_closed_form():
    s = NoiseSchedule(kind="linear", T=1, betas=np.array([0.02]),
                      alphas=np.array([0.98]),
                      alpha_bars=np.array([1.0, 0.25]))
    out = mean_deviation(np.array([1.0]), 1, s)
    assert out[0] == pytest.approx(-0.023328473740792173, abs=1e-12)


def test_mean_deviation_linearity():
    s = build_schedule("linear", 100)
    d = np.array([0.3, -0.7])
    for a in (2.0, -3.5, 0.25):
        assert mean_deviation(a * d, 17, s) == pytest.approx(
            a * mean_deviation(d, 17, s), abs=1e-12)


# ---------------------------------------------------------------------------
# error budget
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def wide_setup():
    s = build_schedule("linear", 100)
    gmm = GMM([1.0], [[0.0]], [1e6])
    return s, gmm, GMMScoreModel(gmm, s)


def test_budget_no_perturbations_zero(wide_setup):
    s, gmm, model = wide_setup
    cfg = SamplerConfig(solver="solver1", steps=REFERENCE_STEPS, seed=0)
    b = trajectory_error_decomposition(model, model, cfg, gmm, s)
    assert b.propagated_initial <= 1e-6
    assert b.model_error_contrib <= 1e-6
    assert b.truncation_contrib <= 1e-6
    assert b.total_endpoint_error <= 1e-6


def test_budget_initial_offset_matches_transition_operator(wide_setup):
    s, gmm, model = wide_setup
    cfg = SamplerConfig(solver="solver1", steps=32, seed=0)
    d = 1e-3
    b = trajectory_error_decomposition(model, model, cfg, gmm, s,
                                       initial_offset=d)
    expected = abs(transition_operator(0.0, float(s.T), s)) * d
    assert abs(b.propagated_initial - expected) / expected < 0.05


@pytest.mark.parametrize("solver,lo,hi", [("solver1", 1.5, 2.5),
                                          ("solver2", 3.0, 5.0)])
def test_budget_truncation_step_doubling(solver, lo, hi):
    s = build_schedule("linear", 1000)
    gmm = GMM([0.5, 0.5], [[-0.5], [0.5]], [0.3, 0.5])
    model = GMMScoreModel(gmm, s)
    contribs = {}
    for N in (16, 32):
        cfg = SamplerConfig(solver=solver, steps=N, seed=0)
        contribs[N] = trajectory_error_decomposition(
            model, model, cfg, gmm, s).truncation_contrib
    ratio = contribs[16] / contribs[32]
    assert lo <= ratio <= hi, f"{solver}: ratio {ratio}"


def test_budget_first_order_sum(wide_setup):
    s, gmm, model = wide_setup
    cfg = SamplerConfig(solver="solver1", steps=64, seed=1)
    b = trajectory_error_decomposition(model, model.with_bias(1e-3), cfg,
                                       gmm, s, initial_offset=1e-3)
    assert b.sum_vs_total_rel < 0.15


# ---------------------------------------------------------------------------
# convergence order
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def order_setup():
    s = build_schedule("linear", 1000)
    gmm = GMM([0.5, 0.5], [[-0.5], [0.5]], [0.3, 0.5])
    return s, gmm


def test_solver1_first_order(order_setup):
    s, gmm = order_setup
    slope = convergence_order("solver1", gmm, s, [8, 16, 32, 64, 128])
    assert 0.7 <= slope <= 1.3


def test_solver2_second_order(order_setup):
    s, gmm = order_setup
    slope = convergence_order("solver2", gmm, s, [8, 16, 32, 64, 128])
    assert 1.6 <= slope <= 2.4


def test_convergence_rejects_reference(order_setup):
    s, gmm = order_setup
    with pytest.raises(ValueError):
        convergence_order("reference", gmm, s, [8, 16, 32, 64])
    with pytest.raises(ValueError):
        convergence_order("solver1", gmm, s, [8, 16])   # too few points
    with pytest.raises(ValueError):
        convergence_order("solver1", gmm, s, [4, 8, 16, 32])  # N too small
