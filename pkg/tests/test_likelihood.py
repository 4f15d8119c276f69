import math
import random
import warnings

import numpy as np
import pytest
from scipy import integrate, stats

from takeup.counterfactual import PolicySpec
from takeup.likelihood import (
    FitConfig,
    FitError,
    HessianError,
    LikelihoodError,
    PackedPanel,
    closed_form_marginal_attention,
    conditional_sequence_likelihood,
    fit_mle,
    fit_preliminary,
    jacobian_hessian,
    marginal_sequence_likelihood,
    numerical_gradient,
    numerical_hessian,
    panel_loglik,
    standard_errors,
    standard_errors_from_hessian,
)
from takeup.model import (
    Covariates,
    CovariateSpec,
    HouseholdHistory,
    Observation,
    PanelDataset,
    ParameterSet,
    ValidationError,
    attention_utility,
    choice_utility,
    norm_cdf,
    transition_prob,
)
from takeup.presets import BASELINE_HOUSEHOLD, BASELINE_SPEC, TABLE2_COL1
from takeup.quadrature import dense_grid, gauss_hermite
from takeup.simulator import SimConfig, simulate_panel

RULE30 = gauss_hermite(30)


def history(decisions, recert=None, x=BASELINE_HOUSEHOLD, hid="h"):
    recert = recert or (0,) * len(decisions)
    obs = tuple(Observation(t + 1, x, z, d) for t, (d, z) in enumerate(zip(decisions, recert)))
    return HouseholdHistory(hid, obs)


def normal_expectation(f):
    value, _ = integrate.quad(lambda q: f(q) * stats.norm.pdf(q), -12, 12, epsabs=1e-13, epsrel=1e-12, limit=200)
    return value


# --- conditional sequence likelihood ------------------------------------------

def test_single_period_complement():
    q = 0.3
    p1 = transition_prob(TABLE2_COL1, BASELINE_HOUSEHOLD, 0, 0, 1, q)
    assert conditional_sequence_likelihood(TABLE2_COL1, history((0,)), q) == pytest.approx(1 - p1, abs=1e-15)


def test_two_period_product():
    q = -0.7
    start = transition_prob(TABLE2_COL1, BASELINE_HOUSEHOLD, 0, 0, 1, q)
    stay = transition_prob(TABLE2_COL1, BASELINE_HOUSEHOLD, 1, 0, 1, q)
    assert conditional_sequence_likelihood(TABLE2_COL1, history((1, 1)), q) == pytest.approx(start * stay, rel=1e-14)


@pytest.mark.parametrize("q", [-2, -1, 0, 1, 2])
def test_coherent_shuffle_pair_has_equal_probability(q):
    a = history((0, 1, 1, 0), (0, 0, 1, 0))
    b = history((1, 1, 0, 0), (0, 1, 0, 0))
    pa = conditional_sequence_likelihood(TABLE2_COL1, a, q)
    pb = conditional_sequence_likelihood(TABLE2_COL1, b, q)
    assert pa == pytest.approx(pb, rel=1e-12)


def test_empty_history_rejected():
    with pytest.raises(ValidationError):
        conditional_sequence_likelihood(TABLE2_COL1, HouseholdHistory("e", ()), 0.0)


# --- marginal sequence likelihood ---------------------------------------------

@pytest.mark.parametrize("order", [1, 7, 30])
def test_zero_sigma_marginal_equals_conditional(order):
    p = TABLE2_COL1.with_sigmas(0.0, 0.0)
    h = history((0, 1, 1, 0, 0), (0, 0, 1, 0, 0))
    m = marginal_sequence_likelihood(p, h, gauss_hermite(order))
    assert m == pytest.approx(conditional_sequence_likelihood(p, h, 0.0), rel=1e-13)


def test_single_start_against_adaptive_integration():
    p = TABLE2_COL1
    c1 = attention_utility(p, BASELINE_HOUSEHOLD, 0.0)
    c2 = choice_utility(p, BASELINE_HOUSEHOLD, 1, 0.0)  # a start pays the hassle
    s1, s2 = p.sigma1, p.sigma2
    ref = normal_expectation(lambda q: norm_cdf(c1 + s1 * q) * norm_cdf(c2 + s2 * q))
    m = marginal_sequence_likelihood(p, history((1,)), RULE30)
    assert m == pytest.approx(ref, abs=1e-8)


def test_forced_choice_symmetric_marginal():
    spec = CovariateSpec(attention=("const",), benefit=("const",), hassle=("hassle_const",))
    p = ParameterSet(spec, (0.0,), (60.0,), (0.0,), (), 0.0, -math.inf)
    x = Covariates({"const": 1.0, "hassle_const": 1.0})
    assert marginal_sequence_likelihood(p, history((1,), x=x), RULE30) == pytest.approx(0.5, abs=1e-12)


def test_order_must_be_positive():
    with pytest.raises(ValidationError):
        gauss_hermite(0)


@pytest.mark.parametrize(
    "decisions,recert",
    [((0, 1, 1, 0, 1, 1), (0, 0, 1, 0, 0, 0)), ((0,) * 12, None), ((1, 1, 1), (0, 0, 0))],
)
def test_quadrature_converges(decisions, recert):
    h = history(decisions, recert)
    gaps = []
    for k in (8, 16, 32):
        lo = marginal_sequence_likelihood(TABLE2_COL1, h, gauss_hermite(k))
        hi = marginal_sequence_likelihood(TABLE2_COL1, h, gauss_hermite(2 * k))
        gaps.append(abs(hi - lo))
    assert gaps[0] > gaps[1] > gaps[2] or gaps[2] < 1e-15


@pytest.mark.parametrize("decisions", [(1,), (0, 1), (1, 0, 1), (0, 0, 0), (1, 1, 0)])
def test_brute_force_grid_matches_quadrature(decisions):
    h = history(decisions)
    grid = dense_grid(2001, 8.0)
    brute = float(np.dot(grid.weights, [conditional_sequence_likelihood(TABLE2_COL1, h, q) for q in grid.nodes]))
    assert marginal_sequence_likelihood(TABLE2_COL1, h, gauss_hermite(40)) == pytest.approx(brute, abs=1e-6)


# --- closed form ----------------------------------------------------------------

@pytest.mark.parametrize("sigma", [0.0, 0.5, 3.0])
def test_closed_form_symmetric(sigma):
    assert closed_form_marginal_attention(0.0, sigma) == 0.5


def test_closed_form_value():
    assert closed_form_marginal_attention(1.0, 1.0) == pytest.approx(0.76025, abs=1e-5)
    with pytest.raises(ValueError):
        closed_form_marginal_attention(0.0, -1.0)


def test_closed_form_matches_attention_quadrature():
    c, sigma = -1.0246, math.exp(0.452)
    quad = RULE30.expect(lambda q: stats.norm.cdf(c + sigma * q))
    assert quad == pytest.approx(closed_form_marginal_attention(c, sigma), abs=1e-8)


# --- panel log-likelihood -------------------------------------------------------

def test_panel_single_household():
    h = history((0, 1, 1))
    data = PanelDataset(BASELINE_SPEC, (h,))
    assert panel_loglik(TABLE2_COL1, data, RULE30) == pytest.approx(
        math.log(marginal_sequence_likelihood(TABLE2_COL1, h, RULE30)), rel=1e-13
    )


def test_duplicating_households_doubles_loglik(small_panel):
    hs = small_panel.households
    dup = PanelDataset(small_panel.spec, hs + tuple(HouseholdHistory(h.id + "b", h.observations) for h in hs))
    assert panel_loglik(TABLE2_COL1, dup, RULE30) == pytest.approx(2 * panel_loglik(TABLE2_COL1, small_panel, RULE30), rel=1e-13)


def test_household_order_does_not_change_loglik(small_panel):
    hs = list(small_panel.households)
    random.Random(3).shuffle(hs)
    shuffled = PanelDataset(small_panel.spec, tuple(hs))
    # the sum is correctly rounded, so the result is bit-identical
    assert panel_loglik(TABLE2_COL1, shuffled, RULE30) == panel_loglik(TABLE2_COL1, small_panel, RULE30)


def test_relabeling_covariates_leaves_loglik_unchanged(small_panel):
    spec = small_panel.spec
    # intercepts stay first; every other label moves
    order = [0, 4, 2, 3, 1]
    spec2 = CovariateSpec(
        attention=tuple(spec.attention[i] for i in order),
        benefit=spec.benefit[:1] + spec.benefit[:0:-1],
        hassle=spec.hassle,
        usage=spec.usage,
    )
    p = TABLE2_COL1
    p2 = ParameterSet(spec2, tuple(p.gamma[i] for i in order), p.beta_benefit[:1] + p.beta_benefit[:0:-1],
                      p.beta_hassle, p.beta_usage, p.log_sigma1, p.log_sigma2)
    data2 = PanelDataset(spec2, small_panel.households)
    assert panel_loglik(p2, data2, RULE30) == pytest.approx(panel_loglik(p, small_panel, RULE30), rel=1e-12)


def test_concavity_probe():
    sim = simulate_panel(SimConfig(TABLE2_COL1, seed=11, n_households=500, benefit_dispersion=0.3))
    packed = PackedPanel.from_dataset(sim.panel)
    theta = TABLE2_COL1.to_vector()
    base = panel_loglik(TABLE2_COL1, packed, RULE30)
    rng = np.random.default_rng(0)
    wins = 0
    n = 60
    for _ in range(n):
        u = rng.standard_normal(theta.size)
        u /= np.linalg.norm(u)
        other = ParameterSet.from_vector(TABLE2_COL1.spec, theta + 0.5 * u)
        wins += base >= panel_loglik(other, packed, RULE30)
    assert wins / n >= 0.95


def test_zero_likelihood_names_household():
    spec = CovariateSpec(attention=("const",), benefit=("const",), hassle=("hassle_const",))
    x = Covariates({"const": 1.0, "hassle_const": 1.0})
    p = ParameterSet(spec, (-1e200,), (0.0,), (0.0,), (), -math.inf, -math.inf)
    data = PanelDataset(spec, (history((0,), x=x, hid="ok"), history((1,), x=x, hid="doomed")))
    with pytest.raises(LikelihoodError, match="doomed"):
        panel_loglik(p, data, RULE30)


def test_empty_dataset_rejected():
    with pytest.raises(ValidationError):
        panel_loglik(TABLE2_COL1, PanelDataset(BASELINE_SPEC, ()), RULE30)


def test_gradient_richardson_agreement(small_panel):
    packed = PackedPanel.from_dataset(small_panel)
    spec = TABLE2_COL1.spec

    def f(theta):
        return panel_loglik(ParameterSet.from_vector(spec, theta), packed, RULE30)

    theta = TABLE2_COL1.to_vector()
    g4 = numerical_gradient(f, theta, 1e-4)
    g6 = numerical_gradient(f, theta, 1e-6)
    np.testing.assert_allclose(g4, g6, rtol=1e-4, atol=1e-4 * np.abs(g4).max())
    _, exact = packed.loglik_and_gradient(TABLE2_COL1, RULE30)
    np.testing.assert_allclose(exact, g4, rtol=1e-4, atol=1e-4 * np.abs(g4).max())


# --- standard errors -------------------------------------------------------------

def test_quadratic_loglik_has_unit_standard_errors():
    theta0 = np.array([0.3, -1.2, 4.0])
    f = lambda t: -0.5 * float(np.sum((t - theta0) ** 2))
    np.testing.assert_allclose(standard_errors_from_hessian(numerical_hessian(f, theta0)), 1.0, rtol=1e-6)
    g = lambda t: -(t - theta0)
    np.testing.assert_allclose(standard_errors_from_hessian(jacobian_hessian(g, theta0)), 1.0, rtol=1e-12)


def test_non_concave_hessian_reports_eigenvalue():
    with pytest.raises(HessianError) as info:
        standard_errors_from_hessian(np.diag([-1.0, 2.0]))
    assert info.value.eigenvalue == pytest.approx(2.0)


@pytest.fixture(scope="module")
def small_fit(small_panel):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fit_mle(small_panel, FitConfig(start=TABLE2_COL1))


def test_fit_converges_with_positive_standard_errors(small_fit, small_panel):
    assert small_fit.converged
    assert np.isfinite(small_fit.loglik)
    assert small_fit.loglik >= panel_loglik(TABLE2_COL1, small_panel, RULE30)
    assert all(se > 0 for se in small_fit.standard_errors.values())
    assert small_fit.history[-1] == pytest.approx(small_fit.loglik, rel=1e-10)
    assert small_fit.n_households == 300 and small_fit.n_obs == 300 * 24
    doc = small_fit.to_dict()
    assert set(doc["coefficients"]) == set(TABLE2_COL1.spec.coefficient_names())


def test_doubling_data_shrinks_standard_errors(small_fit, small_panel):
    hs = small_panel.households
    dup = PanelDataset(small_panel.spec, hs + tuple(HouseholdHistory(h.id + "b", h.observations) for h in hs))
    one = standard_errors(small_fit.params, small_panel, RULE30)
    two = standard_errors(small_fit.params, dup, RULE30)
    for name in one:
        assert one[name] / two[name] == pytest.approx(math.sqrt(2), rel=0.02)


def test_refit_on_shuffled_households_gives_same_optimum(small_fit, small_panel):
    hs = list(small_panel.households)
    random.Random(5).shuffle(hs)
    packed = PackedPanel.from_dataset(PanelDataset(small_panel.spec, tuple(hs)))
    assert panel_loglik(small_fit.params, packed, RULE30) == pytest.approx(small_fit.loglik, abs=1e-10)


def test_numeric_and_analytic_gradients_reach_same_optimum(small_fit, small_panel):
    numeric = fit_mle(small_panel, FitConfig(start=small_fit.params, gradient="numeric", max_iterations=50))
    assert numeric.loglik == pytest.approx(small_fit.loglik, abs=1e-3)


def test_zero_sigma_truth_drives_sigmas_down():
    truth = TABLE2_COL1.with_sigmas(0.0, 0.0)
    sim = simulate_panel(SimConfig(truth, seed=4, n_households=400, benefit_dispersion=0.3, horizon_months=24))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = fit_mle(sim.panel, FitConfig(start=TABLE2_COL1))
    assert res.params.sigma1 < 0.35 and res.params.sigma2 < 0.35
    assert res.params.sigma1 < TABLE2_COL1.sigma1 / 3


def test_infeasible_start_raises(small_panel):
    bad = TABLE2_COL1.replace(gamma=(-1e200, 0.0, 0.0, 0.0, 0.0))
    with pytest.raises(FitError, match="feasible start"):
        fit_mle(small_panel, FitConfig(start=bad))


@pytest.mark.filterwarnings("ignore:Hessian is not negative definite")
def test_missing_transitions_warns():
    data = PanelDataset(BASELINE_SPEC, (history((0, 0, 0), hid="a"), history((0, 0), hid="b")))
    with pytest.warns(RuntimeWarning, match="not separately identified"):
        fit_mle(data, FitConfig(max_iterations=3, start=TABLE2_COL1))


def test_iteration_cap_reports_not_converged(small_panel):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = fit_mle(small_panel, FitConfig(max_iterations=2))
    assert not res.converged
    assert res.iterations <= 2


def test_fit_config_validation():
    with pytest.raises(ValidationError):
        FitConfig(loglik_tolerance=0.0)
    with pytest.raises(ValidationError):
        FitConfig(gradient="symbolic")


# --- preliminary estimator --------------------------------------------------------

# With the two-level benefit schedule log benefit is a function of the infant
# flag, so the cell-based checks use a choice stage without it.
CELL_SPEC = CovariateSpec(
    attention=BASELINE_SPEC.attention,
    benefit=("const", "no_infant"),
    hassle=BASELINE_SPEC.hassle,
    usage=BASELINE_SPEC.usage,
)
CELL_TRUTH = ParameterSet(
    CELL_SPEC, TABLE2_COL1.gamma, (1.84, -0.44), TABLE2_COL1.beta_hassle, TABLE2_COL1.beta_usage,
    -math.inf, -math.inf,
)


def test_preliminary_attention_one_when_forced():
    sim = simulate_panel(SimConfig(CELL_TRUTH, seed=2, n_households=1800), policy=PolicySpec("force_attention"))
    res = fit_preliminary(sim.panel)
    for cell in res.cells:
        assert cell.attention_prob == pytest.approx(1.0, abs=0.05)


@pytest.fixture(scope="module")
def prelim_sim():
    truth = TABLE2_COL1.with_sigmas(0.0, 0.0)
    return truth, simulate_panel(SimConfig(truth, seed=3, n_households=3600, benefit_dispersion=0.3))


def test_preliminary_recovers_choice_coefficients(prelim_sim):
    truth, sim = prelim_sim
    res = fit_preliminary(sim.panel)
    est = res.choice.beta_benefit + res.choice.beta_hassle + res.choice.beta_usage
    true = truth.beta_benefit + truth.beta_hassle + truth.beta_usage
    for b, t, se in zip(est, true, res.choice.standard_errors):
        assert abs(b - t) <= 3 * se


def test_preliminary_attention_ratio_matches_truth():
    truth = CELL_TRUTH
    sim = simulate_panel(SimConfig(truth, seed=5, n_households=3600))
    res = fit_preliminary(sim.panel)
    assert len(res.cells) > 4
    for cell in res.cells:
        x = Covariates(dict(cell.covariates))
        expected = norm_cdf(sum(g * x[lab] for lab, g in zip(truth.spec.attention, truth.gamma)))
        se = math.sqrt(expected * (1 - expected) / cell.n) / cell.choice_prob
        assert cell.attention_prob == pytest.approx(expected, abs=max(0.05, 4 * se))


def test_preliminary_requires_stay_rows():
    data = PanelDataset(BASELINE_SPEC, (history((0, 0, 0)),))
    with pytest.raises(ValidationError, match="stay subsample is empty"):
        fit_preliminary(data)
