import math

import mpmath
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from takeup.model import (
    Covariates,
    CovariateSpec,
    HouseholdHistory,
    Observation,
    PanelDataset,
    ParameterSet,
    ValidationError,
    attention_prob,
    attention_utility,
    choice_prob,
    choice_utility,
    hassle_indicator,
    norm_cdf,
    recertification_flag,
    transition_prob,
)
from takeup.presets import BASELINE_HOUSEHOLD, BASELINE_SPEC, TABLE2_COL1, household_covariates


def mp_phi(x):
    return float(mpmath.ncdf(x))


# --- primitives -------------------------------------------------------------

@pytest.mark.parametrize("d_prev,z,expected", [(0, 0, 1), (0, 1, 1), (1, 0, 0), (1, 1, 1)])
def test_hassle_indicator(d_prev, z, expected):
    assert hassle_indicator(d_prev, z) == expected


@pytest.mark.parametrize(
    "age,d_prev,expected",
    [(13, 1, 1), (13, 0, 0), (14, 1, 0), (1, 1, 1), (25, 1, 1), (37, 1, 1), (0, 1, 0), (49, 1, 0)],
)
def test_recertification_flag(age, d_prev, expected):
    assert recertification_flag(age, d_prev) == expected


def test_attention_utility_intercept_only():
    x = household_covariates().replace(log_benefit=0.0, la=0.0, education=0.0)
    assert attention_utility(TABLE2_COL1, x, 0.0) == pytest.approx(-2.716, abs=1e-12)


def test_attention_utility_random_effect_only():
    p = TABLE2_COL1.replace(gamma=(0.0,) * 5, log_sigma1=0.0)
    assert attention_utility(p, BASELINE_HOUSEHOLD, 2.0) == pytest.approx(2.0)


def test_baseline_household_utilities():
    expected_a = -2.716 + 0.321 * math.log(150) + 0.001 * 15 + 0.034 * 2
    assert attention_utility(TABLE2_COL1, BASELINE_HOUSEHOLD, 0.0) == pytest.approx(expected_a, abs=1e-12)
    assert expected_a == pytest.approx(-1.0246, abs=1e-3)
    assert choice_utility(TABLE2_COL1, BASELINE_HOUSEHOLD, 0, 0.0) == pytest.approx(2.0045, abs=1e-3)
    assert choice_utility(TABLE2_COL1, BASELINE_HOUSEHOLD, 1, 0.0) == pytest.approx(1.7945, abs=1e-3)


def test_baseline_household_probabilities():
    x = BASELINE_HOUSEHOLD
    assert attention_prob(TABLE2_COL1, x, 0, 0.0) == pytest.approx(0.1528, abs=1e-3)
    assert choice_prob(TABLE2_COL1, x, 1, 0, 0.0) == pytest.approx(0.9775, abs=1e-3)
    assert choice_prob(TABLE2_COL1, x, 1, 1, 0.0) == pytest.approx(0.9636, abs=1e-3)
    assert transition_prob(TABLE2_COL1, x, 1, 0, 1, 0.0) == pytest.approx(0.9775, abs=1e-3)
    # a start pays the sign-up hassle, so the choice index is 1.7945 rather than 2.0045
    start = mp_phi(-1.0246) * mp_phi(1.7945)
    assert transition_prob(TABLE2_COL1, x, 0, 0, 1, 0.0) == pytest.approx(start, abs=1e-3)
    assert transition_prob(TABLE2_COL1, x, 0, 0, 1, 0.0) == pytest.approx(0.1472, abs=1e-3)


def test_probabilities_match_independent_normal_cdf():
    x = BASELINE_HOUSEHOLD
    for q in (-2.0, 0.0, 1.5):
        a = attention_utility(TABLE2_COL1, x, q)
        assert attention_prob(TABLE2_COL1, x, 0, q) == pytest.approx(mp_phi(a), rel=1e-14)
        c = choice_utility(TABLE2_COL1, x, 1, q)
        assert choice_prob(TABLE2_COL1, x, 0, 0, q) == pytest.approx(mp_phi(c), rel=1e-14)


def test_attention_certain_after_participation():
    for q in (-5.0, 0.0, 5.0):
        assert attention_prob(TABLE2_COL1, BASELINE_HOUSEHOLD, 1, q) == 1.0


def test_null_parameters_give_half():
    p = ParameterSet(BASELINE_SPEC, (0,) * 5, (0,) * 3, (0,) * 2, (0,), -math.inf, -math.inf)
    assert choice_utility(p, BASELINE_HOUSEHOLD, 1, 3.0) == 0.0
    assert choice_prob(p, BASELINE_HOUSEHOLD, 0, 0, 3.0) == 0.5
    assert attention_prob(p, BASELINE_HOUSEHOLD, 0, -3.0) == 0.5


@pytest.mark.parametrize("x", [-40.0, -38.0, -10.0, 0.0, 5.0, 8.0])
def test_norm_cdf_tail_accuracy(x):
    assert norm_cdf(x) == pytest.approx(mp_phi(x), rel=1e-14)


# --- properties ---------------------------------------------------------------

states = st.tuples(
    st.floats(50, 400), st.integers(0, 1), st.floats(0, 30), st.integers(1, 3),
    st.integers(0, 1), st.integers(0, 1), st.floats(-4, 4),
)


@settings(max_examples=200, deadline=None)
@given(states)
def test_transition_probabilities_sum_to_one(state):
    b, ni, la, ed, d_prev, z, q = state
    x = household_covariates(b, ni, la, ed)
    total = sum(transition_prob(TABLE2_COL1, x, d_prev, z, d, q) for d in (0, 1))
    assert total == pytest.approx(1.0, abs=1e-12)
    pa = attention_prob(TABLE2_COL1, x, d_prev, q)
    pc = choice_prob(TABLE2_COL1, x, d_prev, z, q)
    assert 0.0 < pa <= 1.0 and 0.0 < pc < 1.0
    assert (pa == 1.0) == (d_prev == 1) or pa == pytest.approx(1.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(60, 300), st.floats(0.1, 20), st.floats(-3, 3))
def test_monotone_in_positive_coefficient(b, step, q):
    # log benefit has positive coefficients in both stages
    lo = household_covariates(benefit=b)
    hi = household_covariates(benefit=b + step)
    assert attention_prob(TABLE2_COL1, hi, 0, q) >= attention_prob(TABLE2_COL1, lo, 0, q)
    assert choice_prob(TABLE2_COL1, hi, 1, 0, q) >= choice_prob(TABLE2_COL1, lo, 1, 0, q)


def test_zero_sigmas_remove_q_dependence():
    p = TABLE2_COL1.with_sigmas(0.0, 0.0)
    vals = {transition_prob(p, BASELINE_HOUSEHOLD, 0, 0, 1, q) for q in (-2.0, 0.0, 2.0)}
    assert len(vals) == 1


def test_hassle_irrelevant_for_nonparticipants():
    for z in (0, 1):
        assert hassle_indicator(0, z) == 1


# --- data model ---------------------------------------------------------------

def test_covariates_validation():
    with pytest.raises(ValidationError, match="missing"):
        Covariates({"const": 1.0}).validate(BASELINE_SPEC)
    with pytest.raises(ValidationError, match="intercept"):
        BASELINE_HOUSEHOLD.replace(const=2.0).validate(BASELINE_SPEC)
    BASELINE_HOUSEHOLD.validate(BASELINE_SPEC)


def test_missing_label_raises_in_utility():
    x = Covariates({"const": 1.0})
    with pytest.raises((KeyError, ValidationError)):
        attention_utility(TABLE2_COL1, x, 0.0)


def test_history_and_panel_invariants():
    obs = [Observation(t, BASELINE_HOUSEHOLD, 0, d) for t, d in zip((1, 2, 3), (0, 1, 1))]
    h = HouseholdHistory("a", obs)
    assert h.previous_decisions() == (0, 0, 1)
    with pytest.raises(ValidationError):
        HouseholdHistory("b", [obs[0], obs[2]])
    with pytest.raises(ValidationError):
        HouseholdHistory("c", obs, initial_decision=1)
    with pytest.raises(ValidationError, match="unique"):
        PanelDataset(BASELINE_SPEC, [h, h])
    with pytest.raises(ValidationError):
        Observation(1, BASELINE_HOUSEHOLD, 2, 0)
    with pytest.raises(ValidationError):
        Observation(1, BASELINE_HOUSEHOLD, 0, 0, youngest_age_months=-10)


def test_parameter_vector_roundtrip():
    theta = TABLE2_COL1.to_vector()
    again = ParameterSet.from_vector(BASELINE_SPEC, theta)
    assert again == TABLE2_COL1
    assert ParameterSet.from_coefficients(BASELINE_SPEC, TABLE2_COL1.coefficients()) == TABLE2_COL1
    with pytest.raises(ValidationError):
        ParameterSet.from_vector(BASELINE_SPEC, theta[:-1])
    assert TABLE2_COL1.sigma1 == pytest.approx(math.exp(0.452))


def test_spec_roundtrip_and_validation():
    assert CovariateSpec.from_dict(BASELINE_SPEC.to_dict()) == BASELINE_SPEC
    with pytest.raises(ValidationError):
        CovariateSpec(attention=(), benefit=("const",), hassle=("h",))
    with pytest.raises(ValidationError):
        CovariateSpec(attention=("const", "const"), benefit=("const",), hassle=("h",))


def test_overlapping_labels_are_shared():
    spec = CovariateSpec(attention=("const", "la"), benefit=("const", "la"), hassle=("hassle_const", "la"))
    p = ParameterSet(spec, (0.0, 0.1), (0.0, 0.2), (0.0, 0.3), (), -math.inf, -math.inf)
    x = Covariates({"const": 1.0, "la": 2.0, "hassle_const": 1.0})
    assert choice_utility(p, x, 1, 0.0) == pytest.approx(2.0 * (0.2 + 0.3))
    assert choice_utility(p, x, 0, 0.0) == pytest.approx(2.0 * 0.2)
