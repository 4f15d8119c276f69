from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from takeup.model import ValidationError
from takeup.policy_eval import (
    SitePanel,
    all_assignments,
    did_estimand,
    did_statistic,
    event_study,
    fe_regression,
    load_table5,
    midranks,
    permutation_test,
    pretrend_estimand,
    read_site_panel_csv,
    regression_report,
    rollout_rank_test,
    twfe_did,
    wilcoxon_rank_sum,
    write_site_panel_csv,
)

PANEL = load_table5()
CNM = PANEL.assignment("cnm")
ABM = PANEL.assignment("abm")


def with_retention(panel, retention, years=None):
    return SitePanel(panel.sites, years or panel.years, retention, panel.cnm_treated, panel.abm_treated, panel.ebt_month)


# --- fixture ---------------------------------------------------------------------

def test_fixture_values():
    assert PANEL.retention[PANEL.sites.index("Rutland"), 0] == 69.9
    assert list(PANEL.retention[-1]) == [66.8, 61.4, 61.9]
    assert CNM.sum() == 5 and ABM.sum() == 4
    cnm_sites = {s for s, a in zip(PANEL.sites, CNM) if a}
    assert cnm_sites == {"Springfield", "White River", "Brattleboro", "Burlington", "Barre"}
    abm_sites = {s for s, a in zip(PANEL.sites, ABM) if a}
    assert abm_sites == {"Springfield", "St. Johnsbury", "Morrisville", "Middlebury"}


def test_panel_validation():
    with pytest.raises(ValidationError):
        with_retention(PANEL, PANEL.retention[:, :2])
    with pytest.raises(ValidationError):
        with_retention(PANEL, PANEL.retention + 50)
    with pytest.raises(ValidationError):
        PANEL.assignment("xyz")


# --- estimands -----------------------------------------------------------------------

def test_cnm_did():
    assert did_estimand(PANEL, CNM, 2017, 2015) == pytest.approx(7.791, abs=1e-3)


def test_constant_panel_gives_zero():
    flat = with_retention(PANEL, np.full((12, 3), 70.0))
    assert did_estimand(flat, CNM, 2017, 2015) == 0.0
    assert pretrend_estimand(flat, CNM) == 0.0


def test_pretrend_is_2016_did():
    assert pretrend_estimand(PANEL, CNM) == did_estimand(PANEL, CNM, 2016, 2015)
    assert pretrend_estimand(PANEL, CNM) < 0


def test_group_swap_flips_sign():
    assert did_estimand(PANEL, 1 - CNM, 2017, 2015) == pytest.approx(-did_estimand(PANEL, CNM, 2017, 2015), abs=1e-12)


def test_assignment_validation():
    with pytest.raises(ValidationError):
        did_estimand(PANEL, np.zeros(12, dtype=int), 2017, 2015)
    with pytest.raises(ValidationError):
        did_estimand(PANEL, np.ones(11, dtype=int), 2017, 2015)
    with pytest.raises(ValidationError):
        did_estimand(PANEL, CNM, 2018, 2015)


# --- permutation inference --------------------------------------------------------------

def test_enumeration_sizes():
    assert all_assignments(12, 5).shape == (792, 12)
    assert all_assignments(12, 4).shape == (comb(12, 4), 12)
    assert np.unique(all_assignments(12, 5), axis=0).shape[0] == 792


def test_cnm_permutation_ranks_first():
    for base in (2015, 2016):
        res = permutation_test(PANEL, did_statistic(2017, base), CNM, "greater")
        assert res.rank == 1 and res.size == 792
        assert res.p_value == pytest.approx(1 / 792)
        assert res.p_fraction == "1/792"


def test_abm_enumeration_size():
    res = permutation_test(PANEL, did_statistic(2017, 2016), ABM, "greater")
    assert res.size == 495


def test_pretrend_permutation_p():
    res = permutation_test(PANEL, lambda p, a: pretrend_estimand(p, a), CNM, "less")
    assert res.p_value == pytest.approx(0.101, abs=1 / 792)


def test_actual_assignment_enumerated_once():
    rows = all_assignments(12, 5)
    assert int(np.sum(np.all(rows == CNM, axis=1))) == 1


def test_distribution_invariant_to_site_order():
    order = np.random.default_rng(0).permutation(12)
    shuffled = SitePanel(tuple(PANEL.sites[i] for i in order), PANEL.years, PANEL.retention[order],
                         PANEL.cnm_treated[order], PANEL.abm_treated[order], PANEL.ebt_month[order])
    a = permutation_test(PANEL, did_statistic(2017, 2015), CNM)
    b = permutation_test(shuffled, did_statistic(2017, 2015), CNM[order])
    np.testing.assert_allclose(np.sort(a.distribution), np.sort(b.distribution), atol=1e-12)
    assert a.rank == b.rank


def test_two_sided_doubles_smaller_tail():
    one = permutation_test(PANEL, did_statistic(2017, 2015), CNM, "greater")
    two = permutation_test(PANEL, did_statistic(2017, 2015), CNM, "two-sided")
    assert two.p_value == pytest.approx(2 * one.p_value)
    flat = with_retention(PANEL, np.full((12, 3), 70.0))
    assert permutation_test(flat, did_statistic(2017, 2015), CNM, "two-sided").p_value == 1.0
    with pytest.raises(ValidationError):
        permutation_test(PANEL, did_statistic(2017, 2015), CNM, "sideways")


# --- regressions -----------------------------------------------------------------------------

def test_twfe_cnm():
    res = twfe_did(PANEL, CNM)
    assert res.coefficients["did"] == pytest.approx(8.723, abs=1e-3)
    assert res.standard_errors["did"] == pytest.approx(1.646, rel=0.05)
    assert res.n_obs == 36 and res.n_clusters == 12
    assert res.stars("did") == "***"


def test_twfe_matches_closed_form_contrast():
    r = PANEL.retention
    a = CNM.astype(bool)
    change = r[:, 2] - r[:, :2].mean(axis=1)
    expected = change[a].mean() - change[~a].mean()
    assert twfe_did(PANEL, CNM).coefficients["did"] == pytest.approx(expected, abs=1e-9)


def test_twfe_constant_outcome_and_year_shift():
    flat = with_retention(PANEL, np.full((12, 3), 70.0))
    assert twfe_did(flat, CNM).coefficients["did"] == pytest.approx(0.0, abs=1e-10)
    shifted = PANEL.retention.copy()
    shifted[:, 2] = np.minimum(shifted[:, 2] + 10, 100)
    assert twfe_did(with_retention(PANEL, shifted), CNM).coefficients["did"] == pytest.approx(
        twfe_did(PANEL, CNM).coefficients["did"], abs=1e-9)


def test_cluster_se_invariant_to_row_order_within_cluster():
    order = [2, 0, 1]
    reordered = with_retention(PANEL, PANEL.retention[:, order], tuple(PANEL.years[i] for i in order))
    a, b = twfe_did(PANEL, CNM), twfe_did(reordered, CNM)
    assert b.coefficients["did"] == pytest.approx(a.coefficients["did"], abs=1e-9)
    assert b.standard_errors["did"] == pytest.approx(a.standard_errors["did"], rel=1e-9)


def test_event_study_cnm():
    res = event_study(PANEL, CNM)
    assert res.coefficients["pre"] == pytest.approx(1.863, abs=1e-3)
    assert res.coefficients["post"] == pytest.approx(9.654, abs=1e-3)
    assert res.coefficients["post"] == pytest.approx(did_estimand(PANEL, CNM, 2017, 2016), abs=1e-9)
    assert res.standard_errors["pre"] == pytest.approx(1.323, rel=0.05)
    assert res.standard_errors["post"] == pytest.approx(1.527, rel=0.05)


def test_event_study_swap_years():
    swapped = with_retention(PANEL, PANEL.retention[:, ::-1])
    a, b = event_study(PANEL, CNM), event_study(swapped, CNM)
    assert b.coefficients["pre"] == pytest.approx(a.coefficients["post"], abs=1e-9)
    assert b.coefficients["post"] == pytest.approx(a.coefficients["pre"], abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(arrays(float, (12, 3), elements=st.floats(20, 95)), st.sets(st.integers(0, 11), min_size=1, max_size=11))
def test_event_study_identity_on_random_panels(retention, treated):
    assignment = np.isin(np.arange(12), list(treated)).astype(int)
    panel = with_retention(PANEL, retention)
    res = event_study(panel, assignment)
    diff = res.coefficients["post"] - res.coefficients["pre"]
    assert diff == pytest.approx(did_estimand(panel, assignment, 2017, 2015), abs=1e-8)


def test_rank_deficiency_names_columns():
    absorbed = np.outer(CNM, np.ones(3))
    with pytest.raises(ValidationError, match="treated_level"):
        fe_regression(PANEL, {"treated_level": absorbed})


def test_full_small_sample_factor_is_larger():
    a = twfe_did(PANEL, CNM)
    b = twfe_did(PANEL, CNM, small_sample="full")
    assert b.standard_errors["did"] > a.standard_errors["did"]
    assert b.coefficients == a.coefficients


def test_regression_report_layout():
    text = regression_report(PANEL, "cnm")
    assert "8.723***" in text and "9.654***" in text and "(1.646)" in text


# --- rank-sum --------------------------------------------------------------------------------------

def test_midranks():
    np.testing.assert_array_equal(midranks([4, 4, 0, 7]), [2.5, 2.5, 1.0, 4.0])


def test_rank_sum_matches_scipy_normal():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.integers(0, 8, rng.integers(2, 8))
        y = rng.integers(0, 8, rng.integers(2, 8))
        if np.unique(np.concatenate([x, y])).size == 1:
            continue
        for alt in ("two-sided", "greater", "less"):
            ref = stats.mannwhitneyu(x, y, alternative=alt, method="asymptotic", use_continuity=True).pvalue
            assert wilcoxon_rank_sum(x, y, alt).p_value == pytest.approx(ref, abs=1e-12)


def test_exact_rank_sum_matches_permutation_oracle():
    x, y = np.array([4, 6, 7, 9]), np.array([0, 4, 5, 5, 7, 8, 8, 9])
    ref = stats.permutation_test(
        (x, y), _rank_sum, permutation_type="independent", alternative="greater", n_resamples=np.inf, vectorized=False,
    ).pvalue
    assert wilcoxon_rank_sum(x, y, "greater", method="exact").p_value == pytest.approx(ref, abs=1e-12)


def _rank_sum(a, b):
    return midranks(np.concatenate([a, b]))[: np.size(a)].sum()


def test_cnm_rollout_balanced():
    assert rollout_rank_test(PANEL, "cnm").p_value >= 0.95


def test_separated_samples_significant():
    x = np.arange(10.0)
    assert wilcoxon_rank_sum(x, x + 100).p_value < 0.01


def test_all_tied_rejected():
    with pytest.raises(ValidationError, match="tied"):
        wilcoxon_rank_sum([3, 3], [3, 3, 3])
    with pytest.raises(ValidationError):
        wilcoxon_rank_sum([], [1, 2])


# --- CSV -------------------------------------------------------------------------------------------------

def test_site_panel_csv_roundtrip(tmp_path):
    path = tmp_path / "sites.csv"
    write_site_panel_csv(path, PANEL)
    back = read_site_panel_csv(path)
    assert back.sites == PANEL.sites and back.years == PANEL.years
    np.testing.assert_array_equal(back.retention, PANEL.retention)
    np.testing.assert_array_equal(back.cnm_treated, PANEL.cnm_treated)


def test_site_panel_csv_errors(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("site,year,retention,cnm,abm,ebt_month\nA,2015,x,0,0,1\n")
    with pytest.raises(ValidationError, match="line 2"):
        read_site_panel_csv(path)
    path.write_text("site,year,retention,cnm,abm,ebt_month\nA,2015,50,0,0,1\nA,2016,50,0,0,1\nB,2015,50,1,0,1\n")
    with pytest.raises(ValidationError, match="balanced"):
        read_site_panel_csv(path)
