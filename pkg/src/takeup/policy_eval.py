"""Pilot-program evaluation: permutation DiD, fixed-effects regressions and rank-sum tests."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from math import comb
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import special, stats

from .model import ValidationError

TIE_TOL = 1e-9


@dataclass(frozen=True)
class SitePanel:
    sites: tuple[str, ...]
    years: tuple[int, ...]
    retention: np.ndarray
    cnm_treated: np.ndarray
    abm_treated: np.ndarray
    ebt_month: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.retention, dtype=float)
        n = len(self.sites)
        if r.shape != (n, len(self.years)):
            raise ValidationError(f"retention must be {n} x {len(self.years)}, got {r.shape}")
        if np.any((r < 0) | (r > 100)):
            raise ValidationError("retention rates must lie in [0, 100]")
        for name in ("cnm_treated", "abm_treated", "ebt_month"):
            v = np.asarray(getattr(self, name))
            if v.shape != (n,):
                raise ValidationError(f"{name} must have one entry per site")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "retention", r)
        object.__setattr__(self, "sites", tuple(self.sites))
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))

    def column(self, year: int) -> np.ndarray:
        try:
            return self.retention[:, self.years.index(year)]
        except ValueError:
            raise ValidationError(f"year {year} not in panel years {self.years}") from None

    def assignment(self, design: str) -> np.ndarray:
        if design == "cnm":
            return self.cnm_treated.astype(int)
        if design == "abm":
            return self.abm_treated.astype(int)
        raise ValidationError(f"unknown design {design!r}; expected 'cnm' or 'abm'")


_TABLE5 = (
    ("Rutland", 69.9, 65.9, 59.2, 0, 0, 0),
    ("Springfield", 66.9, 62.5, 64.7, 1, 1, 4),
    ("Bennington", 74.8, 73.7, 63.3, 0, 0, 4),
    ("White River", 70.8, 63.3, 66.3, 1, 0, 5),
    ("Brattleboro", 72.6, 70.3, 67.6, 1, 0, 5),
    ("St. Johnsbury", 79.9, 77.3, 70.0, 0, 1, 6),
    ("Newport", 81.5, 73.7, 59.4, 0, 0, 7),
    ("Morrisville", 83.8, 84.3, 77.9, 0, 1, 7),
    ("St. Albans", 73.2, 70.4, 59.0, 0, 0, 8),
    ("Burlington", 68.1, 62.6, 62.3, 1, 0, 8),
    ("Middlebury", 84.0, 79.7, 72.4, 0, 1, 9),
    ("Barre", 66.8, 61.4, 61.9, 1, 0, 9),
)
"""Site, retention 2015/2016/2017 (percent), CNM, ABM, EBT rollout month (months after June 2015)."""


def load_table5() -> SitePanel:
    """The embedded 12-site retention panel, ordered by EBT rollout."""
    rows = _TABLE5
    return SitePanel(
        sites=tuple(r[0] for r in rows),
        years=(2015, 2016, 2017),
        retention=np.array([r[1:4] for r in rows]),
        cnm_treated=np.array([r[4] for r in rows]),
        abm_treated=np.array([r[5] for r in rows]),
        ebt_month=np.array([r[6] for r in rows]),
    )


# ---------------------------------------------------------------------------
# estimands and permutation inference
# ---------------------------------------------------------------------------

def _check_assignment(assignment, n: int) -> np.ndarray:
    a = np.asarray(assignment)
    if a.shape != (n,) or not np.isin(a, (0, 1)).all():
        raise ValidationError("assignment must be a binary vector with one entry per site")
    k = int(a.sum())
    if k == 0 or k == n:
        raise ValidationError("assignment needs at least one treated and one control site")
    return a.astype(bool)


def did_estimand(panel: SitePanel, assignment, post_year: int, base_year: int) -> float:
    """Mean treated change minus mean control change between ``base_year`` and ``post_year``."""
    a = _check_assignment(assignment, len(panel.sites))
    diff = panel.column(post_year) - panel.column(base_year)
    return float(diff[a].mean() - diff[~a].mean())


def pretrend_estimand(panel: SitePanel, assignment) -> float:
    return did_estimand(panel, assignment, 2016, 2015)


def all_assignments(n: int, k: int) -> np.ndarray:
    """Every binary n-vector with k ones, as rows in lexicographic order of treated indices."""
    out = np.zeros((comb(n, k), n), dtype=np.int8)
    for row, idx in enumerate(itertools.combinations(range(n), k)):
        out[row, list(idx)] = 1
    return out


@dataclass(frozen=True)
class PermutationResult:
    actual_statistic: float
    distribution: np.ndarray
    rank: int
    p_value: float
    sidedness: str

    @property
    def size(self) -> int:
        return self.distribution.size

    @property
    def p_fraction(self) -> str:
        return f"{self.rank}/{self.size}"


def permutation_test(
    panel: SitePanel,
    statistic: Callable[[SitePanel, np.ndarray], float],
    assignment,
    sidedness: str = "greater",
) -> PermutationResult:
    """Exhaustive randomization test over all assignments with the actual treated count.

    ``rank`` counts assignments at least as extreme as the actual one in the
    tested direction (ties within 1e-9 included), so the actual assignment
    has rank 1 when nothing beats it and ``p = rank / size``.  The
    two-sided p-value doubles the smaller tail, capped at 1.
    """
    if sidedness not in ("greater", "less", "two-sided"):
        raise ValidationError("sidedness must be 'greater', 'less' or 'two-sided'")
    actual = _check_assignment(assignment, len(panel.sites)).astype(int)
    k = int(actual.sum())
    dist = np.array([statistic(panel, a) for a in all_assignments(len(panel.sites), k)])
    obs = statistic(panel, actual)
    n_ge = int(np.sum(dist >= obs - TIE_TOL))
    n_le = int(np.sum(dist <= obs + TIE_TOL))
    if sidedness == "greater":
        rank, p = n_ge, n_ge / dist.size
    elif sidedness == "less":
        rank, p = n_le, n_le / dist.size
    else:
        rank = min(n_ge, n_le)
        p = min(1.0, 2.0 * rank / dist.size)
    return PermutationResult(float(obs), dist, rank, p, sidedness)


def did_statistic(post_year: int, base_year: int) -> Callable[[SitePanel, np.ndarray], float]:
    def stat(panel, assignment):
        return did_estimand(panel, assignment, post_year, base_year)

    stat.__name__ = f"did_{post_year}_{base_year}"
    return stat


# ---------------------------------------------------------------------------
# fixed-effects regressions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegressionResult:
    coefficients: dict[str, float]
    standard_errors: dict[str, float]
    n_obs: int
    n_clusters: int
    dof_k: int
    p_values: dict[str, float] = field(default_factory=dict)

    def stars(self, name: str) -> str:
        p = self.p_values.get(name, 1.0)
        return "***" if p < 0.01 else "**" if p < 0.05 else "*" if p < 0.1 else ""


def _long_format(panel: SitePanel):
    n, T = panel.retention.shape
    y = panel.retention.ravel()
    site = np.repeat(np.arange(n), T)
    year = np.tile(np.array(panel.years), n)
    return y, site, year


def _collinear_columns(X: np.ndarray, names: Sequence[str]) -> list[str]:
    bad = []
    rank = 0
    for j in range(X.shape[1]):
        r = np.linalg.matrix_rank(X[:, : j + 1])
        if r == rank:
            bad.append(names[j])
        rank = r
    return bad


def fe_regression(
    panel: SitePanel, regressors: dict[str, np.ndarray], small_sample: str = "absorbed"
) -> RegressionResult:
    """Least squares with site and year effects and site-clustered CR1 standard errors.

    ``regressors`` maps names to site-by-year arrays.  The small-sample factor
    is ``G/(G-1) * (N-1)/(N-K)``.  With ``small_sample="absorbed"`` K counts
    the non-absorbed regressors (year effects and the named regressors) plus
    one, the usual convention for absorbed panel fixed effects; ``"full"``
    counts every column including the site dummies.
    """
    if small_sample not in ("absorbed", "full"):
        raise ValidationError("small_sample must be 'absorbed' or 'full'")
    y, site, year = _long_format(panel)
    n_sites = len(panel.sites)
    years = panel.years
    cols = [(site == i).astype(float) for i in range(n_sites)]
    names = [f"site:{s}" for s in panel.sites]
    for yr in years[1:]:
        cols.append((year == yr).astype(float))
        names.append(f"year:{yr}")
    for name, values in regressors.items():
        v = np.asarray(values, dtype=float)
        if v.shape != panel.retention.shape:
            raise ValidationError(f"regressor {name!r} must be sites x years")
        cols.append(v.ravel())
        names.append(name)
    X = np.column_stack(cols)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise ValidationError(f"design is rank deficient; collinear columns: {_collinear_columns(X, names)}")
    XtX_inv = np.linalg.inv(X.T @ X)
    beta = XtX_inv @ X.T @ y
    resid = y - X @ beta
    meat = np.zeros_like(XtX_inv)
    for g in range(n_sites):
        m = site == g
        s = X[m].T @ resid[m]
        meat += np.outer(s, s)
    N, G = y.size, n_sites
    K = X.shape[1] if small_sample == "full" else (len(years) - 1) + len(regressors) + 1
    V = XtX_inv @ meat @ XtX_inv * (G / (G - 1)) * ((N - 1) / (N - K))
    se = np.sqrt(np.clip(np.diag(V), 0.0, None))
    keys = list(regressors)
    idx = [names.index(k) for k in keys]
    coefs = {k: float(beta[i]) for k, i in zip(keys, idx)}
    ses = {k: float(se[i]) for k, i in zip(keys, idx)}
    pvals = {
        k: float(2 * stats.t.sf(abs(coefs[k] / ses[k]), G - 1)) if ses[k] > 0 else float("nan") for k in keys
    }
    return RegressionResult(coefs, ses, N, G, K, pvals)


def _interaction(panel: SitePanel, assignment, year: int) -> np.ndarray:
    a = _check_assignment(assignment, len(panel.sites)).astype(float)
    mask = np.array([y == year for y in panel.years], dtype=float)
    return np.outer(a, mask)


def twfe_did(panel: SitePanel, assignment, post_year: int = 2017, small_sample: str = "absorbed") -> RegressionResult:
    return fe_regression(panel, {"did": _interaction(panel, assignment, post_year)}, small_sample)


def event_study(
    panel: SitePanel, assignment, pre_year: int = 2015, post_year: int = 2017, small_sample: str = "absorbed"
) -> RegressionResult:
    """Separate treated-by-year effects for ``pre_year`` and ``post_year``; the remaining year is the reference."""
    return fe_regression(
        panel,
        {"pre": _interaction(panel, assignment, pre_year), "post": _interaction(panel, assignment, post_year)},
        small_sample,
    )


# ---------------------------------------------------------------------------
# rank-sum test
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RankSumResult:
    statistic: float
    expected: float
    variance: float
    z: float
    p_value: float
    method: str


def midranks(values) -> np.ndarray:
    """1-based ranks with ties sharing the average of the positions they occupy."""
    v = np.asarray(values, dtype=float)
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(v.size)
    sorted_v = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def wilcoxon_rank_sum(x, y, alternative: str = "two-sided", method: str = "normal") -> RankSumResult:
    """Rank-sum test of the first sample against the second.

    ``method="normal"`` uses the tie-corrected variance and a continuity
    correction of 0.5; ``method="exact"`` enumerates every split of the
    pooled midranks (feasible for small samples).
    """
    if alternative not in ("two-sided", "greater", "less"):
        raise ValidationError("alternative must be 'two-sided', 'greater' or 'less'")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n1, n2 = x.size, y.size
    if n1 == 0 or n2 == 0:
        raise ValidationError("both groups must be non-empty")
    pooled = np.concatenate([x, y])
    N = pooled.size
    r = midranks(pooled)
    W = float(r[:n1].sum())
    E = n1 * (N + 1) / 2.0
    _, counts = np.unique(pooled, return_counts=True)
    tie = float(np.sum(counts**3 - counts))
    var = n1 * n2 / 12.0 * ((N + 1) - tie / (N * (N - 1)))
    if var <= 0:
        raise ValidationError("all observations are tied; the rank-sum variance is zero")
    sd = math.sqrt(var)

    if method == "normal":
        dev = W - E
        if alternative == "two-sided":
            z = max(abs(dev) - 0.5, 0.0) / sd
            p = min(1.0, 2.0 * special.ndtr(-z))
        elif alternative == "greater":
            z = (dev - 0.5) / sd
            p = float(special.ndtr(-z))
        else:
            z = (dev + 0.5) / sd
            p = float(special.ndtr(z))
        return RankSumResult(W, E, var, float(z), float(p), method)
    if method == "exact":
        if N > 30:
            raise ValidationError("exact enumeration is limited to 30 pooled observations")
        sums = np.array([r[list(c)].sum() for c in itertools.combinations(range(N), n1)])
        if alternative == "two-sided":
            p = float(np.mean(np.abs(sums - E) >= abs(W - E) - TIE_TOL))
        elif alternative == "greater":
            p = float(np.mean(sums >= W - TIE_TOL))
        else:
            p = float(np.mean(sums <= W + TIE_TOL))
        return RankSumResult(W, E, var, (W - E) / sd, p, method)
    raise ValidationError("method must be 'normal' or 'exact'")


def rollout_rank_test(panel: SitePanel, design: str, method: str = "normal") -> RankSumResult:
    """Rank-sum test of treated against control sites on EBT rollout month."""
    a = panel.assignment(design).astype(bool)
    return wilcoxon_rank_sum(panel.ebt_month[a], panel.ebt_month[~a], "two-sided", method)


# ---------------------------------------------------------------------------
# I/O and report
# ---------------------------------------------------------------------------

SITE_COLUMNS = ("site", "year", "retention", "cnm", "abm", "ebt_month")


def write_site_panel_csv(path: Path, panel: SitePanel) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SITE_COLUMNS)
        for i, s in enumerate(panel.sites):
            for j, yr in enumerate(panel.years):
                w.writerow([s, yr, f"{panel.retention[i, j]:g}", int(panel.cnm_treated[i]),
                            int(panel.abm_treated[i]), int(panel.ebt_month[i])])


def read_site_panel_csv(path: Path) -> SitePanel:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(SITE_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValidationError(f"{path}: missing columns {sorted(missing)}")
        rows = []
        for line, row in enumerate(reader, start=2):
            try:
                rows.append((row["site"], int(row["year"]), float(row["retention"]), int(row["cnm"]),
                             int(row["abm"]), int(row["ebt_month"])))
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{path}: line {line}: {exc}") from None
    sites = list(dict.fromkeys(r[0] for r in rows))
    years = sorted({r[1] for r in rows})
    ret = np.full((len(sites), len(years)), np.nan)
    info = {}
    for s, yr, v, c, a, e in rows:
        ret[sites.index(s), years.index(yr)] = v
        if info.setdefault(s, (c, a, e)) != (c, a, e):
            raise ValidationError(f"{path}: site {s!r} has inconsistent treatment or rollout columns")
    if np.isnan(ret).any():
        raise ValidationError(f"{path}: panel is not balanced")
    return SitePanel(
        tuple(sites), tuple(years), ret,
        np.array([info[s][0] for s in sites]), np.array([info[s][1] for s in sites]),
        np.array([info[s][2] for s in sites]),
    )


def regression_report(panel: SitePanel, design: str) -> str:
    """Plain-text table with the DiD and event-study columns."""
    a = panel.assignment(design)
    did = twfe_did(panel, a)
    es = event_study(panel, a)
    lines = [
        f"Design: {design.upper()}   N = {did.n_obs}   clusters = {did.n_clusters}",
        f"{'':28s}{'(1) DiD':>16s}{'(2) Event study':>18s}",
    ]

    def cell(res, key):
        return f"{res.coefficients[key]:.3f}{res.stars(key)}", f"({res.standard_errors[key]:.3f})"

    rows = [("1{t=2017} x treated", cell(did, "did"), cell(es, "post")),
            ("1{t=2015} x treated", ("", ""), cell(es, "pre"))]
    for label, c1, c2 in rows:
        lines.append(f"{label:28s}{c1[0]:>16s}{c2[0]:>18s}")
        lines.append(f"{'':28s}{c1[1]:>16s}{c2[1]:>18s}")
    lines.append("Site and year fixed effects; site-clustered standard errors. * p<0.1, ** p<0.05, *** p<0.01")
    return "\n".join(lines)
