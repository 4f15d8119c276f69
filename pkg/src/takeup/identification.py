"""Numerical checks of the identification results on model-implied probabilities.

Everything here is a population statement: sequence probabilities are
integrated against the random-effect density on a dense reference grid,
derivatives are central differences in one period's covariate, and the
constructive ratio formulas are compared with the coefficient ratios they
are supposed to recover.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import special

from .model import ParameterSet, ValidationError, hassle_indicator
from .quadrature import QuadratureRule, dense_grid

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


class DegenerateFamilyError(ValueError):
    """The denominator derivative of a ratio formula is numerically zero."""


class ConstructionError(ValueError):
    """A matched-pair construction violates the equal-probability condition."""


@dataclass(frozen=True)
class SequenceQuery:
    decisions: tuple[int, ...]
    covariates: tuple[Mapping[str, float], ...]
    recert: tuple[int, ...]
    pivot_period: int = 1
    pivot_label: str = "log_benefit"

    def __post_init__(self):
        T = len(self.decisions)
        if T == 0 or len(self.covariates) != T or len(self.recert) != T:
            raise ValidationError("decisions, covariates and recert must have the same non-zero length")
        if not 1 <= self.pivot_period <= T:
            raise ValidationError("pivot_period must lie in 1..T")
        if any(d not in (0, 1) for d in self.decisions) or any(z not in (0, 1) for z in self.recert):
            raise ValidationError("decisions and recert flags must be binary")

    @property
    def horizon(self) -> int:
        return len(self.decisions)

    def perturbed(self, label: str, period: int, h: float) -> "SequenceQuery":
        covs = list(self.covariates)
        x = dict(covs[period - 1])
        x[label] = x[label] + h
        covs[period - 1] = x
        return SequenceQuery(self.decisions, tuple(covs), self.recert, self.pivot_period, self.pivot_label)

    def with_pivot(self, label: str) -> "SequenceQuery":
        return SequenceQuery(self.decisions, self.covariates, self.recert, self.pivot_period, label)


def constant_query(decisions, recert, x: Mapping[str, float], pivot_period: int, pivot_label: str) -> SequenceQuery:
    T = len(decisions)
    return SequenceQuery(tuple(decisions), (dict(x),) * T, tuple(recert), pivot_period, pivot_label)


@dataclass(frozen=True)
class DerivativeEstimate:
    value: float
    step: float
    method: str
    richardson_error: float


# ---------------------------------------------------------------------------
# probabilities
# ---------------------------------------------------------------------------

def _dot(labels, coefs, x) -> float:
    return sum(b * x[lab] for lab, b in zip(labels, coefs))


def _indices(params: ParameterSet, x: Mapping[str, float], s: int) -> tuple[float, float]:
    spec = params.spec
    a = _dot(spec.attention, params.gamma, x)
    c = (
        _dot(spec.benefit, params.beta_benefit, x)
        + s * _dot(spec.hassle, params.beta_hassle, x)
        + _dot(spec.usage, params.beta_usage, x)
    )
    return a, c


def _log_transition(a, c, d_prev: int, d: int):
    if d_prev:
        return special.log_ndtr(c) if d else special.log_ndtr(-c)
    if d:
        return special.log_ndtr(a) + special.log_ndtr(c)
    return np.logaddexp(special.log_ndtr(-a), special.log_ndtr(a) + special.log_ndtr(-c))


def log_conditional_path(params: ParameterSet, query: SequenceQuery, q: np.ndarray) -> np.ndarray:
    """Log of the sequence probability conditional on each value in ``q``."""
    q = np.asarray(q, dtype=float)
    out = np.zeros_like(q)
    d_prev = 0
    for x, z, d in zip(query.covariates, query.recert, query.decisions):
        s = hassle_indicator(d_prev, z if d_prev else 0)
        a, c = _indices(params, x, s)
        out += _log_transition(a + params.sigma1 * q, c + params.sigma2 * q, d_prev, d)
        d_prev = d
    return out


def sequence_probability(params: ParameterSet, query: SequenceQuery, grid: QuadratureRule | None = None) -> float:
    grid = dense_grid() if grid is None else grid
    return float(np.exp(log_conditional_path(params, query, grid.nodes)) @ grid.weights)


def fod(params: ParameterSet, query: SequenceQuery, step: float = 1e-4,
        grid: QuadratureRule | None = None) -> DerivativeEstimate:
    """Central-difference derivative of the sequence probability in the pivot covariate at the pivot period.

    The Richardson error is the gap between the estimates at ``step`` and
    ``step / 2``.
    """
    if not step > 0:
        raise ValidationError("step must be positive")
    x0 = query.covariates[query.pivot_period - 1][query.pivot_label]
    if x0 + step == x0 or x0 + step / 2 == x0:
        raise ValidationError(f"step {step} underflows at covariate value {x0}")
    grid = dense_grid() if grid is None else grid

    def cd(h):
        up = sequence_probability(params, query.perturbed(query.pivot_label, query.pivot_period, h), grid)
        dn = sequence_probability(params, query.perturbed(query.pivot_label, query.pivot_period, -h), grid)
        return (up - dn) / (2.0 * h)

    coarse, fine = cd(step), cd(step / 2)
    return DerivativeEstimate(fine, step / 2, "central-difference order-2", abs(fine - coarse))


def _log_pdf(x):
    return -0.5 * x * x - _LOG_SQRT_2PI


def _dlog_transition(a, c, d_prev: int, d: int):
    """Derivatives of the log transition probability with respect to the two indices."""
    if d_prev:
        if d:
            return np.zeros_like(c), np.exp(_log_pdf(c) - special.log_ndtr(c))
        return np.zeros_like(c), -np.exp(_log_pdf(c) - special.log_ndtr(-c))
    if d:
        return np.exp(_log_pdf(a) - special.log_ndtr(a)), np.exp(_log_pdf(c) - special.log_ndtr(c))
    lp0 = np.logaddexp(special.log_ndtr(-a), special.log_ndtr(a) + special.log_ndtr(-c))
    return (-np.exp(_log_pdf(a) + special.log_ndtr(c) - lp0),
            -np.exp(special.log_ndtr(a) + _log_pdf(c) - lp0))


def stage_coefficients(params: ParameterSet, label: str, s: int) -> tuple[float, float]:
    """Total coefficient on ``label`` in the attention index and in the choice index at hassle ``s``."""
    spec = params.spec
    g = sum(v for lab, v in zip(spec.attention, params.gamma) if lab == label)
    b = sum(v for lab, v in zip(spec.benefit, params.beta_benefit) if lab == label)
    b += s * sum(v for lab, v in zip(spec.hassle, params.beta_hassle) if lab == label)
    b += sum(v for lab, v in zip(spec.usage, params.beta_usage) if lab == label)
    return g, b


def cpl_se_integral(params: ParameterSet, query: SequenceQuery, grid: QuadratureRule | None = None) -> float:
    """Derivative of the sequence probability as the integral of level times semi-elasticity.

    The level is the conditional sequence probability and the semi-elasticity
    is the derivative of the pivot period's log transition in the pivot
    covariate, both as functions of the random effect.
    """
    grid = dense_grid() if grid is None else grid
    q = grid.nodes
    cpl = np.exp(log_conditional_path(params, query, q))
    tau = query.pivot_period
    d_prev = query.decisions[tau - 2] if tau > 1 else 0
    z = query.recert[tau - 1] if d_prev else 0
    s = hassle_indicator(d_prev, z)
    a, c = _indices(params, query.covariates[tau - 1], s)
    da, dc = _dlog_transition(a + params.sigma1 * q, c + params.sigma2 * q, d_prev, query.decisions[tau - 1])
    g, b = stage_coefficients(params, query.pivot_label, s)
    se = da * g + dc * b
    return float((cpl * se) @ grid.weights)


# ---------------------------------------------------------------------------
# constructive ratios
# ---------------------------------------------------------------------------

def stay_family(horizon: int, tau: int, z_tau: int, x: Mapping[str, float], label: str = "log_benefit"
                ) -> list[SequenceQuery]:
    """All completions with ``d[tau-1] = d[tau] = 1`` and the given recertification flag at ``tau``.

    Recertification flags away from the pivot range over both values in
    months that follow a participation month and are 0 elsewhere.
    """
    if not 2 <= tau <= horizon:
        raise ValidationError("the stay family needs 2 <= tau <= horizon (the initial decision is 0)")
    family = []
    for d in itertools.product((0, 1), repeat=horizon):
        if d[tau - 2] != 1 or d[tau - 1] != 1:
            continue
        free = [t for t in range(horizon) if t != tau - 1 and t > 0 and d[t - 1] == 1]
        for zs in itertools.product((0, 1), repeat=len(free)):
            z = [0] * horizon
            z[tau - 1] = z_tau
            for t, v in zip(free, zs):
                z[t] = v
            family.append(constant_query(d, z, x, tau, label))
    return family


def _averaged_ratio(params, family, omega, benefit_label, step, grid) -> float:
    num = np.mean([fod(params, q.with_pivot(omega), step, grid).value for q in family])
    den = np.mean([fod(params, q.with_pivot(benefit_label), step, grid).value for q in family])
    if abs(den) < 1e-12:
        raise DegenerateFamilyError(f"benefit derivative averaged over the family is {den:.3g}")
    return float(num / den)


def theorem1_ratio(params: ParameterSet, tau: int, omega: str, family: Sequence[SequenceQuery] | None = None,
                   x: Mapping[str, float] | None = None, benefit_label: str = "log_benefit",
                   horizon: int = 4, step: float = 1e-4, grid: QuadratureRule | None = None) -> float:
    """Choice-stage ratio from stay sequences without recertification at the pivot."""
    spec = params.spec
    if omega not in spec.benefit and omega not in spec.usage:
        raise ValidationError(f"{omega!r} is not a benefit or usage covariate")
    if family is None:
        family = stay_family(horizon, tau, 0, _require(x))
    return _averaged_ratio(params, family, omega, benefit_label, step, grid)


def theorem2_ratio(params: ParameterSet, tau: int, omega: str, family: Sequence[SequenceQuery] | None = None,
                   x: Mapping[str, float] | None = None, benefit_label: str = "log_benefit",
                   horizon: int = 4, step: float = 1e-4, grid: QuadratureRule | None = None) -> float:
    """Hassle-stage ratio from stay sequences with recertification at the pivot."""
    if omega not in params.spec.hassle and omega != benefit_label:
        raise ValidationError(f"{omega!r} is not a hassle covariate")
    if family is None:
        family = stay_family(horizon, tau, 1, _require(x))
    return _averaged_ratio(params, family, omega, benefit_label, step, grid)


def _require(x):
    if x is None:
        raise ValidationError("either a family or a covariate vector x must be supplied")
    return x


@dataclass(frozen=True)
class MatchedPair:
    start: SequenceQuery
    stay: SequenceQuery


def coherent_shuffle_pair(x: Mapping[str, float], label: str = "log_benefit") -> MatchedPair:
    """Canonical four-month pair with the pivot at month 2.

    The first sequence starts at month 2 and the second stays at month 2
    after a recertification; both have the same conditional probability for
    every value of the random effect and the same pivot choice index.
    """
    start = constant_query((0, 1, 1, 0), (0, 0, 1, 0), x, 2, label)
    stay = constant_query((1, 1, 0, 0), (0, 1, 0, 0), x, 2, label)
    return MatchedPair(start, stay)


def h1_residual(params: ParameterSet, pair: MatchedPair, q_grid: np.ndarray | None = None) -> float:
    """Largest gap between the two conditional sequence probabilities over a grid of random effects."""
    q = np.linspace(-8, 8, 2001) if q_grid is None else np.asarray(q_grid)
    a = np.exp(log_conditional_path(params, pair.start, q))
    b = np.exp(log_conditional_path(params, pair.stay, q))
    return float(np.max(np.abs(a - b)))


def theorem3_ratio(params: ParameterSet, tau: int, omega: str, pairs: Sequence[MatchedPair] | None = None,
                   x: Mapping[str, float] | None = None, benefit_label: str = "log_benefit",
                   step: float = 1e-4, grid: QuadratureRule | None = None, h1_tol: float = 1e-8) -> float:
    """Attention-stage ratio from the difference of start and stay derivatives over matched pairs."""
    if omega not in params.spec.attention:
        raise ValidationError(f"{omega!r} is not an attention covariate")
    if pairs is None:
        if tau != 2:
            raise ValidationError("the canonical coherent-shuffle pair pivots at month 2")
        pairs = [coherent_shuffle_pair(_require(x))]
    for p in pairs:
        if p.start.pivot_period != tau or p.stay.pivot_period != tau:
            raise ValidationError("pair pivot periods differ from tau")
        r = h1_residual(params, p)
        if r > h1_tol:
            raise ConstructionError(f"pair violates the equal conditional probability check (gap {r:.3g})")

    def diff(label):
        return np.mean([
            fod(params, p.start.with_pivot(label), step, grid).value
            - fod(params, p.stay.with_pivot(label), step, grid).value
            for p in pairs
        ])

    num, den = diff(omega), diff(benefit_label)
    if abs(den) < 1e-12:
        raise DegenerateFamilyError(f"benefit derivative difference is {den:.3g}")
    return float(num / den)


# ---------------------------------------------------------------------------
# factorization without random effects
# ---------------------------------------------------------------------------

def verify_lemma1(params: ParameterSet, cells: Sequence[Mapping[str, float]], n_draws: int | None = None,
                  seed: int = 0, grid: QuadratureRule | None = None) -> float:
    """Largest gap between the start probability and the product of stage probabilities at ``q = 0``.

    The start probability is exact (integrated over the random effect) or,
    with ``n_draws``, an empirical frequency from two-stage sampling.  With
    zero random-effect scales the gap is zero up to sampling noise.
    """
    grid = dense_grid() if grid is None else grid
    rng = np.random.default_rng(seed)
    worst = 0.0
    for x in cells:
        a, c = _indices(params, x, 1)
        product = float(special.ndtr(a) * special.ndtr(c))
        if n_draws is None:
            p = float((special.ndtr(a + params.sigma1 * grid.nodes) * special.ndtr(c + params.sigma2 * grid.nodes))
                      @ grid.weights)
        else:
            q = rng.standard_normal(n_draws)
            att = rng.random(n_draws) < special.ndtr(a + params.sigma1 * q)
            cho = rng.random(n_draws) < special.ndtr(c + params.sigma2 * q)
            p = float(np.mean(att & cho))
        worst = max(worst, abs(p - product))
    return worst


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RatioCheck:
    theorem: str
    omega: str
    true_ratio: float
    estimated_ratio: float

    @property
    def abs_error(self) -> float:
        return abs(self.true_ratio - self.estimated_ratio)


def true_ratio(params: ParameterSet, theorem: int, omega: str, benefit_label: str = "log_benefit") -> float:
    if theorem == 3:
        g_w, _ = stage_coefficients(params, omega, 1)
        g_b, _ = stage_coefficients(params, benefit_label, 1)
        return g_w / g_b
    s = 0 if theorem == 1 else 1
    return stage_coefficients(params, omega, s)[1] / stage_coefficients(params, benefit_label, s)[1]


def identification_report(params: ParameterSet, x: Mapping[str, float], theorems: Sequence[int] = (1, 2, 3),
                          tau: int = 2, benefit_label: str = "log_benefit") -> tuple[list[RatioCheck], float]:
    """Ratio checks for every covariate of the relevant partitions, plus the matched-pair gap."""
    spec = params.spec
    checks = []
    for th in theorems:
        if th == 1:
            labels = list(dict.fromkeys(spec.benefit + spec.usage))
            fn = theorem1_ratio
        elif th == 2:
            labels = list(spec.hassle)
            fn = theorem2_ratio
        elif th == 3:
            labels = list(spec.attention)
            fn = theorem3_ratio
        else:
            raise ValidationError(f"unknown theorem {th}")
        for lab in labels:
            est = fn(params, tau, lab, x=x, benefit_label=benefit_label)
            checks.append(RatioCheck(f"theorem{th}", lab, true_ratio(params, th, lab, benefit_label), est))
    gap = h1_residual(params, coherent_shuffle_pair(x))
    return checks, gap


def write_report_csv(path: Path, checks: Sequence[RatioCheck], h1_gap: float | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theorem", "omega", "true_ratio", "estimated_ratio", "abs_error"])
        for c in checks:
            w.writerow([c.theorem, c.omega, f"{c.true_ratio:.10g}", f"{c.estimated_ratio:.10g}", f"{c.abs_error:.3e}"])
        if h1_gap is not None:
            w.writerow(["h1_check", "coherent_shuffle", "0", f"{h1_gap:.3e}", f"{h1_gap:.3e}"])
