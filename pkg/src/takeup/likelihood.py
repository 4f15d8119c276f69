"""Random-effects sequence likelihood, maximum likelihood fitting and the two-step estimator."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import optimize, special

from . import kernels
from .model import (
    CovariateSpec,
    HouseholdHistory,
    PanelDataset,
    ParameterSet,
    ValidationError,
    hassle_indicator,
    norm_cdf,
    transition_prob,
)
from .quadrature import QuadratureRule, gauss_hermite

log = logging.getLogger(__name__)


class LikelihoodError(RuntimeError):
    """Numerical failure of the likelihood (underflow, non-finite values)."""


class HessianError(LikelihoodError):
    """The numerical Hessian is not negative definite."""

    def __init__(self, message: str, eigenvalue: float):
        super().__init__(message)
        self.eigenvalue = eigenvalue


# ---------------------------------------------------------------------------
# packed representation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PackedPanel:
    """Column-major design arrays for all household-months of a dataset.

    Built once per dataset; evaluating the indices for a new parameter
    vector is a handful of matrix-vector products.
    """

    spec: CovariateSpec
    ids: tuple[str, ...]
    starts: np.ndarray
    x_attention: np.ndarray
    x_benefit: np.ndarray
    x_hassle: np.ndarray
    x_usage: np.ndarray
    hassle: np.ndarray
    dprev: np.ndarray
    d: np.ndarray

    @classmethod
    def from_dataset(cls, data: PanelDataset) -> "PackedPanel":
        spec = data.spec
        obs = [o for h in data.households for o in h.observations]
        if any(len(h) == 0 for h in data.households):
            empty = next(h.id for h in data.households if len(h) == 0)
            raise ValidationError(f"household {empty} has an empty history")
        lengths = np.array([len(h) for h in data.households], dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)

        def mat(labels):
            return np.array([[o.covariates[lab] for lab in labels] for o in obs], dtype=float).reshape(
                len(obs), len(labels)
            )

        dprev = np.array([dp for h in data.households for dp in h.previous_decisions()], dtype=np.int8)
        d = np.array([o.decision for o in obs], dtype=np.int8)
        z = np.array([o.recert_required for o in obs], dtype=np.int8)
        s = np.maximum(1 - dprev, dprev * z).astype(float)
        return cls(
            spec=spec,
            ids=tuple(h.id for h in data.households),
            starts=starts,
            x_attention=mat(spec.attention),
            x_benefit=mat(spec.benefit),
            x_hassle=mat(spec.hassle),
            x_usage=mat(spec.usage),
            hassle=s,
            dprev=dprev,
            d=d,
        )

    @property
    def n_households(self) -> int:
        return self.starts.size - 1

    def indices(self, params: ParameterSet) -> tuple[np.ndarray, np.ndarray]:
        ua = self.x_attention @ np.asarray(params.gamma)
        uc = self.x_benefit @ np.asarray(params.beta_benefit) + self.hassle * (
            self.x_hassle @ np.asarray(params.beta_hassle)
        )
        if self.x_usage.shape[1]:
            uc = uc + self.x_usage @ np.asarray(params.beta_usage)
        return np.ascontiguousarray(ua), np.ascontiguousarray(uc)

    def household_loglik(self, params: ParameterSet, rule: QuadratureRule, backend=None) -> np.ndarray:
        ua, uc = self.indices(params)
        impl = kernels.get_backend(backend)
        return impl.household_loglik(
            ua, uc, self.dprev, self.d, self.starts,
            np.ascontiguousarray(rule.nodes), np.ascontiguousarray(rule.log_weights),
            params.sigma1, params.sigma2,
        )

    def loglik_and_gradient(self, params: ParameterSet, rule: QuadratureRule, backend=None):
        """Total log-likelihood and its gradient in the ``ParameterSet.to_vector`` layout."""
        ua, uc = self.indices(params)
        impl = kernels.get_backend(backend)
        ll, ga, gc, gs1, gs2 = impl.household_loglik_grad(
            ua, uc, self.dprev, self.d, self.starts,
            np.ascontiguousarray(rule.nodes), np.ascontiguousarray(rule.log_weights),
            params.sigma1, params.sigma2,
        )
        total = _checked_sum(ll, self.ids)
        grad = np.concatenate([
            self.x_attention.T @ ga,
            self.x_benefit.T @ gc,
            self.x_hassle.T @ (self.hassle * gc),
            self.x_usage.T @ gc,
            [params.sigma1 * gs1, params.sigma2 * gs2],
        ])
        return total, grad

    def household_log_cpl(self, params: ParameterSet, nodes: np.ndarray, backend=None) -> np.ndarray:
        ua, uc = self.indices(params)
        impl = kernels.get_backend(backend)
        return impl.household_log_cpl(
            ua, uc, self.dprev, self.d, self.starts, np.ascontiguousarray(nodes, dtype=float),
            params.sigma1, params.sigma2,
        )


def _single(spec: CovariateSpec, h: HouseholdHistory) -> PackedPanel:
    return PackedPanel.from_dataset(PanelDataset(spec, (h,)))


# ---------------------------------------------------------------------------
# sequence likelihoods
# ---------------------------------------------------------------------------

def conditional_sequence_likelihood(params: ParameterSet, h: HouseholdHistory, q: float) -> float:
    """Product over months of the transition probabilities given the random effect ``q``."""
    if len(h) == 0:
        raise ValidationError(f"household {h.id} has an empty history")
    p = 1.0
    d_prev = h.initial_decision
    for obs in h.observations:
        p *= transition_prob(params, obs.covariates, d_prev, obs.recert_required, obs.decision, q)
        d_prev = obs.decision
    return p


def marginal_sequence_likelihood(params: ParameterSet, h: HouseholdHistory, rule: QuadratureRule) -> float:
    if rule.order < 1:
        raise ValidationError("quadrature order must be >= 1")
    return float(np.exp(_single(params.spec, h).household_loglik(params, rule)[0]))


def closed_form_marginal_attention(c: float, sigma: float) -> float:
    """``E[Phi(c + sigma Q)]`` for ``Q ~ N(0, 1)``, which equals ``Phi(c / sqrt(1 + sigma^2))``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    return norm_cdf(c / math.sqrt(1.0 + sigma * sigma))


def _checked_sum(values: np.ndarray, ids: Sequence[str]) -> float:
    bad = ~np.isfinite(values)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise LikelihoodError(
            f"household {ids[i]!r} has zero likelihood after quadrature "
            f"(log value {values[i]}); parameters are numerically infeasible"
        )
    # fsum is correctly rounded, so the total does not depend on household order
    return math.fsum(values.tolist())


def panel_loglik(params: ParameterSet, data: PanelDataset | PackedPanel, rule: QuadratureRule) -> float:
    packed = data if isinstance(data, PackedPanel) else PackedPanel.from_dataset(data)
    if packed.n_households == 0:
        raise ValidationError("dataset is empty")
    return _checked_sum(packed.household_loglik(params, rule), packed.ids)


# ---------------------------------------------------------------------------
# numerical derivatives
# ---------------------------------------------------------------------------

def _steps(theta: np.ndarray, rel: float) -> np.ndarray:
    return rel * np.maximum(1.0, np.abs(theta))


def numerical_gradient(f: Callable[[np.ndarray], float], theta, rel_step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient."""
    theta = np.asarray(theta, dtype=float)
    h = _steps(theta, rel_step)
    g = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h[i]
        g[i] = (f(theta + e) - f(theta - e)) / (2.0 * h[i])
    return g


def numerical_hessian(f: Callable[[np.ndarray], float], theta, rel_step: float = 1e-4) -> np.ndarray:
    """Second-order central finite-difference Hessian (symmetric by construction)."""
    theta = np.asarray(theta, dtype=float)
    n = theta.size
    h = _steps(theta, rel_step)
    f0 = f(theta)
    H = np.empty((n, n))
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h[i]
        H[i, i] = (f(theta + ei) - 2.0 * f0 + f(theta - ei)) / (h[i] * h[i])
        for j in range(i):
            ej = np.zeros(n)
            ej[j] = h[j]
            v = (
                f(theta + ei + ej) - f(theta + ei - ej) - f(theta - ei + ej) + f(theta - ei - ej)
            ) / (4.0 * h[i] * h[j])
            H[i, j] = H[j, i] = v
    return H


def jacobian_hessian(grad: Callable[[np.ndarray], np.ndarray], theta, rel_step: float = 1e-4) -> np.ndarray:
    """Hessian as the central-difference Jacobian of an exact gradient, symmetrized."""
    theta = np.asarray(theta, dtype=float)
    h = _steps(theta, rel_step)
    cols = []
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h[i]
        cols.append((grad(theta + e) - grad(theta - e)) / (2.0 * h[i]))
    J = np.column_stack(cols)
    return 0.5 * (J + J.T)


def standard_errors_from_hessian(H: np.ndarray) -> np.ndarray:
    """Square roots of the diagonal of ``(-H)^-1``; ``H`` must be negative definite."""
    eig = np.linalg.eigvalsh(H)
    if eig.max() >= 0:
        raise HessianError(
            f"Hessian is not negative definite (largest eigenvalue {eig.max():.6g})", float(eig.max())
        )
    cov = np.linalg.inv(-H)
    return np.sqrt(np.diag(cov))


def standard_errors(
    params: ParameterSet, data: PanelDataset | PackedPanel, rule: QuadratureRule, rel_step: float = 1e-4
) -> dict[str, float]:
    packed = data if isinstance(data, PackedPanel) else PackedPanel.from_dataset(data)
    spec = params.spec

    def grad(theta):
        return packed.loglik_and_gradient(ParameterSet.from_vector(spec, theta), rule)[1]

    H = jacobian_hessian(grad, params.to_vector(), rel_step)
    se = standard_errors_from_hessian(H)
    return dict(zip(spec.coefficient_names(), se.tolist()))


# ---------------------------------------------------------------------------
# maximum likelihood
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitConfig:
    quadrature_order: int = 30
    max_iterations: int = 500
    loglik_tolerance: float = 1e-8
    gradient_step: float = 1e-5
    hessian_step: float = 1e-4
    gradient: str = "analytic"
    start: ParameterSet | None = None

    def __post_init__(self):
        if self.gradient not in ("analytic", "numeric"):
            raise ValidationError("gradient must be 'analytic' or 'numeric'")
        if self.quadrature_order < 1:
            raise ValidationError("quadrature_order must be >= 1")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")
        for name in ("loglik_tolerance", "gradient_step", "hessian_step"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be strictly positive")


@dataclass
class FitResult:
    params: ParameterSet
    loglik: float
    standard_errors: dict[str, float]
    converged: bool
    iterations: int
    hessian_condition: float
    n_households: int = 0
    n_obs: int = 0
    message: str = ""
    history: list[float] = field(default_factory=list)

    def table(self) -> list[tuple[str, float, float]]:
        return [
            (name, value, self.standard_errors.get(name, float("nan")))
            for name, value in self.params.coefficients().items()
        ]

    def to_dict(self) -> dict:
        return {
            "spec": self.params.spec.to_dict(),
            "coefficients": {n: {"estimate": v, "se": s} for n, v, s in self.table()},
            "loglik": self.loglik,
            "converged": self.converged,
            "iterations": self.iterations,
            "hessian_condition": self.hessian_condition,
            "n_households": self.n_households,
            "n_obs": self.n_obs,
            "message": self.message,
        }


class FitError(LikelihoodError):
    pass


def _transition_counts(packed: PackedPanel) -> tuple[int, int]:
    starts = int(np.sum((packed.dprev == 0) & (packed.d == 1)))
    stays = int(np.sum((packed.dprev == 1) & (packed.d == 1)))
    return starts, stays


def default_start(data: PanelDataset | PackedPanel) -> ParameterSet:
    """Choice coefficients from the stay-sample probit, attention intercept from the raw start rate."""
    packed = data if isinstance(data, PackedPanel) else PackedPanel.from_dataset(data)
    spec = packed.spec
    try:
        prelim = _stay_probit(packed)
        bu, bk, bc = prelim.beta_benefit, prelim.beta_hassle, prelim.beta_usage
    except (ValidationError, np.linalg.LinAlgError):
        bu = (0.0,) * len(spec.benefit)
        bk = (0.0,) * len(spec.hassle)
        bc = (0.0,) * len(spec.usage)
    at_risk = packed.dprev == 0
    rate = float(packed.d[at_risk].mean()) if at_risk.any() else 0.5
    rate = min(max(rate, 1e-4), 1 - 1e-4)
    gamma = [0.0] * len(spec.attention)
    gamma[0] = float(special.ndtri(rate))
    return ParameterSet(spec, gamma, bu, bk, bc, 0.0, 0.0)


def fit_mle(data: PanelDataset | PackedPanel, config: FitConfig = FitConfig()) -> FitResult:
    """Maximize the quadrature-marginalized panel log-likelihood.

    Quasi-Newton (L-BFGS-B) ascent over ``(gamma, beta, log sigma1, log sigma2)``.
    Gradients are exact (posterior-weighted over the quadrature nodes) by
    default or central finite differences with ``gradient="numeric"``.
    Convergence is declared when the relative log-likelihood improvement
    falls below ``config.loglik_tolerance``.  Standard errors come from a
    finite-difference Hessian.
    """
    packed = data if isinstance(data, PackedPanel) else PackedPanel.from_dataset(data)
    if packed.n_households == 0:
        raise ValidationError("dataset is empty")
    n_start, n_stay = _transition_counts(packed)
    if n_start == 0 or n_stay == 0:
        warnings.warn(
            "data lack 0->1 or 1->1 transitions; attention and choice are not separately identified",
            RuntimeWarning,
            stacklevel=2,
        )
    spec = packed.spec
    rule = gauss_hermite(config.quadrature_order)
    start = config.start if config.start is not None else default_start(packed)
    theta0 = start.to_vector()

    def loglik(theta):
        ll = packed.household_loglik(ParameterSet.from_vector(spec, theta), rule)
        if not np.all(np.isfinite(ll)):
            return -np.inf
        return math.fsum(ll.tolist())

    ll0 = loglik(theta0)
    if not np.isfinite(ll0):
        raise FitError("log-likelihood is not finite at the starting values; supply a feasible start")

    scale = 1.0 / packed.n_households
    history = [ll0]
    # the objective is clipped so a non-finite trial point reads as very bad instead of aborting the line search
    big = abs(ll0) * 1e3 + 1e6

    def objective(theta):
        ll = loglik(theta)
        return -ll * scale if np.isfinite(ll) else big * scale

    def analytic(theta):
        try:
            _, g = packed.loglik_and_gradient(ParameterSet.from_vector(spec, theta), rule)
        except LikelihoodError:
            return np.zeros_like(theta)
        return g

    if config.gradient == "analytic":
        def fun(theta):
            try:
                ll, g = packed.loglik_and_gradient(ParameterSet.from_vector(spec, theta), rule)
            except LikelihoodError:
                return big * scale, np.zeros_like(theta)
            return -ll * scale, -g * scale
    else:
        def fun(theta):
            return objective(theta), numerical_gradient(objective, theta, config.gradient_step)

    def callback(intermediate_result):
        history.append(-intermediate_result.fun / scale)

    res = optimize.minimize(
        fun,
        theta0,
        jac=True,
        method="L-BFGS-B",
        callback=callback,
        options={
            "maxiter": config.max_iterations,
            "ftol": config.loglik_tolerance,
            "gtol": 1e-9,
            "maxcor": 20,
        },
    )
    theta = res.x
    params = ParameterSet.from_vector(spec, theta)
    ll = loglik(theta)
    converged = bool(res.success) and res.nit < config.max_iterations
    message = str(res.message)

    try:
        if config.gradient == "analytic":
            H = jacobian_hessian(analytic, theta, config.hessian_step)
        else:
            H = numerical_hessian(loglik, theta, config.hessian_step)
        eig = np.linalg.eigvalsh(H)
        cond = float(abs(eig).max() / abs(eig).min()) if abs(eig).min() > 0 else float("inf")
        se = standard_errors_from_hessian(H)
        ses = dict(zip(spec.coefficient_names(), se.tolist()))
    except HessianError as exc:
        cond = float("inf")
        ses = {n: float("nan") for n in spec.coefficient_names()}
        message += f"; {exc}"
        warnings.warn(str(exc), RuntimeWarning, stacklevel=2)

    return FitResult(
        params=params,
        loglik=ll,
        standard_errors=ses,
        converged=converged,
        iterations=int(res.nit),
        hessian_condition=cond,
        n_households=packed.n_households,
        n_obs=int(packed.d.size),
        message=message,
        history=history,
    )


# ---------------------------------------------------------------------------
# two-step preliminary estimator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StayProbit:
    beta_benefit: tuple[float, ...]
    beta_hassle: tuple[float, ...]
    beta_usage: tuple[float, ...]
    standard_errors: tuple[float, ...]
    loglik: float
    n_obs: int


@dataclass(frozen=True)
class AttentionCell:
    covariates: tuple[tuple[str, float], ...]
    n: int
    start_rate: float
    choice_prob: float
    attention_prob: float
    clipped: bool


@dataclass(frozen=True)
class PreliminaryResult:
    choice: StayProbit
    cells: tuple[AttentionCell, ...]

    def params(self, spec: CovariateSpec) -> ParameterSet:
        """Choice coefficients as a ParameterSet with zero random-effect scale and zero gamma."""
        return ParameterSet(
            spec, (0.0,) * len(spec.attention), self.choice.beta_benefit,
            self.choice.beta_hassle, self.choice.beta_usage, -math.inf, -math.inf,
        )


def _probit_fit(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Probit MLE by Newton steps with analytic gradient and Hessian."""
    sign = 2.0 * y - 1.0

    def parts(b):
        xb = X @ b
        lcdf = special.log_ndtr(sign * xb)
        lam = sign * np.exp(-0.5 * xb * xb - 0.5 * math.log(2 * math.pi) - lcdf)  # d logPhi / d xb
        return xb, lcdf, lam

    b = np.zeros(X.shape[1])
    ll_old = -np.inf
    for _ in range(100):
        xb, lcdf, lam = parts(b)
        ll = lcdf.sum()
        grad = X.T @ lam
        w = lam * (lam + xb)
        H = -(X * w[:, None]).T @ X
        step = np.linalg.solve(H, grad)
        t = 1.0
        while True:
            b_new = b - t * step
            ll_new = special.log_ndtr(sign * (X @ b_new)).sum()
            if ll_new >= ll - 1e-12 or t < 1e-8:
                break
            t *= 0.5
        b = b_new
        if abs(ll_new - ll_old) < 1e-12 * (1 + abs(ll_new)):
            break
        ll_old = ll_new
    xb, lcdf, lam = parts(b)
    w = lam * (lam + xb)
    H = -(X * w[:, None]).T @ X
    se = np.sqrt(np.diag(np.linalg.inv(-H)))
    return b, se, float(lcdf.sum())


def _stay_probit(packed: PackedPanel) -> StayProbit:
    rows = packed.dprev == 1
    if not rows.any():
        raise ValidationError("no household-months with a lagged participation; stay subsample is empty")
    s = packed.hassle[rows][:, None]
    X = np.hstack([packed.x_benefit[rows], s * packed.x_hassle[rows], packed.x_usage[rows]])
    y = packed.d[rows].astype(float)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise ValidationError(
            "stay-subsample design is rank deficient (check recertification variation and label overlap)"
        )
    b, se, ll = _probit_fit(X, y)
    nb, nk = packed.x_benefit.shape[1], packed.x_hassle.shape[1]
    return StayProbit(
        beta_benefit=tuple(b[:nb]), beta_hassle=tuple(b[nb:nb + nk]), beta_usage=tuple(b[nb + nk:]),
        standard_errors=tuple(se), loglik=ll, n_obs=int(rows.sum()),
    )


def fit_preliminary(data: PanelDataset | PackedPanel) -> PreliminaryResult:
    """Two-step estimator of the model without random effects.

    Stage 1 fits the choice coefficients by probit on months that follow a
    participation month (attention is certain there).  Stage 2 recovers the
    attention probability of each covariate cell among non-participants as
    the observed start rate divided by the fitted sign-up choice probability.
    """
    packed = data if isinstance(data, PackedPanel) else PackedPanel.from_dataset(data)
    if not (packed.dprev == 0).any():
        raise ValidationError("no household-months at risk of starting")
    choice = _stay_probit(packed)
    spec = packed.spec
    beta = ParameterSet(spec, (0.0,) * len(spec.attention), choice.beta_benefit, choice.beta_hassle,
                        choice.beta_usage, 0.0, 0.0)

    rows = np.flatnonzero(packed.dprev == 0)
    _, uc = packed.indices(beta)
    labels = spec.labels
    lab_cols = _label_matrix(packed, labels)[rows]
    keys, inverse = np.unique(lab_cols, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    cells = []
    for k in range(keys.shape[0]):
        member = rows[inverse == k]
        start_rate = float(packed.d[member].mean())
        pc = float(special.ndtr(uc[member[0]]))
        ratio = start_rate / pc
        cells.append(
            AttentionCell(
                covariates=tuple(zip(labels, keys[k].tolist())),
                n=int(member.size),
                start_rate=start_rate,
                choice_prob=pc,
                attention_prob=float(min(ratio, 1.0)) if ratio > 0 else 0.0,
                clipped=bool(ratio > 1.0),
            )
        )
    if any(c.clipped for c in cells):
        log.warning("%d attention cells had start/choice ratio above 1 and were clipped",
                    sum(c.clipped for c in cells))
    return PreliminaryResult(choice, tuple(cells))


def _label_matrix(packed: PackedPanel, labels: Sequence[str]) -> np.ndarray:
    spec = packed.spec
    cols = []
    for lab in labels:
        for part, mat in (
            (spec.attention, packed.x_attention),
            (spec.benefit, packed.x_benefit),
            (spec.hassle, packed.x_hassle),
            (spec.usage, packed.x_usage),
        ):
            if lab in part:
                cols.append(mat[:, part.index(lab)])
                break
    return np.column_stack(cols)


def coefficient_table(result: FitResult) -> list[Mapping[str, float]]:
    return [{"name": n, "estimate": v, "se": s} for n, v, s in result.table()]


def hassle_for(d_prev: int, z: int) -> int:
    return hassle_indicator(d_prev, z)
