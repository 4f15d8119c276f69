"""Structural data model and single-period probabilities of the attention/choice model.

A household that did not participate last month must first pay attention
(probability ``Phi(X gamma + sigma1 q)``) and then choose to enroll
(probability ``Phi(U_c)``).  A household that participated last month is
attentive for sure.  The choice index is

    U_c = X_benefit beta_benefit + S * X_hassle beta_hassle + X_usage beta_usage + sigma2 q

where ``S`` is the hassle indicator: sign-up always costs hassle,
staying costs hassle only in recertification months.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import special

RECERT_AGES = frozenset({1, 13, 25, 37})

_SQRT2 = math.sqrt(2.0)


class ValidationError(ValueError):
    """Raised when data do not satisfy a covariate spec or a model invariant."""


# ---------------------------------------------------------------------------
# normal distribution helpers
# ---------------------------------------------------------------------------

def norm_cdf(x: float) -> float:
    """Standard normal CDF through ``erfc``; relative error near machine epsilon in both tails."""
    return 0.5 * math.erfc(-x / _SQRT2)


def norm_pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def norm_cdf_vec(x):
    return special.ndtr(x)


def log_norm_cdf_vec(x):
    return special.log_ndtr(x)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CovariateSpec:
    """Ordered covariate labels for the attention stage and the three choice partitions.

    The first label of ``attention``, ``benefit`` and ``hassle`` is an
    intercept (value fixed at 1).  A label may appear in several lists.
    """

    attention: tuple[str, ...]
    benefit: tuple[str, ...]
    hassle: tuple[str, ...]
    usage: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("attention", "benefit", "hassle", "usage"):
            labels = tuple(getattr(self, name))
            object.__setattr__(self, name, labels)
            if len(set(labels)) != len(labels):
                raise ValidationError(f"duplicate label in {name} partition: {labels}")
        for name in ("attention", "benefit", "hassle"):
            if not getattr(self, name):
                raise ValidationError(f"{name} partition needs at least an intercept label")

    @property
    def intercepts(self) -> frozenset[str]:
        return frozenset({self.attention[0], self.benefit[0], self.hassle[0]})

    @property
    def labels(self) -> tuple[str, ...]:
        """All distinct labels, in first-appearance order."""
        seen: dict[str, None] = {}
        for lab in self.attention + self.benefit + self.hassle + self.usage:
            seen.setdefault(lab, None)
        return tuple(seen)

    def coefficient_names(self) -> list[str]:
        return (
            [f"attention:{lab}" for lab in self.attention]
            + [f"benefit:{lab}" for lab in self.benefit]
            + [f"hassle:{lab}" for lab in self.hassle]
            + [f"usage:{lab}" for lab in self.usage]
            + ["log_sigma1", "log_sigma2"]
        )

    def to_dict(self) -> dict:
        return {
            "attention": list(self.attention),
            "benefit": list(self.benefit),
            "hassle": list(self.hassle),
            "usage": list(self.usage),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CovariateSpec":
        missing = {"attention", "benefit", "hassle"} - set(d)
        if missing:
            raise ValidationError(f"covariate spec is missing keys: {sorted(missing)}")
        return cls(
            attention=tuple(d["attention"]),
            benefit=tuple(d["benefit"]),
            hassle=tuple(d["hassle"]),
            usage=tuple(d.get("usage", ())),
        )


class Covariates(Mapping[str, float]):
    """Immutable label -> value map for one household-month."""

    __slots__ = ("_values",)

    def __init__(self, values: Mapping[str, float] | Iterable[tuple[str, float]] = ()):
        self._values = MappingProxyType({str(k): float(v) for k, v in dict(values).items()})

    def __getitem__(self, key):
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def __repr__(self):
        return f"Covariates({dict(self._values)!r})"

    def __eq__(self, other):
        if isinstance(other, Mapping):
            return dict(self._values) == dict(other)
        return NotImplemented

    def __hash__(self):
        return hash(tuple(sorted(self._values.items())))

    def replace(self, **updates: float) -> "Covariates":
        new = dict(self._values)
        new.update(updates)
        return Covariates(new)

    def validate(self, spec: CovariateSpec) -> None:
        missing = [lab for lab in spec.labels if lab not in self._values]
        if missing:
            raise ValidationError(f"covariates missing labels {missing}")
        for lab in spec.intercepts:
            if self._values[lab] != 1.0:
                raise ValidationError(f"intercept {lab!r} must equal 1, got {self._values[lab]}")


@dataclass(frozen=True)
class Observation:
    period: int
    covariates: Covariates
    recert_required: int
    decision: int
    youngest_age_months: int | None = None

    def __post_init__(self):
        if self.recert_required not in (0, 1):
            raise ValidationError(f"recert_required must be 0/1, got {self.recert_required}")
        if self.decision not in (0, 1):
            raise ValidationError(f"decision must be 0/1, got {self.decision}")
        if self.period < 1:
            raise ValidationError(f"period must be >= 1, got {self.period}")
        if self.youngest_age_months is not None and self.youngest_age_months < -9:
            raise ValidationError(f"youngest_age_months must be >= -9, got {self.youngest_age_months}")
        if not isinstance(self.covariates, Covariates):
            object.__setattr__(self, "covariates", Covariates(self.covariates))


@dataclass(frozen=True)
class HouseholdHistory:
    id: str
    observations: tuple[Observation, ...]
    initial_decision: int = 0

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))
        if self.initial_decision != 0:
            raise ValidationError("initial_decision is fixed to 0")
        for t, obs in enumerate(self.observations, start=1):
            if obs.period != t:
                raise ValidationError(
                    f"household {self.id}: periods must run 1..T consecutively (got {obs.period} at position {t})"
                )

    def __len__(self):
        return len(self.observations)

    @property
    def decisions(self) -> tuple[int, ...]:
        return tuple(o.decision for o in self.observations)

    def previous_decisions(self) -> tuple[int, ...]:
        return (self.initial_decision,) + self.decisions[:-1]

    def validate(self, spec: CovariateSpec) -> None:
        for obs in self.observations:
            try:
                obs.covariates.validate(spec)
            except ValidationError as exc:
                raise ValidationError(f"household {self.id} period {obs.period}: {exc}") from None


@dataclass(frozen=True)
class PanelDataset:
    spec: CovariateSpec
    households: tuple[HouseholdHistory, ...]

    def __post_init__(self):
        object.__setattr__(self, "households", tuple(self.households))
        ids = [h.id for h in self.households]
        if len(set(ids)) != len(ids):
            raise ValidationError("household ids must be unique")
        for h in self.households:
            h.validate(self.spec)

    def __len__(self):
        return len(self.households)

    @property
    def n_obs(self) -> int:
        return sum(len(h) for h in self.households)


@dataclass(frozen=True)
class ParameterSet:
    """Structural coefficients aligned to a :class:`CovariateSpec`."""

    spec: CovariateSpec
    gamma: tuple[float, ...]
    beta_benefit: tuple[float, ...]
    beta_hassle: tuple[float, ...]
    beta_usage: tuple[float, ...] = ()
    log_sigma1: float = 0.0
    log_sigma2: float = 0.0

    def __post_init__(self):
        for name, labels in (
            ("gamma", self.spec.attention),
            ("beta_benefit", self.spec.benefit),
            ("beta_hassle", self.spec.hassle),
            ("beta_usage", self.spec.usage),
        ):
            vals = tuple(float(v) for v in getattr(self, name))
            if len(vals) != len(labels):
                raise ValidationError(f"{name} has {len(vals)} entries, spec lists {len(labels)}")
            object.__setattr__(self, name, vals)
        object.__setattr__(self, "log_sigma1", float(self.log_sigma1))
        object.__setattr__(self, "log_sigma2", float(self.log_sigma2))

    @property
    def sigma1(self) -> float:
        return math.exp(self.log_sigma1)

    @property
    def sigma2(self) -> float:
        return math.exp(self.log_sigma2)

    def to_vector(self) -> np.ndarray:
        return np.array(
            self.gamma + self.beta_benefit + self.beta_hassle + self.beta_usage
            + (self.log_sigma1, self.log_sigma2)
        )

    @classmethod
    def from_vector(cls, spec: CovariateSpec, theta: Sequence[float]) -> "ParameterSet":
        theta = [float(v) for v in theta]
        sizes = [len(spec.attention), len(spec.benefit), len(spec.hassle), len(spec.usage)]
        if len(theta) != sum(sizes) + 2:
            raise ValidationError(f"expected {sum(sizes) + 2} parameters, got {len(theta)}")
        parts, i = [], 0
        for n in sizes:
            parts.append(tuple(theta[i:i + n]))
            i += n
        return cls(spec, *parts, log_sigma1=theta[-2], log_sigma2=theta[-1])

    def coefficients(self) -> dict[str, float]:
        return dict(zip(self.spec.coefficient_names(), self.to_vector().tolist()))

    @classmethod
    def from_coefficients(cls, spec: CovariateSpec, coefs: Mapping[str, float]) -> "ParameterSet":
        names = spec.coefficient_names()
        missing = [n for n in names if n not in coefs]
        if missing:
            raise ValidationError(f"missing coefficients {missing}")
        return cls.from_vector(spec, [coefs[n] for n in names])

    def replace(self, **changes) -> "ParameterSet":
        fields_ = dict(
            spec=self.spec, gamma=self.gamma, beta_benefit=self.beta_benefit,
            beta_hassle=self.beta_hassle, beta_usage=self.beta_usage,
            log_sigma1=self.log_sigma1, log_sigma2=self.log_sigma2,
        )
        fields_.update(changes)
        return ParameterSet(**fields_)

    def with_sigmas(self, sigma1: float, sigma2: float) -> "ParameterSet":
        """Copy with the given random-effect scales; a scale of 0 maps to log-scale -inf."""
        ls1 = math.log(sigma1) if sigma1 > 0 else -math.inf
        ls2 = math.log(sigma2) if sigma2 > 0 else -math.inf
        return self.replace(log_sigma1=ls1, log_sigma2=ls2)

    def coefficient_on(self, label: str) -> dict[str, float]:
        """Coefficient attached to ``label`` in each partition (0 when absent)."""
        out = {}
        for part, labels, vals in (
            ("attention", self.spec.attention, self.gamma),
            ("benefit", self.spec.benefit, self.beta_benefit),
            ("hassle", self.spec.hassle, self.beta_hassle),
            ("usage", self.spec.usage, self.beta_usage),
        ):
            out[part] = vals[labels.index(label)] if label in labels else 0.0
        return out


# ---------------------------------------------------------------------------
# single-period primitives
# ---------------------------------------------------------------------------

def hassle_indicator(d_prev: int, z: int) -> int:
    return max(1 - d_prev, d_prev * z)


def recertification_flag(youngest_age_months: int, d_prev: int) -> int:
    return int(d_prev == 1 and youngest_age_months in RECERT_AGES)


def _dot(labels: Sequence[str], coefs: Sequence[float], x: Mapping[str, float]) -> float:
    try:
        return math.fsum(c * x[lab] for lab, c in zip(labels, coefs))
    except KeyError as exc:
        raise ValidationError(f"covariate {exc.args[0]!r} missing") from None


def attention_utility(params: ParameterSet, x: Mapping[str, float], q: float) -> float:
    return _dot(params.spec.attention, params.gamma, x) + params.sigma1 * q


def choice_utility(params: ParameterSet, x: Mapping[str, float], s: int, q: float) -> float:
    spec = params.spec
    u = _dot(spec.benefit, params.beta_benefit, x) + _dot(spec.usage, params.beta_usage, x)
    if s:
        u += _dot(spec.hassle, params.beta_hassle, x)
    return u + params.sigma2 * q


def attention_prob(params: ParameterSet, x: Mapping[str, float], d_prev: int, q: float) -> float:
    if d_prev == 1:
        return 1.0
    return norm_cdf(attention_utility(params, x, q))


def choice_prob(params: ParameterSet, x: Mapping[str, float], d_prev: int, z: int, q: float) -> float:
    return norm_cdf(choice_utility(params, x, hassle_indicator(d_prev, z), q))


def transition_prob(
    params: ParameterSet, x: Mapping[str, float], d_prev: int, z: int, d_next: int, q: float
) -> float:
    """P(D_t = d_next | D_{t-1} = d_prev, x, z, q).

    The non-participation branch is computed as ``Phi(-a) + Phi(a) Phi(-c)``
    rather than ``1 - Phi(a) Phi(c)`` so it keeps full relative precision.
    """
    uc = choice_utility(params, x, hassle_indicator(d_prev, z), q)
    if d_prev == 1:
        return norm_cdf(uc) if d_next == 1 else norm_cdf(-uc)
    ua = attention_utility(params, x, q)
    if d_next == 1:
        return norm_cdf(ua) * norm_cdf(uc)
    return norm_cdf(-ua) + norm_cdf(ua) * norm_cdf(-uc)
