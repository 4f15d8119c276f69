"""Synthetic household panels drawn from the attention/choice model.

Households are independent.  Each one gets its own random substream derived
from ``(seed, household index)``, so a household's draws do not depend on how
many other households are simulated or in which order.  The draws are kept
(``Latents``) and the decision rule only compares them against probabilities,
which is what lets counterfactual policies share common random numbers.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy import special

from .model import (
    RECERT_AGES,
    Covariates,
    HouseholdHistory,
    Observation,
    PanelDataset,
    ParameterSet,
    ValidationError,
)

SIMULATED_LABELS = ("const", "hassle_const", "log_benefit", "no_infant", "la", "education")


@dataclass(frozen=True)
class HouseholdTypeSpec:
    education: int
    la: float
    first_child_age_months: int
    newborn_at_month_12: bool = False
    replicates: int = 1

    def __post_init__(self):
        if self.education not in (1, 2, 3):
            raise ValidationError(f"education must be 1, 2 or 3, got {self.education}")
        if self.first_child_age_months < 0:
            raise ValidationError("first_child_age_months must be >= 0")
        if self.replicates < 1:
            raise ValidationError("replicates must be >= 1")

    def youngest_age_path(self, horizon: int) -> np.ndarray:
        """Youngest child's age in months for periods ``1..horizon``."""
        t = np.arange(1, horizon + 1)
        age = self.first_child_age_months + t - 1
        if self.newborn_at_month_12:
            age = np.where(t >= 12, t - 12, age)
        return age

    def to_dict(self) -> dict:
        return {
            "education": self.education,
            "la": self.la,
            "first_child_age_months": self.first_child_age_months,
            "newborn_at_month_12": self.newborn_at_month_12,
            "replicates": self.replicates,
        }


def build_type_grid(
    educations: Sequence[int] = (1, 2, 3),
    las: Sequence[float] = (10.0, 15.0, 20.0),
    first_ages: Sequence[int] = (3, 6, 9, 12, 15),
    newborn: Sequence[bool] = (False, True),
    replicates: int = 5,
) -> list[HouseholdTypeSpec]:
    """Cartesian household-type grid; the defaults give 90 types of 5 replicates."""
    return [
        HouseholdTypeSpec(e, float(la), a, nb, replicates)
        for e, la, a, nb in itertools.product(educations, las, first_ages, newborn)
    ]


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    ``n_households``, when given, overrides the replicate counts: household
    ``i`` is assigned type ``population[i % len(population)]``.
    ``benefit_dispersion`` is the standard deviation of a household-level
    log-normal multiplier on benefits (0 reproduces the two-level schedule
    exactly); it breaks the collinearity between log benefit and the infant
    indicator so that both coefficients are estimable from simulated data.
    """

    params: ParameterSet
    population: tuple[HouseholdTypeSpec, ...] = field(default_factory=lambda: tuple(build_type_grid()))
    horizon_months: int = 30
    seed: int = 0
    benefit_with_infant: float = 150.0
    benefit_without_infant: float = 100.0
    benefit_dispersion: float = 0.0
    n_households: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "population", tuple(self.population))
        if self.horizon_months < 1:
            raise ValidationError("horizon_months must be >= 1")
        if not (self.benefit_with_infant > 0 and self.benefit_without_infant > 0):
            raise ValidationError("benefits must be positive")
        if self.benefit_dispersion < 0:
            raise ValidationError("benefit_dispersion must be >= 0")
        if not self.population:
            raise ValidationError("population is empty")
        if self.n_households is not None and self.n_households < 1:
            raise ValidationError("n_households must be >= 1")
        missing = set(self.params.spec.labels) - set(SIMULATED_LABELS)
        if missing:
            raise ValidationError(
                f"simulator cannot produce covariates {sorted(missing)}; available: {SIMULATED_LABELS}"
            )

    def household_types(self) -> list[HouseholdTypeSpec]:
        if self.n_households is not None:
            pop = self.population
            return [pop[i % len(pop)] for i in range(self.n_households)]
        return [t for t in self.population for _ in range(t.replicates)]

    def replace(self, **changes) -> "SimConfig":
        from dataclasses import replace

        return replace(self, **changes)


def benefit_schedule(youngest_age_months, config: SimConfig):
    """Monthly benefit in dollars: the infant level for ages 0 to 12, otherwise the lower level."""
    age = np.asarray(youngest_age_months)
    out = np.where((age >= 0) & (age <= 12), config.benefit_with_infant, config.benefit_without_infant)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# random draws
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Latents:
    """Per-household random effect, benefit multiplier draw and per-month uniforms."""

    q: np.ndarray
    benefit_shock: np.ndarray
    u_attention: np.ndarray
    u_choice: np.ndarray

    @property
    def n_households(self) -> int:
        return self.q.size

    @property
    def horizon(self) -> int:
        return self.u_attention.shape[1]


def household_stream(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def draw_latents(seed: int, n_households: int, horizon: int) -> Latents:
    q = np.empty(n_households)
    shock = np.empty(n_households)
    ua = np.empty((n_households, horizon))
    uc = np.empty((n_households, horizon))
    for i in range(n_households):
        rng = household_stream(seed, i)
        q[i] = rng.standard_normal()
        shock[i] = rng.standard_normal()
        ua[i] = rng.random(horizon)
        uc[i] = rng.random(horizon)
    return Latents(q, shock, ua, uc)


# ---------------------------------------------------------------------------
# vectorized engine
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Design:
    """Deterministic covariate paths, shape (households, months) per label."""

    ages: np.ndarray
    covariates: dict[str, np.ndarray]

    @property
    def shape(self) -> tuple[int, int]:
        return self.ages.shape


def build_design(config: SimConfig, latents: Latents) -> Design:
    types = config.household_types()
    T = config.horizon_months
    ages = np.stack([t.youngest_age_path(T) for t in types])
    mult = np.exp(config.benefit_dispersion * latents.benefit_shock)[:, None]
    benefit = benefit_schedule(ages, config) * mult
    ones = np.ones(ages.shape)
    covs = {
        "const": ones,
        "hassle_const": ones,
        "log_benefit": np.log(benefit),
        "no_infant": (ages > 12).astype(float),
        "la": np.array([t.la for t in types], dtype=float)[:, None] * ones,
        "education": np.array([t.education for t in types], dtype=float)[:, None] * ones,
    }
    return Design(ages, covs)


@dataclass
class MonthState:
    """What a policy sees in month ``t`` (1-based), one entry per household."""

    t: int
    d_prev: np.ndarray
    d_prev2: np.ndarray
    youngest_age: np.ndarray
    p_attention: np.ndarray
    p_choice: np.ndarray

    @property
    def exited_last_month(self) -> np.ndarray:
        return (self.d_prev2 == 1) & (self.d_prev == 0)


class Policy(Protocol):
    def adjust(self, state: MonthState) -> tuple[np.ndarray, np.ndarray]:
        """Return modified (attention, choice) probabilities."""


def _index(params: ParameterSet, labels, coefs, covs) -> np.ndarray:
    out = 0.0
    for lab, b in zip(labels, coefs):
        out = out + b * covs[lab]
    return np.broadcast_to(out, covs["const"].shape)


@dataclass(frozen=True)
class Outcome:
    decisions: np.ndarray
    attention: np.ndarray
    choice: np.ndarray
    recert: np.ndarray


def run_engine(params: ParameterSet, design: Design, latents: Latents, policy: Policy | None = None) -> Outcome:
    spec = params.spec
    covs = design.covariates
    H, T = design.shape
    q = latents.q[:, None]
    ua = _index(params, spec.attention, params.gamma, covs) + params.sigma1 * q
    uc_base = (
        _index(params, spec.benefit, params.beta_benefit, covs)
        + _index(params, spec.usage, params.beta_usage, covs)
        + params.sigma2 * q
    )
    uc_hassle = _index(params, spec.hassle, params.beta_hassle, covs)
    pa_base = special.ndtr(ua)
    recert_age = np.isin(design.ages, tuple(RECERT_AGES))

    D = np.zeros((H, T), dtype=np.int8)
    A = np.zeros((H, T), dtype=np.int8)
    C = np.zeros((H, T), dtype=np.int8)
    Z = np.zeros((H, T), dtype=np.int8)
    d_prev = np.zeros(H, dtype=np.int8)
    d_prev2 = np.zeros(H, dtype=np.int8)
    for j in range(T):
        z = (d_prev == 1) & recert_age[:, j]
        s = np.maximum(1 - d_prev, d_prev * z)
        pa = np.where(d_prev == 1, 1.0, pa_base[:, j])
        pc = special.ndtr(uc_base[:, j] + s * uc_hassle[:, j])
        if policy is not None:
            pa, pc = policy.adjust(MonthState(j + 1, d_prev, d_prev2, design.ages[:, j], pa, pc))
        a = latents.u_attention[:, j] < pa
        c = latents.u_choice[:, j] < pc
        d = (a & c).astype(np.int8)
        A[:, j], C[:, j], D[:, j], Z[:, j] = a, c, d, z
        d_prev2, d_prev = d_prev, d
    return Outcome(D, A, C, Z)


# ---------------------------------------------------------------------------
# panels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimulatedPanel:
    panel: PanelDataset
    latents: Latents
    design: Design
    outcome: Outcome
    types: tuple[HouseholdTypeSpec, ...]

    @property
    def takeup_rate(self) -> float:
        return float(self.outcome.decisions.mean())


def _to_panel(params: ParameterSet, design: Design, outcome: Outcome, ids: Sequence[str]) -> PanelDataset:
    spec = params.spec
    labels = spec.labels
    H, T = design.shape
    cols = {lab: design.covariates[lab] for lab in labels}
    households = []
    for i in range(H):
        obs = tuple(
            Observation(
                period=j + 1,
                covariates=Covariates({lab: float(cols[lab][i, j]) for lab in labels}),
                recert_required=int(outcome.recert[i, j]),
                decision=int(outcome.decisions[i, j]),
                youngest_age_months=int(design.ages[i, j]),
            )
            for j in range(T)
        )
        households.append(HouseholdHistory(ids[i], obs))
    return PanelDataset(spec, tuple(households))


def simulate_panel(
    config: SimConfig, policy: Policy | None = None, latents: Latents | None = None
) -> SimulatedPanel:
    """Simulate the configured population; bit-for-bit reproducible from ``config.seed``.

    Passing stored ``latents`` replays the same draws (common random numbers).
    """
    types = config.household_types()
    if latents is None:
        latents = draw_latents(config.seed, len(types), config.horizon_months)
    elif latents.n_households != len(types) or latents.horizon != config.horizon_months:
        raise ValidationError("latents do not match the configured population and horizon")
    design = build_design(config, latents)
    outcome = run_engine(config.params, design, latents, policy)
    width = len(str(len(types) - 1))
    ids = [f"h{i:0{width}d}" for i in range(len(types))]
    panel = _to_panel(config.params, design, outcome, ids)
    return SimulatedPanel(panel, latents, design, outcome, tuple(types))


def simulate_household(
    htype: HouseholdTypeSpec,
    config: SimConfig,
    stream: np.random.Generator,
    household_id: str = "h0",
    policy: Policy | None = None,
) -> tuple[HouseholdHistory, Latents, Outcome]:
    """Simulate one household from an explicit random stream."""
    T = config.horizon_months
    q = stream.standard_normal()
    shock = stream.standard_normal()
    latents = Latents(np.array([q]), np.array([shock]), stream.random(T)[None, :], stream.random(T)[None, :])
    one = config.replace(population=(htype,), n_households=1)
    design = build_design(one, latents)
    outcome = run_engine(config.params, design, latents, policy)
    panel = _to_panel(config.params, design, outcome, [household_id])
    return panel.households[0], latents, outcome


def replay(config: SimConfig, latents: Latents, policy: Policy | None = None) -> Outcome:
    """Re-run the decision rule on stored draws."""
    return run_engine(config.params, build_design(config, latents), latents, policy)


def latent_rows(sim: SimulatedPanel):
    """Rows ``(household_id, period, q, a, c)`` of the latent record."""
    for i, h in enumerate(sim.panel.households):
        for j in range(sim.latents.horizon):
            yield h.id, j + 1, float(sim.latents.q[i]), int(sim.outcome.attention[i, j]), int(
                sim.outcome.choice[i, j]
            )

