"""Policy interventions, counterfactual take-up and participant targeting.

Every policy works by changing the stage probabilities that a month's
uniform draws are compared against.  Running several policies on the same
seeds therefore gives paired (common random numbers) comparisons.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import ValidationError
from .simulator import Latents, MonthState, SimConfig, build_design, draw_latents, run_engine

POLICY_KINDS = (
    "none",
    "force_attention",
    "force_choice",
    "attention_boost_post_exit",
    "choice_nudge",
    "oneshot_attention_boost",
)


@dataclass(frozen=True)
class PolicySpec:
    kind: str = "none"
    nudge_delta: float = 0.0
    nudge_age_cap_months: int = 30
    boost_magnitude: float = 0.30

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValidationError(f"unknown policy kind {self.kind!r}; expected one of {POLICY_KINDS}")
        if not 0.0 <= self.nudge_delta < 1.0:
            raise ValidationError("nudge_delta must lie in [0, 1)")
        if not 0.0 <= self.boost_magnitude <= 1.0:
            raise ValidationError("boost_magnitude must lie in [0, 1]")

    @property
    def label(self) -> str:
        if self.kind == "choice_nudge":
            return f"choice_nudge({self.nudge_delta:g})"
        return self.kind

    def adjust(self, state: MonthState):
        return apply_policy(self, state)


@dataclass(frozen=True)
class CombinedPolicy:
    """Applies several policies in order."""

    policies: tuple[PolicySpec, ...]

    @property
    def label(self) -> str:
        return "+".join(p.label for p in self.policies)

    def adjust(self, state: MonthState):
        pa, pc = state.p_attention, state.p_choice
        for p in self.policies:
            pa, pc = apply_policy(
                p, MonthState(state.t, state.d_prev, state.d_prev2, state.youngest_age, pa, pc)
            )
        return pa, pc


def apply_policy(policy: PolicySpec, state: MonthState):
    """Modified ``(attention, choice)`` probabilities for one month."""
    pa = np.asarray(state.p_attention, dtype=float)
    pc = np.asarray(state.p_choice, dtype=float)
    kind = policy.kind
    if kind == "none":
        return pa, pc
    if kind == "force_attention":
        return np.ones_like(pa), pc
    if kind == "force_choice":
        return pa, np.ones_like(pc)
    if kind == "attention_boost_post_exit":
        exited = (np.asarray(state.d_prev2) == 1) & (np.asarray(state.d_prev) == 0)
        return np.where(exited, 1.0, pa), pc
    if kind == "choice_nudge":
        eligible = (np.asarray(state.d_prev) == 1) & (np.asarray(state.youngest_age) <= policy.nudge_age_cap_months)
        return pa, np.where(eligible, np.minimum(1.0, pc + policy.nudge_delta), pc)
    if kind == "oneshot_attention_boost":
        if state.t == 1:
            return np.minimum(1.0, pa + policy.boost_magnitude), pc
        return pa, pc
    raise ValidationError(f"unknown policy kind {kind!r}")


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

TARGETING_COLUMNS = ("log_benefit", "kids_under_one", "education", "la", "random_effect")


@dataclass
class CounterfactualReport:
    policy: str
    takeup_rate: float
    seed_takeup: list[float]
    targeting: dict[str, float]
    n_households: int
    horizon_months: int
    seeds: list[int] = field(default_factory=list)

    @property
    def takeup_sd(self) -> float:
        return float(np.std(self.seed_takeup, ddof=1)) if len(self.seed_takeup) > 1 else 0.0


@lru_cache(maxsize=64)
def _latents(seed: int, n: int, horizon: int) -> Latents:
    lat = draw_latents(seed, n, horizon)
    for arr in (lat.q, lat.benefit_shock, lat.u_attention, lat.u_choice):
        arr.setflags(write=False)
    return lat


def run_counterfactual(
    config: SimConfig, policy: PolicySpec | CombinedPolicy, seeds: Sequence[int] | None = None
) -> CounterfactualReport:
    """Take-up and participant means under ``policy``, pooled over ``seeds`` (default: the config seed)."""
    seeds = [config.seed] if seeds is None else list(seeds)
    if not seeds:
        raise ValidationError("at least one seed is required")
    n = len(config.household_types())
    T = config.horizon_months
    rates = []
    sums = dict.fromkeys(TARGETING_COLUMNS, 0.0)
    count = 0
    for seed in seeds:
        lat = _latents(int(seed), n, T)
        design = build_design(config, lat)
        out = run_engine(config.params, design, lat, policy)
        D = out.decisions.astype(bool)
        rates.append(float(D.mean()))
        covs = design.covariates
        sums["log_benefit"] += covs["log_benefit"][D].sum()
        sums["kids_under_one"] += (design.ages[D] <= 12).sum()
        sums["education"] += covs["education"][D].sum()
        sums["la"] += covs["la"][D].sum()
        sums["random_effect"] += np.broadcast_to(lat.q[:, None], D.shape)[D].sum()
        count += int(D.sum())
    targeting = {k: (float(v) / count if count else float("nan")) for k, v in sums.items()}
    return CounterfactualReport(
        policy=policy.label,
        takeup_rate=float(np.mean(rates)),
        seed_takeup=rates,
        targeting=targeting,
        n_households=n,
        horizon_months=T,
        seeds=[int(s) for s in seeds],
    )


@dataclass
class NudgeSearchResult:
    delta: float | None
    target_takeup: float
    baseline_takeup: float
    curve: list[tuple[float, float]]

    @property
    def found(self) -> bool:
        return self.delta is not None


def nudge_equivalence_search(
    config: SimConfig,
    target_policy: PolicySpec,
    delta_grid: Sequence[float],
    seeds: Sequence[int] | None = None,
    age_cap_months: int = 30,
) -> NudgeSearchResult:
    """Smallest choice-nudge increment whose take-up reaches the target policy's take-up.

    ``delta`` is ``None`` when no grid value suffices; the full response
    curve is returned either way.
    """
    grid = [float(d) for d in delta_grid]
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValidationError("delta_grid must be sorted ascending")
    target = run_counterfactual(config, target_policy, seeds).takeup_rate
    baseline = run_counterfactual(config, PolicySpec("none"), seeds).takeup_rate
    curve = []
    found = None
    for d in grid:
        rate = run_counterfactual(config, PolicySpec("choice_nudge", d, age_cap_months), seeds).takeup_rate
        curve.append((d, rate))
        if found is None and rate >= target:
            found = d
    return NudgeSearchResult(found, target, baseline, curve)


def targeting_summary(reports: Iterable[CounterfactualReport]) -> list[dict[str, float | str]]:
    """One row per policy: take-up and participant means."""
    return [
        {"policy": r.policy, "participation": r.takeup_rate, **r.targeting}
        for r in reports
    ]


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def write_takeup_csv(path: Path, reports: Sequence[CounterfactualReport], baseline: str = "none") -> None:
    base = next((r.takeup_rate for r in reports if r.policy == baseline), None)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["policy", "takeup", "takeup_sd", "delta_vs_none", "n_households", "horizon", "n_seeds"])
        for r in reports:
            delta = "" if base is None else f"{r.takeup_rate - base:.6f}"
            w.writerow([r.policy, f"{r.takeup_rate:.6f}", f"{r.takeup_sd:.6f}", delta,
                        r.n_households, r.horizon_months, len(r.seeds)])


def write_targeting_csv(path: Path, reports: Sequence[CounterfactualReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["policy", "participation", *TARGETING_COLUMNS])
        for row in targeting_summary(reports):
            w.writerow([row["policy"], f"{row['participation']:.6f}",
                        *(f"{row[c]:.6f}" for c in TARGETING_COLUMNS)])


def write_curve_csv(path: Path, curve: Sequence[tuple[float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["delta", "takeup"])
        for d, rate in curve:
            w.writerow([f"{d:.6g}", f"{rate:.6f}"])
