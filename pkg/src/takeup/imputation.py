"""Least-absolute-deviations benefit imputation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import ValidationError

STATE_GROUPS = ("low", "medium", "high")
COEFFICIENT_NAMES = ("state:low", "state:medium", "state:high", "post2007", "kids_u1", "kids_1to5")


@dataclass(frozen=True)
class ImputationDesign:
    state_group: str
    post_2007: int
    kids_under_one: int
    kids_one_to_five: int

    def __post_init__(self):
        if self.state_group not in STATE_GROUPS:
            raise ValidationError(f"state_group must be one of {STATE_GROUPS}, got {self.state_group!r}")
        if self.post_2007 not in (0, 1):
            raise ValidationError("post_2007 must be 0 or 1")
        if self.kids_under_one < 0 or self.kids_one_to_five < 0:
            raise ValidationError("child counts must be non-negative")

    def row(self) -> np.ndarray:
        g = [float(self.state_group == s) for s in STATE_GROUPS]
        return np.array(g + [self.post_2007, self.kids_under_one, self.kids_one_to_five], dtype=float)


def design_matrix(designs: Sequence[ImputationDesign]) -> np.ndarray:
    return np.vstack([d.row() for d in designs]) if designs else np.empty((0, len(COEFFICIENT_NAMES)))


@dataclass(frozen=True)
class LadFit:
    coefficients: np.ndarray
    objective: float
    iterations: int
    objective_path: tuple[float, ...]
    names: tuple[str, ...] = COEFFICIENT_NAMES

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.coefficients.tolist()))


def lad_irls(X: np.ndarray, y: np.ndarray, eps: float = 1e-6, tol: float = 1e-8, max_iter: int = 500) -> LadFit:
    """Minimize ``sum |y - X b|`` by iteratively reweighted least squares.

    Weights are ``1 / max(|r|, eps)``.  Each reweighted step cannot raise
    the objective in exact arithmetic; a step that raises it numerically is
    rejected and iteration stops.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    if n < k:
        raise ValidationError(f"need at least {k} rows for {k} coefficients, got {n}")
    if np.linalg.matrix_rank(X) < k:
        raise ValidationError("design matrix is rank deficient")
    b = np.linalg.lstsq(X, y, rcond=None)[0]
    obj = float(np.abs(y - X @ b).sum())
    path = [obj]
    it = 0
    for it in range(1, max_iter + 1):
        w = 1.0 / np.maximum(np.abs(y - X @ b), eps)
        Xw = X * w[:, None]
        b_new = np.linalg.solve(X.T @ Xw, Xw.T @ y)
        obj_new = float(np.abs(y - X @ b_new).sum())
        if obj_new > obj:
            break
        b = b_new
        change = obj - obj_new
        obj = obj_new
        path.append(obj)
        if change <= tol * max(obj, 1.0):
            break
    return LadFit(b, obj, it, tuple(path))


def lad_fit(
    designs: Sequence[ImputationDesign], benefits: Sequence[float], clip: tuple[float, float] = (0.0, 500.0)
) -> LadFit:
    """LAD regression of clipped benefits on state-group effects, the post-2007 shift and child counts."""
    lo, hi = clip
    if not lo < hi:
        raise ValidationError("clip lower bound must be below the upper bound")
    y = np.clip(np.asarray(benefits, dtype=float), lo, hi)
    return lad_irls(design_matrix(designs), y)


def impute_benefits(designs: Sequence[ImputationDesign], fit: LadFit, floor: float = 1.0) -> np.ndarray:
    """Fitted benefit for every row, floored so that its log is defined."""
    return np.maximum(design_matrix(designs) @ fit.coefficients, floor)


IMPUTATION_COLUMNS = (
    "household_id", "period", "state_group", "post2007", "kids_u1", "kids_1to5", "benefit_observed", "benefit_imputed",
)


@dataclass(frozen=True)
class ImputationRow:
    household_id: str
    period: int
    design: ImputationDesign
    benefit_observed: float | None


def read_imputation_csv(path: Path) -> list[ImputationRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = set(IMPUTATION_COLUMNS) - {"benefit_imputed"}
        missing = need - set(reader.fieldnames or ())
        if missing:
            raise ValidationError(f"{path}: missing columns {sorted(missing)}")
        for line, r in enumerate(reader, start=2):
            try:
                design = ImputationDesign(r["state_group"], int(r["post2007"]), int(r["kids_u1"]), int(r["kids_1to5"]))
                obs = r["benefit_observed"].strip()
                rows.append(ImputationRow(r["household_id"], int(r["period"]), design, float(obs) if obs else None))
            except (ValueError, TypeError) as exc:
                raise ValidationError(f"{path}: line {line}: {exc}") from None
    return rows


def write_imputation_csv(path: Path, rows: Iterable[ImputationRow], imputed: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(IMPUTATION_COLUMNS)
        for r, v in zip(rows, imputed):
            d = r.design
            obs = "" if r.benefit_observed is None else f"{r.benefit_observed:g}"
            w.writerow([r.household_id, r.period, d.state_group, d.post_2007, d.kids_under_one,
                        d.kids_one_to_five, obs, f"{v:.4f}"])


def fit_and_impute(rows: Sequence[ImputationRow]) -> tuple[LadFit, np.ndarray]:
    """Fit on rows with an observed benefit, then impute every row."""
    observed = [r for r in rows if r.benefit_observed is not None]
    fit = lad_fit([r.design for r in observed], [r.benefit_observed for r in observed])
    return fit, impute_benefits([r.design for r in rows], fit)
