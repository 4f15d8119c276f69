"""CSV and JSON formats for panels, parameters, fit results and simulation settings."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any, Mapping

from .likelihood import FitConfig, FitResult
from .model import (
    CovariateSpec,
    HouseholdHistory,
    Observation,
    PanelDataset,
    ParameterSet,
    ValidationError,
)
from .simulator import HouseholdTypeSpec, SimConfig, SimulatedPanel, build_type_grid, latent_rows

PANEL_FIXED_COLUMNS = ("household_id", "period", "d", "z", "youngest_age_months")


# ---------------------------------------------------------------------------
# panel CSV
# ---------------------------------------------------------------------------

def write_panel_csv(path: Path, data: PanelDataset) -> None:
    labels = data.spec.labels
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PANEL_FIXED_COLUMNS + labels)
        for h in data.households:
            for o in h.observations:
                age = "" if o.youngest_age_months is None else o.youngest_age_months
                w.writerow([h.id, o.period, o.decision, o.recert_required, age,
                            *(repr(o.covariates[lab]) for lab in labels)])


def read_panel_csv(path: Path, spec: CovariateSpec) -> PanelDataset:
    """Parse a panel CSV; malformed rows are reported with their line number."""
    groups: dict[str, list[Observation]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: file is empty (a header row is required)") from None
        header = [c.strip() for c in header]
        missing = [c for c in PANEL_FIXED_COLUMNS + spec.labels if c not in header]
        if missing:
            raise ValidationError(f"{path}: line 1: missing columns {missing}")
        pos = {c: header.index(c) for c in PANEL_FIXED_COLUMNS + spec.labels}
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}: line {line}: expected {len(header)} fields, got {len(row)}")
            try:
                age = row[pos["youngest_age_months"]].strip()
                obs = Observation(
                    period=int(row[pos["period"]]),
                    covariates={lab: float(row[pos[lab]]) for lab in spec.labels},
                    recert_required=int(row[pos["z"]]),
                    decision=int(row[pos["d"]]),
                    youngest_age_months=int(age) if age else None,
                )
            except (ValueError, ValidationError) as exc:
                raise ValidationError(f"{path}: line {line}: {exc}") from None
            groups.setdefault(row[pos["household_id"]], []).append(obs)
    households = []
    for hid, obs in groups.items():
        obs.sort(key=lambda o: o.period)
        households.append(HouseholdHistory(hid, tuple(obs)))
    if not households:
        raise ValidationError(f"{path}: no data rows")
    return PanelDataset(spec, tuple(households))


def write_latents_csv(path: Path, sim: SimulatedPanel) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["household_id", "period", "q", "a", "c"])
        for hid, t, q, a, c in latent_rows(sim):
            w.writerow([hid, t, repr(q), a, c])


# ---------------------------------------------------------------------------
# JSON documents
# ---------------------------------------------------------------------------

def load_json(path: Path) -> Any:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None


def save_json(path: Path, doc: Any) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=False)
        fh.write("\n")


def params_to_dict(params: ParameterSet) -> dict:
    return {"spec": params.spec.to_dict(), "coefficients": params.coefficients()}


def params_from_dict(doc: Mapping) -> ParameterSet:
    """Read a parameter document; fit-result documents (estimate and se per coefficient) are accepted too."""
    if "spec" not in doc or "coefficients" not in doc:
        raise ValidationError("parameter document needs 'spec' and 'coefficients' keys")
    spec = CovariateSpec.from_dict(doc["spec"])
    coefs = {}
    for name, v in doc["coefficients"].items():
        coefs[name] = float(v["estimate"] if isinstance(v, Mapping) else v)
    return ParameterSet.from_coefficients(spec, coefs)


def save_params(path: Path, params: ParameterSet) -> None:
    save_json(path, params_to_dict(params))


def load_params(path: Path) -> ParameterSet:
    return params_from_dict(load_json(path))


def save_fit_result(path: Path, result: FitResult) -> None:
    save_json(path, result.to_dict())


def fit_config_from_dict(doc: Mapping, start: ParameterSet | None = None) -> FitConfig:
    allowed = {"quadrature_order", "max_iterations", "loglik_tolerance", "gradient_step", "hessian_step", "gradient"}
    unknown = set(doc) - allowed
    if unknown:
        raise ValidationError(f"unknown fit settings {sorted(unknown)}; allowed: {sorted(allowed)}")
    return FitConfig(**doc, start=start)


SIM_KEYS = {
    "horizon_months", "seed", "benefit_with_infant", "benefit_without_infant", "benefit_dispersion",
    "n_households", "replicates", "population",
}


def sim_config_from_dict(doc: Mapping, params: ParameterSet) -> SimConfig:
    """Simulation settings; ``population`` is a list of type records, or omitted for the default grid."""
    unknown = set(doc) - SIM_KEYS
    if unknown:
        raise ValidationError(f"unknown simulation settings {sorted(unknown)}; allowed: {sorted(SIM_KEYS)}")
    doc = dict(doc)
    replicates = int(doc.pop("replicates", 5))
    pop = doc.pop("population", None)
    if pop is None:
        population = build_type_grid(replicates=replicates)
    else:
        try:
            population = [HouseholdTypeSpec(**{"replicates": replicates, **p}) for p in pop]
        except TypeError as exc:
            raise ValidationError(f"bad population entry: {exc}") from None
    return SimConfig(params=params, population=tuple(population), **doc)


def sim_config_to_dict(config: SimConfig) -> dict:
    return {
        "horizon_months": config.horizon_months,
        "seed": config.seed,
        "benefit_with_infant": config.benefit_with_infant,
        "benefit_without_infant": config.benefit_without_infant,
        "benefit_dispersion": config.benefit_dispersion,
        "n_households": config.n_households,
        "population": [t.to_dict() for t in config.population],
    }

