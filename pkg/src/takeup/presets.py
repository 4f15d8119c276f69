"""Reference inputs: the baseline covariate layout and the column (1) estimates."""

from __future__ import annotations

import math

from .model import Covariates, CovariateSpec, ParameterSet

BASELINE_SPEC = CovariateSpec(
    attention=("const", "log_benefit", "no_infant", "la", "education"),
    benefit=("const", "log_benefit", "no_infant"),
    hassle=("hassle_const", "la"),
    usage=("education",),
)

# Full-model estimates, specification (1).
TABLE2_COL1 = ParameterSet(
    BASELINE_SPEC,
    gamma=(-2.716, 0.321, -0.732, 0.001, 0.034),
    beta_benefit=(1.134, 0.141, -0.381),
    beta_hassle=(-0.360, 0.010),
    beta_usage=(0.082,),
    log_sigma1=0.452,
    log_sigma2=-0.114,
)


def household_covariates(
    benefit: float = 150.0, no_infant: int = 0, la: float = 15.0, education: int = 2
) -> Covariates:
    """Covariates for a household in the baseline layout."""
    return Covariates(
        {
            "const": 1.0,
            "hassle_const": 1.0,
            "log_benefit": math.log(benefit),
            "no_infant": float(no_infant),
            "la": float(la),
            "education": float(education),
        }
    )


BASELINE_HOUSEHOLD = household_covariates()
