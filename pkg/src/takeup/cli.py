"""Command-line interface.

Every run writes its outputs plus ``manifest.json`` (subcommand, arguments,
seed, version and SHA-256 digests of input files) into ``--out``.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, kernels
from . import counterfactual as cf
from . import identification as ident
from . import imputation, io
from . import policy_eval as pe
from .likelihood import FitConfig, LikelihoodError, fit_mle
from .model import CovariateSpec, ValidationError, attention_prob, choice_prob
from .presets import BASELINE_SPEC, TABLE2_COL1, household_covariates
from .simulator import SimConfig, build_type_grid, simulate_panel

log = logging.getLogger("takeup")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _global_options(parser: argparse.ArgumentParser, suppress: bool) -> None:
    def default(v):
        return argparse.SUPPRESS if suppress else v

    parser.add_argument("--seed", type=int, default=default(0), help="master random seed (default 0)")
    parser.add_argument("--out", type=Path, default=default(Path(".")), help="output directory")
    parser.add_argument("--config", type=Path, default=default(None),
                        help="JSON file whose section for the subcommand supplies option defaults")
    parser.add_argument("--threads", type=int, default=default(1),
                        help="worker cap; results do not depend on it")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="takeup", description="Attention/choice take-up model toolkit.")
    parser.add_argument("--version", action="version", version=f"takeup {__version__}")
    _global_options(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    parser.subcommands = {}

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _global_options(p, suppress=True)
        parser.subcommands[name] = p
        return p

    p = add("simulate", "simulate a synthetic panel")
    p.add_argument("--params", type=Path, help="parameter JSON (default: the reference column (1) estimates)")
    p.add_argument("--horizon", type=int, default=30)
    p.add_argument("--replicates", type=int, default=5, help="households per grid type")
    p.add_argument("--households", type=int, help="total households (types cycle over the grid)")
    p.add_argument("--benefit-dispersion", type=float, default=0.0)
    p.add_argument("--benefit-with-infant", type=float, default=150.0)
    p.add_argument("--benefit-without-infant", type=float, default=100.0)

    p = add("fit", "maximum likelihood fit of a panel CSV")
    p.add_argument("--panel", type=Path, required=True)
    p.add_argument("--spec", type=Path, help="covariate spec JSON (default: baseline layout)")
    p.add_argument("--start", type=Path, help="parameter or fit JSON used as starting values")
    p.add_argument("--quadrature-order", type=int, default=30)
    p.add_argument("--max-iterations", type=int, default=500)
    p.add_argument("--tolerance", type=float, default=1e-8, help="relative log-likelihood tolerance")
    p.add_argument("--gradient", choices=("analytic", "numeric"), default="analytic")

    p = add("counterfactual", "take-up under policy interventions")
    p.add_argument("--params", type=Path)
    p.add_argument("--policy", action="append", choices=cf.POLICY_KINDS,
                   help="policy kind (repeatable; default: none plus the four interventions)")
    p.add_argument("--delta", type=float, default=0.0045, help="choice-nudge increment")
    p.add_argument("--age-cap", type=int, default=30, help="nudge only while the youngest child is this young")
    p.add_argument("--n-seeds", type=int, default=20, help="seeds seed..seed+n-1 are pooled")
    p.add_argument("--replicates", type=int, default=5)
    p.add_argument("--horizon", type=int, default=30)
    p.add_argument("--curve", action="store_true", help="also write the nudge response curve and equivalence delta")
    p.add_argument("--delta-grid", default="0:0.1:0.0025", help="start:stop:step for --curve (stop exclusive)")

    p = add("curves", "stage probabilities as functions of the random effect")
    p.add_argument("--params", type=Path)
    p.add_argument("--benefit", type=float, default=150.0)
    p.add_argument("--no-infant", type=int, choices=(0, 1), default=0)
    p.add_argument("--la", type=float, default=15.0)
    p.add_argument("--education", type=int, choices=(1, 2, 3), default=2)
    p.add_argument("--dprev", type=int, choices=(0, 1), default=0)
    p.add_argument("--q-min", type=float, default=-2.0)
    p.add_argument("--q-max", type=float, default=2.0)
    p.add_argument("--points", type=int, default=41)

    p = add("policy-eval", "pilot-program statistics")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--panel", type=Path, help="site panel CSV")
    src.add_argument("--builtin-table5", action="store_true", help="use the embedded 12-site panel")
    p.add_argument("--test", default="all",
                   help="permutation, pretrend, did, event-study, wilcoxon, report or all; "
                        "a 'cnm-' or 'abm-' prefix selects the design")
    p.add_argument("--design", choices=("cnm", "abm"), default="cnm")
    p.add_argument("--post-year", type=int, default=2017)
    p.add_argument("--base-year", type=int, default=2015)
    p.add_argument("--sidedness", choices=("greater", "less", "two-sided"))
    p.add_argument("--method", choices=("normal", "exact"), default="normal")

    p = add("identify", "numerical identification checks")
    p.add_argument("--params", type=Path)
    p.add_argument("--theorem", type=int, action="append", choices=(1, 2, 3))
    p.add_argument("--tau", type=int, default=2)
    p.add_argument("--tolerance", type=float, default=1e-2)

    p = add("impute", "LAD benefit imputation")
    p.add_argument("--input", type=Path, required=True)
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _params(path: Path | None):
    return TABLE2_COL1 if path is None else io.load_params(path)


class Run:
    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.out: Path = args.out
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []

    def input(self, path: Path | None) -> Path | None:
        if path is not None:
            if not path.is_file():
                raise ValidationError(f"input file not found: {path}")
            self.inputs[str(path)] = _digest(path)
        return path

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def manifest(self, status: str) -> None:
        args = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(self.args).items())}
        doc = {
            "subcommand": self.args.command,
            "config": None if self.args.config is None else str(self.args.config),
            "seed": self.args.seed,
            "output_directory": str(self.out),
            "tool_version": __version__,
            "kernel_backend": kernels.BACKEND,
            "arguments": args,
            "input_digests": self.inputs,
            "outputs": self.outputs,
            "status": status,
        }
        io.save_json(self.out / "manifest.json", doc)


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(run: Run) -> int:
    a = run.args
    params = _params(run.input(a.params))
    config = SimConfig(
        params=params,
        population=tuple(build_type_grid(replicates=a.replicates)),
        horizon_months=a.horizon,
        seed=a.seed,
        benefit_with_infant=a.benefit_with_infant,
        benefit_without_infant=a.benefit_without_infant,
        benefit_dispersion=a.benefit_dispersion,
        n_households=a.households,
    )
    sim = simulate_panel(config)
    io.write_panel_csv(run.path("panel.csv"), sim.panel)
    io.write_latents_csv(run.path("latents.csv"), sim)
    io.save_json(run.path("spec.json"), params.spec.to_dict())
    io.save_params(run.path("params.json"), params)
    print(f"simulated {len(sim.panel)} households x {config.horizon_months} months; take-up {sim.takeup_rate:.4f}")
    return EXIT_OK


def cmd_fit(run: Run) -> int:
    a = run.args
    spec = BASELINE_SPEC if a.spec is None else CovariateSpec.from_dict(io.load_json(run.input(a.spec)))
    data = io.read_panel_csv(run.input(a.panel), spec)
    start = None if a.start is None else io.load_params(run.input(a.start))
    if start is not None and start.spec != spec:
        raise ValidationError("starting parameters use a different covariate spec than the panel")
    config = FitConfig(quadrature_order=a.quadrature_order, max_iterations=a.max_iterations,
                       loglik_tolerance=a.tolerance, gradient=a.gradient, start=start)
    result = fit_mle(data, config)
    io.save_fit_result(run.path("fit.json"), result)
    _write_rows(run.path("fit_table.csv"), ["coefficient", "estimate", "se"],
                [(n, f"{v:.6f}", f"{s:.6f}") for n, v, s in result.table()])
    print(f"{'coefficient':24s}{'estimate':>12s}{'se':>12s}")
    for n, v, s in result.table():
        print(f"{n:24s}{v:12.4f}{'(' + format(s, '.4f') + ')':>12s}")
    print(f"log-likelihood {result.loglik:.6f}; iterations {result.iterations}; converged {result.converged}")
    if not result.converged:
        raise NumericalFailure(f"optimizer did not converge: {result.message}")
    return EXIT_OK


def _delta_grid(text: str) -> np.ndarray:
    try:
        start, stop, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise UsageError("--delta-grid must look like start:stop:step") from None
    if step <= 0 or stop <= start:
        raise UsageError("--delta-grid needs start < stop and a positive step")
    return np.round(np.arange(start, stop, step), 12)


def cmd_counterfactual(run: Run) -> int:
    a = run.args
    params = _params(run.input(a.params))
    config = SimConfig(params, tuple(build_type_grid(replicates=a.replicates)), a.horizon, a.seed)
    if a.n_seeds < 1:
        raise UsageError("--n-seeds must be >= 1")
    seeds = range(a.seed, a.seed + a.n_seeds)
    kinds = a.policy or ["none", "force_attention", "force_choice", "attention_boost_post_exit", "choice_nudge"]
    reports = [cf.run_counterfactual(config, cf.PolicySpec(k, a.delta if k == "choice_nudge" else 0.0,
                                                           a.age_cap), seeds) for k in kinds]
    cf.write_takeup_csv(run.path("takeup.csv"), reports)
    cf.write_targeting_csv(run.path("targeting.csv"), reports)
    for r in reports:
        print(f"{r.policy:32s} take-up {r.takeup_rate:.4f}")
    if a.curve:
        res = cf.nudge_equivalence_search(config, cf.PolicySpec("attention_boost_post_exit"), _delta_grid(a.delta_grid),
                                          seeds, a.age_cap)
        cf.write_curve_csv(run.path("curve.csv"), res.curve)
        found = "none in grid" if res.delta is None else f"{res.delta:g}"
        print(f"attention boost take-up {res.target_takeup:.4f}; equivalent nudge delta: {found}")
    return EXIT_OK


def cmd_curves(run: Run) -> int:
    a = run.args
    params = _params(run.input(a.params))
    if not (np.isfinite(a.q_min) and np.isfinite(a.q_max)) or a.q_max <= a.q_min or a.points < 2:
        raise UsageError("need finite --q-min < --q-max and --points >= 2")
    x = household_covariates(a.benefit, a.no_infant, a.la, a.education)
    rows = []
    for q in np.linspace(a.q_min, a.q_max, a.points):
        rows.append((f"{q:.6g}", f"{attention_prob(params, x, a.dprev, q):.10f}",
                     f"{choice_prob(params, x, 1, 0, q):.10f}", f"{choice_prob(params, x, 1, 1, q):.10f}"))
    _write_rows(run.path("curves.csv"), ["q", "p_attention", "p_choice_nohassle", "p_choice_hassle"], rows)
    print(f"wrote {len(rows)} rows to {run.out / 'curves.csv'}")
    return EXIT_OK


_TESTS = ("permutation", "pretrend", "did", "event-study", "wilcoxon", "report", "all")


def cmd_policy_eval(run: Run) -> int:
    a = run.args
    panel = pe.load_table5() if a.builtin_table5 else pe.read_site_panel_csv(run.input(a.panel))
    test, design = a.test, a.design
    for prefix in ("cnm-", "abm-"):
        if test.startswith(prefix):
            design, test = prefix[:-1], test[len(prefix):]
    if test not in _TESTS:
        raise UsageError(f"unknown --test {a.test!r}; choose from {_TESTS} with an optional cnm-/abm- prefix")
    assignment = panel.assignment(design)
    rows = []
    selected = _TESTS[:-2] if test == "all" else (test,)

    if "permutation" in selected:
        side = a.sidedness or "greater"
        r = pe.permutation_test(panel, pe.did_statistic(a.post_year, a.base_year), assignment, side)
        print(f"{design.upper()} permutation DiD({a.post_year}-{a.base_year}) = {r.actual_statistic:.4f}; "
              f"rank {r.rank} of {r.size}; {side} p = {r.p_fraction} = {r.p_value:.4f}")
        rows.append((design, f"permutation_did_{a.post_year}_{a.base_year}", r.actual_statistic, "", r.p_value))
    if "pretrend" in selected:
        side = a.sidedness or "less"
        r = pe.permutation_test(panel, pe.did_statistic(2016, 2015), assignment, side)
        print(f"{design.upper()} pretrend = {r.actual_statistic:.4f}; rank {r.rank} of {r.size}; "
              f"{side} p = {r.p_fraction} = {r.p_value:.4f}")
        rows.append((design, "permutation_pretrend", r.actual_statistic, "", r.p_value))
    if "did" in selected:
        r = pe.twfe_did(panel, assignment)
        print(f"{design.upper()} TWFE DiD = {r.coefficients['did']:.3f}{r.stars('did')} "
              f"(SE {r.standard_errors['did']:.3f})")
        rows.append((design, "twfe_did", r.coefficients["did"], r.standard_errors["did"], r.p_values["did"]))
    if "event-study" in selected:
        r = pe.event_study(panel, assignment)
        for k in ("pre", "post"):
            print(f"{design.upper()} event study beta_{k} = {r.coefficients[k]:.3f}{r.stars(k)} "
                  f"(SE {r.standard_errors[k]:.3f})")
            rows.append((design, f"event_{k}", r.coefficients[k], r.standard_errors[k], r.p_values[k]))
    if "wilcoxon" in selected:
        r = pe.rollout_rank_test(panel, design, a.method)
        print(f"{design.upper()} rank-sum on rollout month: W = {r.statistic:g}, two-sided p = {r.p_value:.4f}")
        rows.append((design, f"wilcoxon_{a.method}", r.statistic, "", r.p_value))
    if test in ("report", "all"):
        text = pe.regression_report(panel, design)
        print(text)
        run.path("report.txt").write_text(text + "\n")
    if rows:
        _write_rows(run.path("policy_eval.csv"), ["design", "statistic", "value", "se", "p_value"],
                    [(d, s, f"{v:.6f}", se if se == "" else f"{se:.6f}", f"{p:.6f}") for d, s, v, se, p in rows])
    return EXIT_OK


def cmd_identify(run: Run) -> int:
    a = run.args
    params = _params(run.input(a.params))
    x = dict(household_covariates())
    missing = set(params.spec.labels) - set(x)
    if missing:
        raise ValidationError(f"identification checks need baseline covariates; unknown labels {sorted(missing)}")
    checks, gap = ident.identification_report(params, x, a.theorem or (1, 2, 3), a.tau)
    ident.write_report_csv(run.path("identification.csv"), checks, gap)
    for c in checks:
        print(f"{c.theorem:9s} {c.omega:14s} true {c.true_ratio:12.6f} estimated {c.estimated_ratio:12.6f} "
              f"|error| {c.abs_error:.2e}")
    ok = gap < 1e-8
    print(f"coherent-shuffle equal-probability check: max gap {gap:.2e} ({'pass' if ok else 'FAIL'})")
    worst = max((c.abs_error for c in checks), default=0.0)
    if not ok or worst >= a.tolerance:
        raise NumericalFailure(f"identification check failed (largest ratio error {worst:.3g})")
    return EXIT_OK


def cmd_impute(run: Run) -> int:
    rows = imputation.read_imputation_csv(run.input(run.args.input))
    fit, imputed = imputation.fit_and_impute(rows)
    imputation.write_imputation_csv(run.path("imputed.csv"), rows, imputed)
    _write_rows(run.path("lad_coefficients.csv"), ["coefficient", "estimate"],
                [(k, f"{v:.6f}") for k, v in fit.as_dict().items()])
    for k, v in fit.as_dict().items():
        print(f"{k:14s}{v:12.4f}")
    print(f"LAD objective {fit.objective:.6f} after {fit.iterations} iterations; imputed {len(rows)} rows")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "counterfactual": cmd_counterfactual,
    "curves": cmd_curves,
    "policy-eval": cmd_policy_eval,
    "identify": cmd_identify,
    "impute": cmd_impute,
}


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    doc = io.load_json(args.config)
    if not isinstance(doc, dict):
        raise ValidationError(f"{args.config}: top level must be an object keyed by subcommand")
    section = doc.get(args.command, {})
    if not isinstance(section, dict):
        raise ValidationError(f"{args.config}: section {args.command!r} must be an object")
    allowed = set(vars(args)) - {"command", "config"}
    unknown = {k.replace("-", "_") for k in section} - allowed
    if unknown:
        raise ValidationError(f"{args.config}: unknown options for {args.command}: {sorted(unknown)}")
    parser.subcommands[args.command].set_defaults(**{k.replace("-", "_"): v for k, v in section.items()})
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    run = None
    try:
        args = _apply_config(parser, argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        for key in ("params", "panel", "start", "spec", "input", "out"):
            if isinstance(getattr(args, key, None), str):
                setattr(args, key, Path(getattr(args, key)))
        run = Run(args)
        code = COMMANDS[args.command](run)
        run.manifest("ok")
        return code
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except (ValidationError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except (NumericalFailure, LikelihoodError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    if run is not None:
        run.manifest("failed")
    return code


if __name__ == "__main__":
    sys.exit(main())
