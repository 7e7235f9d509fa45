from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from ..config import ConfigError, ExperimentConfig
from ..diagnostics import (
    KNOWN_FAULTS,
    InequalitySuite,
    classify,
    max_linf,
    random_state,
    verify_inequalities,
    zero_mode_report,
)
from ..dynamics import Trajectory, make_initial, run
from ..linanalysis import (
    ForcingSpec,
    LambdaSpec,
    compute_psi,
    converged_scan,
    default_decay_times,
    fit_loglog,
    measure_semigroup_decay,
    scan_cell,
    spread,
    verify_timespace,
)
from ..models import Classification, DiagRecord, InitialSpec, RunSummary, SimParams
from ..state import SimState
from ..store import RunDirectory, load_checkpoint
from .workers import CellOutcome, parallel_map

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_CONFIG = 2
EXIT_BRACKET = 3
EXIT_INFRASTRUCTURE = 4

CELL_LOG_DIR = "cells"


class CommandError(Exception):
    """Base class for orchestration failures."""


class BracketError(CommandError):
    """Raised when the bisection endpoints are not one blow_up_flagged and one bounded run."""

    def __init__(self, message: str, lo_summary: dict, hi_summary: dict) -> None:
        super().__init__(message)
        self.lo_summary = lo_summary
        self.hi_summary = hi_summary


@dataclass
class CommandResult:
    exit_code: int
    directory: Path
    summary: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RunCell:
    """One nonlinear run of a sweep or bisection."""

    value: float
    params: SimParams
    initial: InitialSpec
    sample_every: float


# Shared helpers --------------------------------------------------------------
def summarize(traj: Trajectory) -> RunSummary:
    records = traj.records
    first, last = records[0], records[-1]
    drift = max(max(abs(r.mass1 - first.mass1), abs(r.mass2 - first.mass2)) for r in records)
    return RunSummary(
        termination=traj.termination,
        t_final=last.t,
        samples=len(records),
        n1_linf_initial=traj.initial_linf[0],
        n2_linf_initial=traj.initial_linf[1],
        n1_linf_max=max(traj.linf_peak[0], max_linf(records, 1)),
        n2_linf_max=max(traj.linf_peak[1], max_linf(records, 2)),
        mass_drift=drift,
        mass_correction=traj.mass_correction,
        energy_final=traj.energy,
        classification=classify(traj),
        dt_final=last.dt,
        notes=list(traj.notes),
    )


def initial_state(config: ExperimentConfig, initial: InitialSpec, params: SimParams) -> SimState:
    if config.restart:
        state, saved = load_checkpoint(Path(config.restart))
        if saved.bc is not params.bc:
            raise ConfigError(f"再開元の境界条件 {saved.bc.value} が設定 {params.bc.value} と一致しません")
        logger.info("restarting from %s at t=%.6g", config.restart, state.t)
        return state
    return make_initial(config.grid.build(), initial, params.bc)


def run_cell(config: ExperimentConfig, cell: RunCell) -> RunSummary:
    state = initial_state(config, cell.initial, cell.params)
    traj = run(state, cell.params, cell.sample_every)
    return summarize(traj)


def make_run_cell(config: ExperimentConfig, axis: str, value: float) -> RunCell:
    params, initial = config.params, config.initial
    if axis == "A":
        params = params.replace(A=value)
    elif axis == "mass":
        initial = replace(initial, mass1=value)
    elif axis == "chi1":
        params = params.replace(chi1=value)
    else:
        raise CommandError(f"未知のスイープ軸です: {axis}")
    sample_every = config.output.sample_every
    if config.experiment.match_physical_time:
        # 再スケール時間 t = (元の時間) / A なので、A 倍して同じ物理時間を覆う
        scale = max(params.A, 1.0)
        params = params.replace(t_end=params.t_end * scale)
        sample_every *= scale
    return RunCell(value=value, params=params, initial=initial, sample_every=sample_every)


def monotonicity_audit(evaluations: list[tuple[float, str]], low_class: str) -> list[dict]:
    """Pairs A_i < A_j where A_i is already past the threshold but A_j is not."""

    ordered = sorted(evaluations)
    violations = []
    for i, (a_i, class_i) in enumerate(ordered):
        if class_i == low_class:
            continue
        for a_j, class_j in ordered[i + 1 :]:
            if class_j == low_class:
                violations.append({"A_above": a_i, "class_above": class_i, "A_low_class": a_j})
    return violations


def bracket_error(lo_class: Classification, hi_class: Classification) -> str | None:
    """None when one endpoint is blow_up_flagged and the other bounded."""

    if lo_class is hi_class:
        return "same_class"
    if {lo_class, hi_class} != {Classification.BLOW_UP_FLAGGED, Classification.BOUNDED}:
        return "not_bracketing"
    return None


# Commands --------------------------------------------------------------------
def cmd_simulate(config: ExperimentConfig, threads: int = 1) -> CommandResult:
    out = RunDirectory(config.output_directory(), "simulate")
    out.write_json("config.json", config.to_dict())
    state = initial_state(config, config.initial, config.params)
    traj = run(state, config.params, config.output.sample_every, config.output.snapshots)
    summary = summarize(traj)

    fmt = config.output.snapshot_format
    out.write_csv("diagnostics.csv", DiagRecord.columns(), (record.row() for record in traj.records))
    out.write_json("summary.json", summary.to_dict())
    out.write_json("zero_modes.json", zero_mode_report(traj).to_dict())
    energy = {name: acc.to_dict() for name, acc in traj.accumulators.items()}
    energy["E"] = traj.energy
    out.write_json("energy.json", energy)
    for index, snapshot in enumerate(traj.snapshots):
        out.write_checkpoint(f"snapshots/{index:04d}", snapshot, config.params, fmt)
    out.write_checkpoint("checkpoint", traj.final_state, config.params, fmt, termination=summary.termination.value)
    out.finalize()
    logger.info("simulate: %s (%s)", summary.termination.value, summary.classification.value)
    return CommandResult(EXIT_OK, out.root, summary.to_dict())


def cmd_sweep(config: ExperimentConfig, threads: int = 1) -> CommandResult:
    axis, values = config.experiment.sweep_axis
    if len(values) < 2:
        raise ConfigError("sweep には 2 つ以上の値が必要です")
    out = RunDirectory(config.output_directory(), "sweep")
    out.write_json("config.json", config.to_dict())
    cells = [make_run_cell(config, axis, value) for value in values]
    outcomes = parallel_map(lambda cell: run_cell(config, cell), cells, threads, out.root / CELL_LOG_DIR)

    columns = (
        "index",
        "value",
        "A",
        "mass1",
        "chi1",
        "classification",
        "termination",
        "t_final",
        "n1_linf_initial",
        "n1_linf_max",
        "n2_linf_initial",
        "n2_linf_max",
        "energy_final",
        "error",
    )
    rows = []
    payload = []
    for cell, outcome in zip(cells, outcomes):
        base = (outcome.index, cell.value, cell.params.A, cell.initial.mass1, cell.params.chi1)
        if outcome.ok:
            s = outcome.value
            rows.append(
                base
                + (
                    s.classification.value,
                    s.termination.value,
                    s.t_final,
                    s.n1_linf_initial,
                    s.n1_linf_max,
                    s.n2_linf_initial,
                    s.n2_linf_max,
                    s.energy_final,
                    "",
                )
            )
            payload.append({"index": outcome.index, axis: cell.value, "summary": s.to_dict()})
        else:
            rows.append(base + ("error", "", math.nan, math.nan, math.nan, math.nan, math.nan, math.nan, outcome.error))
            payload.append({"index": outcome.index, axis: cell.value, "error": outcome.error})

    out.write_csv("sweep.csv", columns, rows)
    summary = {"axis": axis, "cells": payload, "failed": sum(1 for o in outcomes if not o.ok)}
    out.write_json("sweep.json", summary)
    out.register_tree(CELL_LOG_DIR)
    out.finalize()
    return CommandResult(EXIT_OK, out.root, summary)


def cmd_bisect(config: ExperimentConfig, threads: int = 1) -> CommandResult:
    exp = config.experiment
    out = RunDirectory(config.output_directory(), "bisect")
    out.write_json("config.json", config.to_dict())
    log_dir = out.root / CELL_LOG_DIR
    evaluations: list[dict] = []

    def evaluate(values: list[float], offset: int) -> list[RunSummary]:
        cells = [make_run_cell(config, "A", value) for value in values]
        outcomes = parallel_map(lambda cell: run_cell(config, cell), cells, threads, log_dir, offset)
        summaries = []
        for cell, outcome in zip(cells, outcomes):
            if not outcome.ok:
                raise CommandError(f"A={cell.value} の実行に失敗しました: {outcome.error}")
            summary = outcome.value
            evaluations.append({"order": len(evaluations), "A": cell.value, "summary": summary.to_dict()})
            logger.info("bisect: A=%g -> %s", cell.value, summary.classification.value)
            summaries.append(summary)
        return summaries

    lo, hi = exp.A_lo, exp.A_hi
    lo_summary, hi_summary = evaluate([lo, hi], 0)
    lo_class, hi_class = lo_summary.classification, hi_summary.classification
    error = bracket_error(lo_class, hi_class)
    if error is not None:
        out.write_json("bisect.json", {"interval": [lo, hi], "evaluations": evaluations, "error": error})
        out.register_tree(CELL_LOG_DIR)
        out.finalize()
        if error == "same_class":
            message = f"両端の分類が同じです（{lo_class.value}）: A_lo={lo}, A_hi={hi}"
        else:
            message = (
                f"両端が blow_up_flagged と bounded の組ではありません"
                f"（{lo_class.value}, {hi_class.value}）: A_lo={lo}, A_hi={hi}"
            )
        raise BracketError(message, lo_summary.to_dict(), hi_summary.to_dict())

    iterations = 0
    inconclusive_at: float | None = None
    while hi - lo > exp.tol and iterations < exp.max_iter:
        mid = 0.5 * (lo + hi)
        (mid_summary,) = evaluate([mid], len(evaluations))
        iterations += 1
        if mid_summary.classification is lo_class:
            lo = mid
        elif mid_summary.classification is hi_class:
            hi = mid
        else:
            # inconclusive は端点にしない
            inconclusive_at = mid
            logger.warning("bisect: A=%g is inconclusive; stopping at [%g, %g]", mid, lo, hi)
            break

    audit = monotonicity_audit(
        [(item["A"], item["summary"]["classification"]) for item in evaluations],
        lo_class.value,
    )
    for violation in audit:
        logger.warning("bisect monotonicity violation: %s", violation)

    rows = []
    for item in evaluations:
        s = item["summary"]
        ratio = s["n1_linf_max"] / s["n1_linf_initial"] if s["n1_linf_initial"] > 0 else math.nan
        rows.append((item["order"], item["A"], s["classification"], s["termination"], s["t_final"], ratio))
    out.write_csv("bisect.csv", ("order", "A", "classification", "termination", "t_final", "n1_growth"), rows)
    summary = {
        "interval": [lo, hi],
        "width": hi - lo,
        "tol": exp.tol,
        "converged": hi - lo <= exp.tol,
        "iterations": iterations,
        "classes": {"lo": lo_class.value, "hi": hi_class.value},
        "inconclusive_at": inconclusive_at,
        "evaluations": evaluations,
        "monotonicity_violations": audit,
    }
    out.write_json("bisect.json", summary)
    out.register_tree(CELL_LOG_DIR)
    out.finalize()
    return CommandResult(EXIT_OK, out.root, summary)


def cmd_linanalysis(config: ExperimentConfig, threads: int = 1) -> CommandResult:
    mode = config.mode
    handlers: dict[str, Callable[[ExperimentConfig, RunDirectory, int], dict]] = {
        "resolvent": _resolvent,
        "decay": _decay,
        "timespace": _timespace,
    }
    if mode not in handlers:
        raise CommandError(f"linanalysis のモードではありません: {mode}")
    out = RunDirectory(config.output_directory(), mode)
    out.write_json("config.json", config.to_dict())
    summary = handlers[mode](config, out, threads)
    out.write_json("summary.json", summary)
    out.register_tree(CELL_LOG_DIR)
    out.finalize()
    return CommandResult(EXIT_OK, out.root, summary)


def cmd_verify(config: ExperimentConfig, threads: int = 1) -> CommandResult:
    exp = config.experiment
    if exp.inject_fault not in KNOWN_FAULTS:
        raise ConfigError(f"未知の inject_fault です: {exp.inject_fault}")
    out = RunDirectory(config.output_directory(), "verify")
    out.write_json("config.json", config.to_dict())

    grid = config.grid.build()
    rng = np.random.default_rng(config.seed)
    # 状態は 1 本の乱数列から順に作り、検証だけを並列化する
    states = [random_state(grid, rng, config.params.bc) for _ in range(exp.n_states)]
    outcomes = parallel_map(lambda state: verify_inequalities(state, exp.inject_fault), states, threads)

    suite = InequalitySuite()
    errors = []
    rows = []
    for outcome in outcomes:
        if not outcome.ok:
            errors.append({"state": outcome.index, "error": outcome.error})
            continue
        suite.add(outcome.value, outcome.index)
        for check in outcome.value.checks:
            rows.append((outcome.index, check.name, check.kind, check.lhs, check.rhs, check.slack, check.holds))
    out.write_csv("verify.csv", ("state", "name", "kind", "lhs", "rhs", "slack", "holds"), rows)
    summary = suite.to_dict()
    summary["seed"] = config.seed
    summary["inject_fault"] = exp.inject_fault
    summary["errors"] = errors
    out.write_json("verify.json", summary)
    out.finalize()

    if not suite.ok:
        logger.error("verify: %d inequality violations", len(suite.violations))
        code = EXIT_VIOLATION
    elif errors:
        code = EXIT_INFRASTRUCTURE
    else:
        code = EXIT_OK
    return CommandResult(code, out.root, summary)


COMMANDS: dict[str, Callable[[ExperimentConfig, int], CommandResult]] = {
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "bisect": cmd_bisect,
    "resolvent": cmd_linanalysis,
    "decay": cmd_linanalysis,
    "timespace": cmd_linanalysis,
    "verify": cmd_verify,
}


# Internal helpers ------------------------------------------------------------
def _lin_cells(config: ExperimentConfig) -> list[tuple[float, int]]:
    exp = config.experiment
    A_values = exp.A_values or (config.params.A,)
    return [(float(A), int(k)) for A in A_values for k in exp.k_values]


def _operators(config: ExperimentConfig) -> list[bool]:
    return [False, True] if config.experiment.nonlocal_term else [False]


def _operator_name(nonlocal_term: bool) -> str:
    return "nonlocal" if nonlocal_term else "local"


def _collect(outcomes: list[CellOutcome], keys: list[dict]) -> tuple[list, list[dict]]:
    values, failures = [], []
    for key, outcome in zip(keys, outcomes):
        if outcome.ok:
            values.append((key, outcome.value))
        else:
            failures.append({**key, "error": outcome.error})
    return values, failures


def _scaling_fit(A_values: list[float], values: list[float], target: float) -> dict | None:
    pairs = [(A, v) for A, v in zip(A_values, values) if v > 0.0 and math.isfinite(v)]
    if len({A for A, _ in pairs}) < 2:
        return None
    fit = fit_loglog([A for A, _ in pairs], [v for _, v in pairs])
    return {**fit.to_dict(), "target": target, "deviation": fit.slope - target}


def _resolvent(config: ExperimentConfig, out: RunDirectory, threads: int) -> dict:
    exp = config.experiment
    spec = LambdaSpec(exp.lambda_neg, exp.lambda_pos, exp.points_per_regime)
    c_prime = exp.c_prime or None

    def cell(pair: tuple[float, int]):
        A, k = pair
        scan = converged_scan(A, k, spec, exp.ny_lin, exp.ny_max) if exp.converge else scan_cell(A, k, spec, exp.ny_lin)
        psi = compute_psi(A, k, exp.mu_points, scan.ny, c_prime)
        return scan, psi

    pairs = _lin_cells(config)
    outcomes = parallel_map(cell, pairs, threads, out.root / CELL_LOG_DIR)
    results, failures = _collect(outcomes, [{"A": A, "k": k} for A, k in pairs])

    resolvent_rows, psi_rows, cells = [], [], []
    for _, (scan, psi) in results:
        resolvent_rows.extend(scan.rows())
        psi_rows.extend((psi.A, psi.k, mu, sigma, "grid") for mu, sigma in zip(psi.mu_grid, psi.sigma_grid))
        psi_rows.append((psi.A, psi.k, psi.mu_star, psi.psi, "refined"))
        cells.append({"resolvent": scan.summary(), "psi": psi.summary()})
    out.write_csv("resolvent.csv", ("A", "k", "lambda", "sigma_min", "regime"), resolvent_rows)
    out.write_csv("psi.csv", ("A", "k", "mu", "sigma_min", "tag"), psi_rows)

    fits = {}
    for k in exp.k_values:
        chosen = sorted(((scan, psi) for _, (scan, psi) in results if scan.k == k), key=lambda item: item[0].A)
        if not chosen:
            continue
        A_values = [scan.A for scan, _ in chosen]
        c_emp = [scan.c_emp for scan, _ in chosen]
        c_spread = spread(c_emp)
        fits[str(k)] = {
            "resolvent_sup_slope": _scaling_fit(A_values, [scan.resolvent_sup for scan, _ in chosen], 0.5),
            "psi_slope": _scaling_fit(A_values, [psi.psi for _, psi in chosen], -0.5),
            "c_emp_spread": c_spread,
            "c_emp_uniform": c_spread < exp.uniformity_factor,
            "worst_regimes": [scan.regime_star for scan, _ in chosen],
        }
    return {"mode": "resolvent", "cells": cells, "fits": fits, "failures": failures}


def _decay(config: ExperimentConfig, out: RunDirectory, threads: int) -> dict:
    exp = config.experiment
    keys = [(A, k, nl) for A, k in _lin_cells(config) for nl in _operators(config)]

    def cell(key: tuple[float, int, bool]):
        A, k, nl = key
        times = default_decay_times(A, k, exp.decay_horizon, exp.decay_samples)
        fit = measure_semigroup_decay(A, k, times, exp.ny_lin, nl)
        psi = compute_psi(A, k, exp.mu_points, exp.ny_lin, nonlocal_term=nl)
        return fit, psi

    outcomes = parallel_map(cell, keys, threads, out.root / CELL_LOG_DIR)
    results, failures = _collect(
        outcomes, [{"A": A, "k": k, "operator": _operator_name(nl)} for A, k, nl in keys]
    )

    rows, cells = [], []
    for _, (fit, psi) in results:
        name = _operator_name(fit.nonlocal_term)
        rows.extend((fit.A, fit.k, name, float(t), float(v)) for t, v in zip(fit.times, fit.log_norms))
        cells.append(
            {
                **fit.summary(),
                "monotone": bool(np.all(np.diff(fit.log_norms) <= 1e-9)),
                "psi": psi.psi,
                "semigroup_bound_holds": fit.semigroup_bound_holds(psi.psi),
            }
        )
    out.write_csv("decay.csv", ("A", "k", "operator", "t", "log_norm"), rows)

    fits = {}
    for k in exp.k_values:
        for nl in _operators(config):
            chosen = sorted(
                (fit for _, (fit, _) in results if fit.k == k and fit.nonlocal_term == nl), key=lambda f: f.A
            )
            if not chosen:
                continue
            fits[f"{k}/{_operator_name(nl)}"] = {
                "rate_slope": _scaling_fit([f.A for f in chosen], [f.rate for f in chosen], -0.5),
                "enhancement_at_max_A": chosen[-1].enhancement,
                "c_prime": [f.c_prime for f in chosen],
            }
    local = [fit.c_prime for _, (fit, _) in results if not fit.nonlocal_term]
    c_prime = min(local) if local else None
    return {
        "mode": "decay",
        "cells": cells,
        "fits": fits,
        "c_prime_estimate": c_prime,
        "a_rate_suggestion": c_prime / 2.0 if c_prime and c_prime > 0 else None,
        "failures": failures,
    }


def _timespace(config: ExperimentConfig, out: RunDirectory, threads: int) -> dict:
    exp = config.experiment
    pairs = _lin_cells(config)
    c_prime = exp.c_prime
    if c_prime <= 0.0:
        estimates = parallel_map(
            lambda pair: measure_semigroup_decay(
                pair[0], pair[1], default_decay_times(pair[0], pair[1], exp.decay_horizon, exp.decay_samples), exp.ny_lin
            ).c_prime,
            pairs,
            threads,
        )
        values = [o.value for o in estimates if o.ok]
        c_prime = min(values) if values else 0.0
    if c_prime > 0.0:
        a_rate = 0.5 * c_prime
    else:
        a_rate = config.params.a_rate
        logger.warning("c' could not be estimated (%.3e); using params.a_rate=%g", c_prime, a_rate)

    forcing = ForcingSpec(exp.forcing_amplitude, exp.forcing_profile)
    keys = [(A, k, nl) for A, k in pairs for nl in _operators(config)]

    def cell(key: tuple[float, int, bool]):
        A, k, nl = key
        return verify_timespace(
            A,
            k,
            forcing,
            a_rate,
            ny=exp.ny_lin,
            horizon=exp.timespace_horizon,
            steps=exp.timespace_steps,
            nonlocal_term=nl,
        )

    outcomes = parallel_map(cell, keys, threads, out.root / CELL_LOG_DIR)
    results, failures = _collect(
        outcomes, [{"A": A, "k": k, "operator": _operator_name(nl)} for A, k, nl in keys]
    )
    rows = [
        (r.A, r.k, _operator_name(r.nonlocal_term), r.a_rate, r.numerator, r.denominator, r.ratio)
        for _, r in results
    ]
    out.write_csv("timespace.csv", ("A", "k", "operator", "a_rate", "numerator", "denominator", "ratio"), rows)

    uniformity = {}
    for k in exp.k_values:
        for nl in _operators(config):
            ratios = [r.ratio for _, r in results if r.k == k and r.nonlocal_term == nl and r.ratio > 0.0]
            if len(ratios) < 2:
                continue
            value = spread(ratios)
            uniformity[f"{k}/{_operator_name(nl)}"] = {
                "spread": value,
                "uniform": value < exp.timespace_uniformity_factor,
            }
    return {
        "mode": "timespace",
        "c_prime": c_prime,
        "a_rate": a_rate,
        "cells": [r.summary() for _, r in results],
        "uniformity": uniformity,
        "failures": failures,
    }
