"""Experiment runner: config ingestion, orchestration, CSV/manifest emission.

Single-invocation design: one experiment per run, everything derived from one
key/value config file plus the subcommand name.  All floating-point output is
written with repr-faithful precision so identical configs give byte-identical
CSV and manifest files; wall-clock timing goes to a separate ``timing.txt``
so it never perturbs the comparable artifacts.

Exit codes: 0 all built-in checks passed, 1 at least one check failed,
2 invalid configuration (message anchored to file and line), 3 runtime abort
(non-finite state or diverging fixed point).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time

import numpy as np

from memsfde import lq_memory
from memsfde import mean_variance
from memsfde.adjoint import solve_absde
from memsfde.engine import (
    CoefficientSet,
    JumpModel,
    SimulationBlowupError,
    pathwise_cost,
    simulate,
)
from memsfde.grid import SimGrid
from memsfde.lq_memory import FixedPointDivergence
from memsfde.measures import (
    EmpiricalMeasure,
    MeasureSegment,
    cf_dist_sq,
    dirac,
    gauss_weight_rule,
    law_dist_l2_bound,
    m_dist_sq,
    m_norm_sq,
    m_segment_dist_sq,
)
from memsfde.picard import consistency_check, picard_solve

EXIT_OK = 0
EXIT_CHECKS_FAILED = 1
EXIT_BAD_CONFIG = 2
EXIT_RUNTIME_ABORT = 3

SEED_ENV_VAR = "MEMSFDE_SEED"

SQRT_PI = math.sqrt(math.pi)


class ConfigError(Exception):
    """Invalid configuration; rendered as ``path:line: [section] key: msg``."""

    def __init__(self, message, path=None, line=None, section=None, key=None):
        super().__init__(message)
        self.message = message
        self.path = path
        self.line = line
        self.section = section
        self.key = key

    def __str__(self) -> str:
        prefix = ""
        if self.path is not None:
            prefix = f"{self.path}:{self.line if self.line else 0}: "
        where = ""
        if self.section is not None:
            where = f"[{self.section}] "
        if self.key is not None:
            where += f"{self.key}: "
        return f"{prefix}{where}{self.message}"


class ConfigFile:
    """Parsed key/value file with per-entry line numbers for error anchoring."""

    def __init__(self, path: str):
        self.path = path
        self.entries: dict = {}  # (section, key) -> (raw string, line number)
        self.sections: list = []
        self.section_lines: dict = {}

    # -- access ------------------------------------------------------------

    def has(self, section: str, key: str) -> bool:
        return (section, key) in self.entries

    def line(self, section: str, key: str) -> int:
        return self.entries.get((section, key), ("", 0))[1]

    def _error(self, section, key, message):
        raise ConfigError(message, path=self.path, line=self.line(section, key), section=section, key=key)

    def raw(self, section: str, key: str, default=None):
        if (section, key) in self.entries:
            return self.entries[(section, key)][0]
        return default

    def get_str(self, section, key, default=None):
        return self.raw(section, key, default)

    def get_float(self, section, key, default=None) -> float:
        raw = self.raw(section, key)
        if raw is None:
            if default is None:
                self._require(section, key)
            return float(default)
        try:
            return float(raw)
        except ValueError:
            self._error(section, key, f"expected a number, got {raw!r}")

    def get_int(self, section, key, default=None) -> int:
        raw = self.raw(section, key)
        if raw is None:
            if default is None:
                self._require(section, key)
            return int(default)
        try:
            return int(raw, 0)
        except ValueError:
            self._error(section, key, f"expected an integer, got {raw!r}")

    def get_bool(self, section, key, default=None) -> bool:
        raw = self.raw(section, key)
        if raw is None:
            return bool(default)
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        self._error(section, key, f"expected a boolean, got {raw!r}")

    def get_floats(self, section, key, default=()) -> tuple:
        raw = self.raw(section, key)
        if raw is None:
            return tuple(default)
        try:
            return tuple(float(part) for part in raw.split(",") if part.strip())
        except ValueError:
            self._error(section, key, f"expected comma-separated numbers, got {raw!r}")

    def _require(self, section, key):
        line = self.section_lines.get(section, 0)
        raise ConfigError("missing required key", path=self.path, line=line, section=section, key=key)

    def require_float(self, section, key) -> float:
        if not self.has(section, key):
            self._require(section, key)
        return self.get_float(section, key)

    def require_int(self, section, key) -> int:
        if not self.has(section, key):
            self._require(section, key)
        return self.get_int(section, key)

    def check_known(self, section: str, allowed) -> None:
        for (sec, key), (_, line) in self.entries.items():
            if sec == section and key not in allowed:
                raise ConfigError(
                    f"unknown key (expected one of: {', '.join(sorted(allowed))})",
                    path=self.path,
                    line=line,
                    section=section,
                    key=key,
                )

    def echo(self) -> dict:
        """Raw config as nested dict, exactly as written (for the manifest)."""
        out: dict = {}
        for (sec, key), (raw, _) in sorted(self.entries.items()):
            out.setdefault(sec, {})[key] = raw
        return out


def parse_config_file(path: str) -> ConfigFile:
    if not os.path.exists(path):
        raise ConfigError("config file not found", path=path, line=0)
    cfg = ConfigFile(path)
    section = "run"
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, rawline in enumerate(handle, start=1):
            line = rawline.split("#", 1)[0].split(";", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if not section:
                    raise ConfigError("empty section name", path=path, line=lineno)
                cfg.sections.append(section)
                cfg.section_lines.setdefault(section, lineno)
                continue
            if "=" not in line:
                raise ConfigError("expected 'key = value'", path=path, line=lineno, section=section)
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if not key:
                raise ConfigError("empty key", path=path, line=lineno, section=section)
            if (section, key) in cfg.entries:
                raise ConfigError("duplicate key", path=path, line=lineno, section=section, key=key)
            cfg.entries[(section, key)] = (value, lineno)
    return cfg


# ---------------------------------------------------------------------------
# config -> domain objects


GRID_KEYS = ("horizon", "dt", "delta", "particles", "seed")
JUMP_KEYS = ("intensity", "marks", "probs")


def _steps_of(cfg: ConfigFile, section: str, key: str, span: float, dt: float, what: str) -> int:
    ratio = span / dt
    steps = int(round(ratio))
    if steps < 0 or abs(ratio - steps) > 1e-9 * max(1.0, abs(ratio)):
        cfg._error(section, key, f"{what} (got {key}={span!r}, dt={dt!r})")
    return steps


def build_grid(cfg: ConfigFile) -> SimGrid:
    cfg.check_known("grid", GRID_KEYS)
    horizon = cfg.require_float("grid", "horizon")
    dt = cfg.require_float("grid", "dt")
    delta = cfg.require_float("grid", "delta")
    particles = cfg.require_int("grid", "particles")
    seed = cfg.require_int("grid", "seed")

    if dt <= 0:
        cfg._error("grid", "dt", "must be positive")
    if horizon <= 0:
        cfg._error("grid", "horizon", "must be positive")
    if particles < 1:
        cfg._error("grid", "particles", "must be at least 1")

    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            seed = int(env_seed, 0)
        except ValueError:
            raise ConfigError(
                f"expected an integer, got {env_seed!r}",
                path=f"${SEED_ENV_VAR}",
                line=0,
            )
    if not 0 <= seed < 2**64:
        cfg._error("grid", "seed", "must be an unsigned 64-bit integer")

    delta_steps = _steps_of(cfg, "grid", "delta", delta, dt, "must be a non-negative integer multiple of dt")
    _steps_of(cfg, "grid", "horizon", horizon, dt, "must be a positive integer multiple of dt")
    return SimGrid(dt=dt, delta_steps=delta_steps, horizon=horizon, n_particles=particles, seed=seed)


def build_jumps(cfg: ConfigFile) -> JumpModel:
    cfg.check_known("jumps", JUMP_KEYS)
    intensity = cfg.get_float("jumps", "intensity", 0.0)
    if intensity == 0.0:
        return JumpModel.none()
    marks = cfg.get_floats("jumps", "marks", (1.0,))
    probs = cfg.get_floats("jumps", "probs", (1.0,))
    try:
        return JumpModel(intensity=intensity, marks=marks, probs=probs)
    except ValueError as exc:
        line = cfg.line("jumps", "intensity")
        raise ConfigError(str(exc), path=cfg.path, line=line, section="jumps")


LINEAR_KEYS = (
    "xi",
    "drift_const",
    "drift_x",
    "drift_lag",
    "drift_mean",
    "diff_const",
    "diff_x",
    "jump_scale",
)


def build_linear_coefficients(cfg: ConfigFile, section: str, jumps: JumpModel, extra_keys=()):
    """Affine coefficient family used by the simulate/picard subcommands.

    drift     = drift_const + drift_x*X(t) + drift_lag*X(t-delta) + drift_mean*E[X(t)]
    diffusion = diff_const + diff_x*X(t)
    jump      = jump_scale * mark
    """
    cfg.check_known(section, tuple(LINEAR_KEYS) + tuple(extra_keys))
    xi = cfg.get_float(section, "xi", 0.0)
    b_const = cfg.get_float(section, "drift_const", 0.0)
    b_x = cfg.get_float(section, "drift_x", 0.0)
    b_lag = cfg.get_float(section, "drift_lag", 0.0)
    b_mean = cfg.get_float(section, "drift_mean", 0.0)
    s_const = cfg.get_float(section, "diff_const", 0.0)
    s_x = cfg.get_float(section, "diff_x", 0.0)
    g_scale = cfg.get_float(section, "jump_scale", 0.0)

    def drift(t, x, x_seg, law, law_seg, u, u_seg):
        return b_const + b_x * x + b_lag * x_seg[:, -1] + b_mean * law.mean()

    diffusion = None
    if s_const != 0.0 or s_x != 0.0:

        def diffusion(t, x, x_seg, law, law_seg, u, u_seg):
            return s_const + s_x * x

    jump = None
    if jumps.active and g_scale != 0.0:

        def jump(t, x, x_seg, law, law_seg, u, u_seg, mark):
            return g_scale * mark

    coeffs = CoefficientSet(drift=drift, diffusion=diffusion, jump=jump)
    return coeffs, xi


# ---------------------------------------------------------------------------
# deterministic artifact emission


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def write_csv(path: str, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def check(name: str, passed: bool, detail: str) -> dict:
    return {"name": name, "passed": bool(passed), "detail": detail}


class RunResult:
    def __init__(self):
        self.checks: list = []
        self.scalars: dict = {}
        self.artifacts: list = []

    def add_check(self, name, passed, detail):
        self.checks.append(check(name, passed, detail))

    @property
    def all_passed(self) -> bool:
        return all(c["passed"] for c in self.checks)


# ---------------------------------------------------------------------------
# subcommand bodies


def run_simulate(cfg: ConfigFile, grid: SimGrid, jumps: JumpModel, outdir: str) -> RunResult:
    res = RunResult()
    coeffs, xi = build_linear_coefficients(cfg, "simulate", jumps)
    ens = simulate(coeffs, grid, jumps=jumps, xi=xi)
    states = ens.states
    qs = np.quantile(states, [0.05, 0.25, 0.50, 0.75, 0.95], axis=0)
    times = grid.times()
    rows = []
    for k in range(states.shape[1]):
        col = states[:, k]
        var = float(col.var(ddof=1)) if grid.n_particles > 1 else 0.0
        rows.append((times[k], float(col.mean()), var) + tuple(float(q) for q in qs[:, k]))
    path = os.path.join(outdir, "law_stats.csv")
    write_csv(path, ("t", "mean", "var", "q05", "q25", "q50", "q75", "q95"), rows)
    res.artifacts.append("law_stats.csv")

    finite = bool(np.isfinite(states).all())
    res.add_check("finite_states", finite, f"max |X| = {np.abs(states).max():.6g}")
    res.scalars.update(
        terminal_mean=float(states[:, -1].mean()),
        terminal_var=float(states[:, -1].var(ddof=1)) if grid.n_particles > 1 else 0.0,
        path_min=float(states.min()),
        path_max=float(states.max()),
        n_steps=grid.n_steps,
    )
    return res


PICARD_EXTRA_KEYS = ("t0", "tol", "max_iter", "consistency")


def run_picard(cfg: ConfigFile, grid: SimGrid, jumps: JumpModel, outdir: str) -> RunResult:
    res = RunResult()
    coeffs, xi = build_linear_coefficients(cfg, "picard", jumps, extra_keys=PICARD_EXTRA_KEYS)
    t0 = cfg.get_float("picard", "t0", grid.delta if grid.delta > 0 else grid.horizon)
    t0_steps = _steps_of(cfg, "picard", "t0", t0, grid.dt, "must be a positive integer multiple of dt")
    if t0_steps < 1:
        cfg._error("picard", "t0", "must be at least one step")
    if grid.n_steps % t0_steps != 0:
        cfg._error("picard", "t0", f"horizon must be an integer multiple of t0 (t0={t0!r}, horizon={grid.horizon!r})")
    tol = cfg.get_float("picard", "tol", 1e-20)
    max_iter = cfg.get_int("picard", "max_iter", t0_steps + 5)
    want_consistency = cfg.get_bool("picard", "consistency", True)

    ens, report = picard_solve(
        coeffs, grid, jumps=jumps, xi=xi, t0_steps=t0_steps, tol=tol, max_iter=max_iter
    )
    rows = []
    for w, dists in enumerate(report.distances):
        for m, dist in enumerate(dists):
            ratio = report.ratios[w][m - 1] if m >= 1 else float("nan")
            rows.append((w, m + 1, dist, ratio))
    path = os.path.join(outdir, "picard_iters.csv")
    write_csv(path, ("window", "iter", "distance", "ratio"), rows)
    res.artifacts.append("picard_iters.csv")

    worst = report.worst_final_ratio
    res.add_check("converged", report.converged, f"iterations per window: {list(report.iterations)}")
    res.add_check(
        "final_contraction_ratio",
        (not math.isfinite(worst)) or worst < 1.0,
        f"worst final ratio {worst:.6g}",
    )
    if want_consistency:
        gap = consistency_check(coeffs, grid, jumps=jumps, xi=xi, t0_steps=t0_steps, tol=tol, max_iter=max_iter)
        res.add_check("matches_direct_scheme", gap < 1e-8, f"sup mean-square gap {gap:.3e}")
        res.scalars["consistency_gap"] = gap
    res.scalars.update(
        windows=len(report.distances),
        total_iterations=int(sum(report.iterations)),
        worst_final_ratio=worst,
        terminal_mean=float(ens.states[:, -1].mean()),
    )
    return res


NORMS_KEYS = ("rule_points", "point_a", "point_b", "property_sets", "samples")


def run_norms(cfg: ConfigFile, grid: SimGrid, outdir: str) -> RunResult:
    res = RunResult()
    cfg.check_known("norms", NORMS_KEYS)
    n_nodes = cfg.get_int("norms", "rule_points", 64)
    point_a = cfg.get_float("norms", "point_a", 0.7)
    point_b = cfg.get_float("norms", "point_b", -0.3)
    n_sets = cfg.get_int("norms", "property_sets", 100)
    n_samples = cfg.get_int("norms", "samples", 256)
    rule = gauss_weight_rule(n_nodes)
    rng = np.random.Generator(np.random.Philox(key=grid.seed))

    rows = []

    def record(name, computed, expected, tol):
        err = abs(computed - expected)
        ok = err <= tol
        rows.append((name, computed, expected, err, tol, ok))
        res.add_check(name, ok, f"|{computed:.12g} - {expected:.12g}| = {err:.3e} (tol {tol:g})")

    record("dirac_norm_sq", m_norm_sq(dirac(0.0), rule), SQRT_PI, 1e-6)
    gap = point_a - point_b
    record(
        "dirac_pair_dist_sq",
        m_dist_sq(dirac(point_a), dirac(point_b), rule),
        2.0 * SQRT_PI * (1.0 - math.exp(-gap * gap / 4.0)),
        1e-6,
    )
    gauss = EmpiricalMeasure(rng.standard_normal(20_000))
    record("gaussian_cf_dist_sq", cf_dist_sq(gauss, lambda y: np.exp(-y * y / 2.0), rule), 0.0, 1e-3)

    worst_violation = -math.inf
    for _ in range(n_sets):
        base = rng.standard_normal(n_samples) * rng.uniform(0.2, 2.0) + rng.uniform(-1.0, 1.0)
        shift = rng.standard_normal(n_samples) * rng.uniform(0.0, 1.5)
        lhs, rhs = law_dist_l2_bound(base, base + shift, rule)
        worst_violation = max(worst_violation, lhs - rhs)
    ok = worst_violation <= 1e-8
    rows.append(("coupled_sample_violation_max", worst_violation, 0.0, max(worst_violation, 0.0), 1e-8, ok))
    res.add_check(
        "coupled_sample_inequality",
        ok,
        f"max(lhs - rhs) = {worst_violation:.3e} over {n_sets} sets",
    )

    # window variant: trapezoid-in-lag integral of the same inequality
    n_lags = grid.delta_steps + 1
    base = rng.standard_normal((n_samples, n_lags))
    other = base + rng.standard_normal((n_samples, n_lags)) * rng.uniform(0.0, 1.0, size=n_lags)
    seg_a = MeasureSegment([EmpiricalMeasure(base[:, j]) for j in range(n_lags)], grid.dt)
    seg_b = MeasureSegment([EmpiricalMeasure(other[:, j]) for j in range(n_lags)], grid.dt)
    lhs = m_segment_dist_sq(seg_a, seg_b, rule)
    from memsfde.grid import trapezoid_weights

    rhs = SQRT_PI * float(trapezoid_weights(n_lags, grid.dt) @ np.mean((base - other) ** 2, axis=0))
    seg_violation = lhs - rhs
    ok = seg_violation <= 1e-8
    rows.append(("segment_violation", seg_violation, 0.0, max(seg_violation, 0.0), 1e-8, ok))
    res.add_check("segment_inequality", ok, f"lhs - rhs = {seg_violation:.3e}")

    pair = (EmpiricalMeasure(rng.standard_normal(256)), EmpiricalMeasure(rng.standard_normal(256)))
    refine = abs(m_dist_sq(*pair, gauss_weight_rule(n_nodes)) - m_dist_sq(*pair, gauss_weight_rule(2 * n_nodes)))
    record("quadrature_doubling_gap", refine, 0.0, 1e-8)

    write_csv(
        os.path.join(outdir, "norms.csv"),
        ("name", "computed", "expected", "abs_error", "tolerance", "passed"),
        rows,
    )
    res.artifacts.append("norms.csv")
    res.scalars["closed_form_max_abs_error"] = max(r[3] for r in rows[:2])
    return res


MEANVAR_KEYS = ("b0", "sigma0", "gamma0", "target", "xi")


def run_meanvar(cfg: ConfigFile, grid: SimGrid, jumps: JumpModel, outdir: str) -> RunResult:
    res = RunResult()
    cfg.check_known("meanvar", MEANVAR_KEYS)
    spec = mean_variance.MeanVarSpec(
        b0=cfg.get_float("meanvar", "b0", 0.1),
        sigma0=cfg.get_float("meanvar", "sigma0", 0.2),
        gamma0=cfg.get_float("meanvar", "gamma0", 0.05),
        target=cfg.get_float("meanvar", "target", 1.0),
        xi=cfg.get_float("meanvar", "xi", 2.0),
        jumps=jumps,
    )
    if spec.xi <= spec.target:
        cfg._error("meanvar", "xi", f"initial history must exceed the floor (xi={spec.xi!r}, target={spec.target!r})")
    try:
        spec.rate_fn()
    except ValueError as exc:
        raise ConfigError(str(exc), path=cfg.path, line=cfg.section_lines.get("meanvar", 0), section="meanvar")

    sol = mean_variance.solve_closed_form(spec, grid)
    write_csv(os.path.join(outdir, "solution.csv"), ("t", "rate", "phi", "psi"), sol.rows())
    res.artifacts.append("solution.csv")

    ver = mean_variance.verify_adjoint(spec, grid)
    write_csv(os.path.join(outdir, "verification.csv"), ("name", "value"), ver.rows())
    res.artifacts.append("verification.csv")

    j_rows = mean_variance.j_comparison(spec, grid)
    out_rows = []
    dominance = True
    for label, j, se, jgap, gse in j_rows:
        ok = label == "optimal" or jgap >= -3.0 * gse
        dominance = dominance and ok
        out_rows.append((label, j, se, jgap, gse, ok))
    write_csv(
        os.path.join(outdir, "j_comparison.csv"),
        ("control", "J", "stderr", "gap_vs_optimal", "gap_stderr", "passed"),
        out_rows,
    )
    res.artifacts.append("j_comparison.csv")

    res.add_check(
        "first_order_condition",
        ver.foc_residual_max < 1e-12,
        f"max |bracket| = {ver.foc_residual_max:.3e}",
    )
    res.add_check(
        "path_positivity",
        ver.positivity_fraction == 1.0,
        f"fraction above floor = {ver.positivity_fraction:.6f}",
    )
    res.add_check(
        "adjoint_regression_match",
        ver.lsmc_p0_rel_err < 0.02,
        f"initial adjoint relative error = {ver.lsmc_p0_rel_err:.4f}",
    )
    res.add_check("performance_dominance", dominance, "J(optimal) >= J(variant) - 3 paired stderr for all variants")
    res.scalars.update(
        J_optimal=j_rows[0][1],
        rate_initial=float(sol.rate[0]),
        phi_initial=float(sol.phi[0]),
        psi_initial=float(sol.psi[0]),
        foc_residual_max=ver.foc_residual_max,
        p0_drift_z=ver.p0_drift_z,
        lsmc_p0_rel_err=ver.lsmc_p0_rel_err,
        positivity_fraction=ver.positivity_fraction,
    )
    return res


LQ_KEYS = ("kernel", "alpha0", "beta0", "xi", "damping", "tol", "max_iter", "eps", "verify")


def run_lq(cfg: ConfigFile, grid: SimGrid, jumps: JumpModel, outdir: str) -> RunResult:
    res = RunResult()
    cfg.check_known("lq", LQ_KEYS)
    spec = lq_memory.LQSpec(
        kernel=cfg.get_float("lq", "kernel", 1.0),
        alpha0=cfg.get_float("lq", "alpha0", 0.3),
        beta0=cfg.get_float("lq", "beta0", 0.0),
        xi=cfg.get_float("lq", "xi", 0.0),
        jumps=jumps,
    )
    damping = cfg.get_float("lq", "damping", 0.5)
    if not 0.0 < damping <= 1.0:
        cfg._error("lq", "damping", "must be in (0, 1]")
    tol = cfg.get_float("lq", "tol", 1e-4)
    max_iter = cfg.get_int("lq", "max_iter", 50)
    eps = cfg.get_float("lq", "eps", 1e-3)
    want_verify = cfg.get_bool("lq", "verify", True)

    control, adjoint, report = lq_memory.solve_lq(spec, grid, damping=damping, tol=tol, max_iter=max_iter)
    write_csv(
        os.path.join(outdir, "convergence.csv"),
        ("iter", "change"),
        [(i + 1, c) for i, c in enumerate(report.changes)],
    )
    res.artifacts.append("convergence.csv")
    write_csv(
        os.path.join(outdir, "control_path.csv"),
        ("t", "mean", "std"),
        [
            (t, float(control[:, k].mean()), float(control[:, k].std(ddof=1)) if grid.n_particles > 1 else 0.0)
            for k, t in enumerate(grid.times())
        ],
    )
    res.artifacts.append("control_path.csv")

    res.add_check(
        "converged",
        report.converged,
        f"{report.iterations} iterations, last change {report.changes[-1]:.3e}" if report.changes else "no iterations",
    )
    res.scalars.update(
        iterations=report.iterations,
        last_change=report.changes[-1] if report.changes else float("nan"),
    )

    if want_verify:
        ver = lq_memory.verify_lq((control, adjoint, report), spec, grid, eps=eps, damping=damping)
        write_csv(os.path.join(outdir, "verification.csv"), ("name", "value"), ver.rows())
        res.artifacts.append("verification.csv")

        dominance = all(jgap >= -3.0 * gse for label, _, _, jgap, gse in ver.j_rows if label != "solution")
        res.add_check(
            "coupling_residual",
            ver.coupling_residual_max < 1e-3,
            f"max_t |mean(p - u)| = {ver.coupling_residual_max:.3e}",
        )
        res.add_check("performance_concave", ver.parabola_quad < 0.0, f"quadratic coefficient {ver.parabola_quad:.4f}")
        res.add_check(
            "performance_vertex_near_zero",
            abs(ver.parabola_vertex) < 0.05,
            f"vertex at lambda = {ver.parabola_vertex:.3e}",
        )
        res.add_check("performance_dominance", dominance, "J(solution) >= J(shifted) - 3 paired stderr")
        res.scalars.update(
            J=ver.j_rows[0][1],
            coupling_residual_max=ver.coupling_residual_max,
            parabola_quad=ver.parabola_quad,
            parabola_vertex=ver.parabola_vertex,
        )
    else:
        problem = lq_memory.control_problem(spec, grid)
        cost = pathwise_cost(problem.simulate(control), problem.coeffs)
        res.scalars["J"] = float(cost.mean())
    return res


# ---------------------------------------------------------------------------
# selftest: curated analytic oracles, fast and deterministic


def selftest_checks() -> list:
    checks = []

    # closed-form values of the weighted measure norm
    rule = gauss_weight_rule(64)
    err = abs(m_norm_sq(dirac(0.0), rule) - SQRT_PI)
    checks.append(check("dirac_norm_closed_form", err <= 1e-9, f"error {err:.3e}"))
    expected = 2.0 * SQRT_PI * (1.0 - math.exp(-1.0 * 1.0 / 4.0))
    err = abs(m_dist_sq(dirac(1.0), dirac(0.0), rule) - expected)
    checks.append(check("dirac_distance_closed_form", err <= 1e-9, f"error {err:.3e}"))

    # pure delay drift: piecewise-polynomial solution known in closed form,
    # including the scheme's own discrete endpoint value
    grid = SimGrid(dt=0.01, delta_steps=100, horizon=2.0, n_particles=1, seed=0)

    def lag_drift(t, x, x_seg, law, law_seg, u, u_seg):
        return x_seg[:, -1]

    ens = simulate(CoefficientSet(drift=lag_drift), grid, xi=1.0)
    terminal = float(ens.states[0, -1])
    err = abs(terminal - (3.5 - grid.dt / 2.0))
    checks.append(check("delay_drift_terminal", err <= 1e-12, f"X(2) = {terminal!r}, error {err:.3e}"))

    # driverless backward recovery of (p, q) for a Brownian state
    grid = SimGrid(dt=0.02, delta_steps=5, horizon=1.0, n_particles=20_000, seed=5)

    def unit_diffusion(t, x, x_seg, law, law_seg, u, u_seg):
        return np.ones_like(x)

    ens = simulate(CoefficientSet(drift=None, diffusion=unit_diffusion), grid, xi=1.0)
    adj = solve_absde(ens, terminal=lambda x, law: -x)
    p_err = float(np.abs(adj.p0[:, : grid.n_steps + 1].mean(axis=0) + 1.0).max())
    q_err = abs(float(adj.q0[:, :-1].mean()) + 1.0)
    checks.append(check("backward_mean_recovery", p_err <= 0.05, f"max_t |mean p + 1| = {p_err:.4f}"))
    checks.append(check("backward_q_recovery", q_err <= 0.05, f"|mean q + 1| = {q_err:.4f}"))

    # deterministic energy problem: hand-solved fixed point
    grid = SimGrid(dt=0.01, delta_steps=20, horizon=1.0, n_particles=4, seed=1)
    spec = lq_memory.LQSpec(kernel=0.0, alpha0=0.0, beta0=0.0, xi=1.0)
    control, _, report = lq_memory.solve_lq(spec, grid, tol=1e-12)
    u_err = float(np.abs(control + 0.5).max())
    problem = lq_memory.control_problem(spec, grid)
    j_val = float(pathwise_cost(problem.simulate(control), problem.coeffs).mean())
    checks.append(
        check(
            "deterministic_energy_fixed_point",
            report.converged and u_err <= 1e-6 and abs(j_val + 0.25) <= 1e-6,
            f"max |u + 0.5| = {u_err:.3e}, J = {j_val!r}",
        )
    )

    # delayed wealth problem: closed-form rate and discount factor
    grid = SimGrid(dt=0.01, delta_steps=10, horizon=1.0, n_particles=4, seed=1)
    mv_spec = mean_variance.MeanVarSpec()
    sol = mean_variance.solve_closed_form(mv_spec, grid)
    rate_err = abs(float(sol.rate[0]) - 0.25)
    phi_err = abs(float(sol.phi[0]) + math.exp(-0.25))
    checks.append(check("wealth_rate_closed_form", rate_err <= 1e-12, f"rate(0) error {rate_err:.3e}"))
    checks.append(check("wealth_discount_closed_form", phi_err <= 1e-9, f"phi(0) error {phi_err:.3e}"))

    return checks


# ---------------------------------------------------------------------------
# entry point


def _emit(outdir, problem, cfg, grid, threads, seed_overridden, result, started):
    os.makedirs(outdir, exist_ok=True)
    manifest = {
        "problem": problem,
        "package": "memsfde",
        "config": cfg.echo() if cfg is not None else {},
        "grid": None
        if grid is None
        else {
            "horizon": grid.horizon,
            "dt": grid.dt,
            "delta": grid.delta,
            "particles": grid.n_particles,
            "seed": grid.seed,
        },
        "effective_seed": None if grid is None else grid.seed,
        "seed_overridden": seed_overridden,
        "threads": threads,
        "scalars": {k: result.scalars[k] for k in sorted(result.scalars)},
        "checks": result.checks,
        "checks_passed": result.all_passed,
        "artifacts": sorted(result.artifacts),
        "timing_file": "timing.txt",
    }
    with open(os.path.join(outdir, "manifest.json"), "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")
    with open(os.path.join(outdir, "timing.txt"), "w", encoding="utf-8") as handle:
        handle.write(f"wall_seconds={time.perf_counter() - started:.3f}\n")


def _print_checks(result: RunResult) -> None:
    for c in result.checks:
        tag = "PASS" if c["passed"] else "FAIL"
        print(f"[{tag}] {c['name']}: {c['detail']}")


RUNNERS = {
    "simulate": run_simulate,
    "picard": run_picard,
    "norms": run_norms,
    "meanvar": run_meanvar,
    "lq": run_lq,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="memsfde",
        description="Monte Carlo experiments for memory mean-field SFDE control problems.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("simulate", "particle simulation of an affine memory SFDE; emits law statistics"),
        ("picard", "frozen-noise fixed-point solve with contraction diagnostics"),
        ("norms", "closed-form and property checks of the weighted measure distance"),
        ("meanvar", "delayed-wealth variance minimization and its verification battery"),
        ("lq", "distributed-delay energy problem solved by forward-backward iteration"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="key/value experiment configuration file")
        p.add_argument("--out", default=None, help="output directory (default: from config or out/<command>)")
        p.add_argument("--threads", type=int, default=None, help="worker threads (recorded; kernels are vectorized)")
    p = sub.add_parser("selftest", help="run the built-in analytic oracle suite")
    p.add_argument("--out", default=None, help="optional directory for a manifest of the results")
    p.add_argument("--threads", type=int, default=None)

    args = parser.parse_args(argv)
    started = time.perf_counter()

    if args.command == "selftest":
        threads = args.threads if args.threads is not None else 1
        if threads < 1:
            print("--threads: must be at least 1", file=sys.stderr)
            return EXIT_BAD_CONFIG
        result = RunResult()
        result.checks = selftest_checks()
        _print_checks(result)
        if args.out:
            empty = ConfigFile("<selftest>")
            _emit(args.out, "selftest", empty, None, threads, False, result, started)
            print(f"wrote {os.path.join(args.out, 'manifest.json')}")
        print(f"selftest: {'ok' if result.all_passed else 'FAILED'}")
        return EXIT_OK if result.all_passed else EXIT_CHECKS_FAILED

    try:
        cfg = parse_config_file(args.config)
        known_sections = {"run", "grid", "jumps", "output", args.command}
        for sec in set(s for s, _ in cfg.entries):
            if sec not in known_sections:
                raise ConfigError(
                    f"section does not apply to subcommand {args.command!r}",
                    path=cfg.path,
                    line=cfg.section_lines.get(sec, 0),
                    section=sec,
                )
        cfg.check_known("run", ("problem", "threads"))
        cfg.check_known("output", ("dir",))
        problem = cfg.get_str("run", "problem")
        if problem is not None and problem != args.command:
            cfg._error("run", "problem", f"config is for {problem!r} but subcommand is {args.command!r}")
        threads = args.threads if args.threads is not None else cfg.get_int("run", "threads", 1)
        if threads < 1:
            cfg._error("run", "threads", "must be at least 1")
        grid = build_grid(cfg)
        seed_overridden = os.environ.get(SEED_ENV_VAR) is not None
        jumps = build_jumps(cfg)
        outdir = args.out or cfg.get_str("output", "dir") or os.path.join("out", args.command)

        os.makedirs(outdir, exist_ok=True)
        if args.command == "norms":
            result = run_norms(cfg, grid, outdir)
        else:
            result = RUNNERS[args.command](cfg, grid, jumps, outdir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except (SimulationBlowupError, FixedPointDivergence) as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return EXIT_RUNTIME_ABORT

    _emit(outdir, args.command, cfg, grid, threads, seed_overridden, result, started)
    _print_checks(result)
    print(f"wrote {len(result.artifacts) + 2} files to {outdir}")
    print(f"status: {'ok' if result.all_passed else 'checks-failed'}")
    return EXIT_OK if result.all_passed else EXIT_CHECKS_FAILED


def console_main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(main())


if __name__ == "__main__":
    console_main()
