"""Hamiltonian and adjoint machinery for memory mean-field control problems.

Four pieces live here:

* ``hamiltonian`` — the scalar pairing of dynamics with adjoint variables,
  ``running_cost + p0*drift + q0*diffusion + integral(r0*jump)``, zero past the
  horizon.  (The pairing against the law's time derivative is carried as a
  structural slot; every implemented problem has no law dependence in the
  coefficients, so only the zero functional is ever instantiated.)
* ``SegmentFunctional`` / ``riesz_advanced`` / ``riesz_duality_check`` — bounded
  linear functionals on memory segments (an averaging kernel on [0, delta], or
  evaluation at a fixed lag) and the change-of-variables identity that converts
  "functional applied to the forward window of p, integrated against Y" into
  "p(t) times the functional applied to the backward window of Y".  Both sides
  use zero extension outside [0, T]; the identity is exact in continuous time
  and O(dt) on the mesh.
* ``solve_absde`` — least-squares Monte Carlo backward sweep for the adjoint
  triple (p0, q0, r0).  The equation is *advanced*: the driver at time t may
  read the (already computed) solution on [t, t+delta].  Conditioning on the
  time-t information is done by regression onto a state basis; the Brownian and
  compensated-jump loadings come out as the regression coefficients of the
  basis interacted with the corresponding noise increments.
* ``max_condition_gap`` / ``stationarity_gap`` — numerical optimality tests:
  how much the Hamiltonian can be improved over a candidate control grid, and
  the common-random-number central difference of the performance functional in
  a perturbation direction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from memsfde.engine import (
    CoefficientSet,
    ControlProblem,
    JumpModel,
    ParticleEnsemble,
    as_control,
    combine_controls,
    pathwise_cost,
)
from memsfde.grid import SimGrid, trapezoid_weights
from memsfde.measures import EmpiricalMeasure, MeasureSegment, dirac
from memsfde.segments import GridPath

__all__ = [
    "SegmentFunctional",
    "AdjointTriple",
    "HamiltonianInputs",
    "hamiltonian",
    "riesz_advanced",
    "riesz_duality_check",
    "solve_absde",
    "default_basis",
    "SweepContext",
    "max_condition_gap",
    "stationarity_gap",
]

log = logging.getLogger("memsfde.adjoint")


# ---------------------------------------------------------------------------
# segment functionals and the advanced Riesz representation


@dataclass(frozen=True)
class SegmentFunctional:
    """Bounded linear functional on segments over [0, delta].

    ``averaging``: seg -> integral of kernel(r) * seg(r) dr (trapezoid on the
    mesh).  ``evaluation``: seg -> seg(point).  These are the two concrete
    functional derivatives the solved problems need.
    """

    kind: str
    dt: float
    kernel: np.ndarray | None = None  # (delta_steps + 1,) mesh values
    point_steps: int | None = None

    @staticmethod
    def averaging(kernel, delta_steps: int, dt: float) -> "SegmentFunctional":
        if callable(kernel):
            vals = np.array([float(kernel(j * dt)) for j in range(delta_steps + 1)])
        else:
            vals = np.asarray(kernel, dtype=float)
            if vals.shape != (delta_steps + 1,):
                raise ValueError(
                    f"kernel needs delta_steps + 1 = {delta_steps + 1} mesh values, got {vals.shape}"
                )
        return SegmentFunctional(kind="averaging", dt=float(dt), kernel=vals)

    @staticmethod
    def evaluation(point: float, dt: float) -> "SegmentFunctional":
        steps = point / dt
        if abs(steps - round(steps)) > 1e-6:
            raise ValueError(f"evaluation point {point} is not on the dt={dt} mesh")
        if point < 0.0:
            raise ValueError("evaluation point must lie in [0, delta]")
        return SegmentFunctional(kind="evaluation", dt=float(dt), point_steps=int(round(steps)))

    @property
    def delta_steps(self) -> int:
        if self.kind == "averaging":
            return len(self.kernel) - 1
        return self.point_steps

    def apply(self, seg_values: np.ndarray) -> np.ndarray | float:
        """Apply to segment values laid out along the last axis."""
        vals = np.asarray(seg_values, dtype=float)
        if self.kind == "evaluation":
            if vals.shape[-1] <= self.point_steps:
                raise ValueError("segment too short for the evaluation point")
            return vals[..., self.point_steps]
        if vals.shape[-1] != len(self.kernel):
            raise ValueError(
                f"segment has {vals.shape[-1]} mesh values, kernel expects {len(self.kernel)}"
            )
        w = trapezoid_weights(len(self.kernel), self.dt)
        return vals @ (w * self.kernel)


def _forward_values(path: GridPath, t: float, n_ahead: int) -> np.ndarray:
    """path(t + k dt) for k = 0..n_ahead, zero-extended past the path's end."""
    k0 = path.index_of(t)
    out = np.zeros(n_ahead + 1)
    last = len(path.values) - 1
    stop = min(n_ahead, last - k0)
    if stop >= 0:
        out[: stop + 1] = path.values[k0 : k0 + stop + 1]
    return out


def riesz_advanced(f: SegmentFunctional, p_path: GridPath, t: float) -> float:
    """Apply the functional to the forward window of ``p_path`` at time t.

    Reads past the stored path use zero extension, matching the convention
    that adjoint loadings vanish beyond the horizon; paths that already carry
    a terminal extension simply get read as stored.
    """
    vals = _forward_values(p_path, t, f.delta_steps)
    return float(f.apply(vals))


def riesz_duality_check(
    f: SegmentFunctional, p_path: GridPath, y_path: GridPath
) -> tuple[float, float]:
    """Both sides of the forward/backward pairing identity.

    lhs = integral over [0, T] of (f applied to p's forward window) * Y(t);
    rhs = integral over [0, T] of p(t) * (f applied to Y's backward window),
    with Y treated as zero outside [0, T] and p as zero past its stored end.
    The two agree exactly in continuous time and to O(dt) under the trapezoid
    rule used here.
    """
    if abs(p_path.dt - y_path.dt) > 1e-12:
        raise ValueError("paths must share the mesh step")
    if abs(y_path.t0) > 1e-12 or abs(p_path.t0) > 1e-12:
        raise ValueError("duality check expects paths starting at t = 0")
    y = y_path.values
    n = len(y)  # mesh of [0, T]
    dt = y_path.dt
    d = f.delta_steps
    w = trapezoid_weights(n, dt)

    lhs = 0.0
    for k in range(n):
        lhs += w[k] * y[k] * float(f.apply(_forward_values(p_path, k * dt, d)))

    p = np.zeros(n)
    m = min(n, len(p_path.values))
    p[:m] = p_path.values[:m]
    rhs = 0.0
    for k in range(n):
        back = np.zeros(d + 1)
        stop = min(d, k)
        back[: stop + 1] = y[k - stop : k + 1][::-1]
        rhs += w[k] * p[k] * float(f.apply(back))
    return lhs, rhs


# ---------------------------------------------------------------------------
# Hamiltonian


@dataclass
class HamiltonianInputs:
    """Arguments of the Hamiltonian at one (t, state, control, adjoint) point.

    Scalars or (N,) arrays are accepted throughout; ``law`` defaults to the
    Dirac mass at ``x`` and segments default to constant extensions, which is
    what pointwise evaluations want.  ``r0`` may be a scalar/array (a loading
    constant in the jump mark) or a callable of the mark.  ``p1`` is the
    pairing against the law derivative ``law_rate``; no implemented problem
    has law-dependent coefficients, so only the zero functional is used.
    """

    t: float
    x: object
    p0: object
    q0: object = 0.0
    r0: object = 0.0
    x_seg: np.ndarray | None = None
    law: EmpiricalMeasure | None = None
    law_seg: MeasureSegment | None = None
    u: object = 0.0
    u_seg: np.ndarray | None = None
    p1: object = None
    law_rate: object = None


def hamiltonian(
    coeffs: CoefficientSet,
    inputs: HamiltonianInputs,
    jumps: JumpModel | None = None,
    horizon: float = math.inf,
) -> float | np.ndarray:
    """Running cost plus adjoint-weighted dynamics; identically 0 past the horizon."""
    if inputs.t > horizon + 1e-12:
        return 0.0
    jumps = jumps if jumps is not None else JumpModel.none()

    scalar_in = np.isscalar(inputs.x)
    x = np.atleast_1d(np.asarray(inputs.x, dtype=float))
    n = x.shape[0]

    if inputs.x_seg is not None:
        x_seg = np.asarray(inputs.x_seg, dtype=float)
        if x_seg.ndim == 1:
            x_seg = np.broadcast_to(x_seg, (n, x_seg.shape[0]))
    else:
        x_seg = x[:, None]
    d = x_seg.shape[1] - 1

    if inputs.law is not None:
        law = inputs.law
    else:
        law = dirac(float(x[0])) if n == 1 else EmpiricalMeasure(x)
    # constant-extension default (unit lag mesh); pointwise evaluations only
    law_seg = inputs.law_seg if inputs.law_seg is not None else MeasureSegment([law] * (d + 1), 1.0)

    u = np.broadcast_to(np.asarray(inputs.u, dtype=float), x.shape)
    if inputs.u_seg is not None:
        u_seg = np.asarray(inputs.u_seg, dtype=float)
        if u_seg.ndim == 1:
            u_seg = np.broadcast_to(u_seg, (n, u_seg.shape[0]))
    else:
        u_seg = np.broadcast_to(u[:, None], (n, d + 1))

    t = inputs.t
    total = np.zeros(n)
    if coeffs.running_cost is not None:
        total = total + np.asarray(coeffs.running_cost(t, x, x_seg, law, law_seg, u, u_seg))
    if coeffs.drift is not None:
        total = total + np.asarray(inputs.p0) * np.asarray(
            coeffs.drift(t, x, x_seg, law, law_seg, u, u_seg)
        )
    if coeffs.diffusion is not None:
        total = total + np.asarray(inputs.q0) * np.asarray(
            coeffs.diffusion(t, x, x_seg, law, law_seg, u, u_seg)
        )
    if coeffs.jump is not None and jumps.active:
        r0 = inputs.r0
        if callable(r0):
            total = total + jumps.nu_integral(
                lambda z: np.asarray(r0(z)) * np.asarray(coeffs.jump(t, x, x_seg, law, law_seg, u, u_seg, z))
            )
        else:
            total = total + np.asarray(r0) * jumps.nu_integral(
                lambda z: np.asarray(coeffs.jump(t, x, x_seg, law, law_seg, u, u_seg, z))
            )
    if inputs.p1 is not None:
        total = total + inputs.p1(inputs.law_rate)
    return float(total[0]) if scalar_in else total


# ---------------------------------------------------------------------------
# advanced BSDE backward solver (least-squares Monte Carlo)


@dataclass
class AdjointTriple:
    """Regression-valued adjoint processes on the simulation mesh.

    ``p0`` covers [0, T + delta] (columns past the horizon repeat the terminal
    value, particle by particle); ``q0`` and ``r0`` are per-step noise loadings
    on [0, T] whose final column is zero — they vanish past the horizon.
    ``mean_stderr[k]`` is the Monte Carlo standard error of the regression
    target's mean at step k, the right yardstick for drift/level tests.
    """

    grid: SimGrid
    p0: np.ndarray  # (N, n_steps + delta_steps + 1)
    q0: np.ndarray  # (N, n_steps + 1)
    r0: np.ndarray  # (N, n_steps + 1)
    mean_stderr: np.ndarray  # (n_steps + 1,)
    deficient_steps: tuple = ()

    @property
    def n_particles(self) -> int:
        return self.p0.shape[0]

    def p0_on_horizon(self) -> np.ndarray:
        """View of p0 restricted to the [0, T] mesh."""
        return self.p0[:, : self.grid.n_steps + 1]

    def p0_path(self, i: int) -> GridPath:
        return GridPath(values=self.p0[i].copy(), dt=self.grid.dt, t0=0.0, delta_steps=self.grid.delta_steps)

    def check_terminal_conventions(self) -> bool:
        K, d = self.grid.n_steps, self.grid.delta_steps
        ext_ok = bool(np.all(self.p0[:, K:] == self.p0[:, K][:, None]))
        tail_ok = bool(np.all(self.q0[:, K] == 0.0) and np.all(self.r0[:, K] == 0.0))
        return ext_ok and tail_ok


def default_basis(ens: ParticleEnsemble, k: int) -> np.ndarray:
    """Polynomial regression features {1, X(t), X(t - delta), X^2, X * X_delta}."""
    x = ens.state_column(k)
    xd = ens.backward_window(k)[:, -1]
    return np.column_stack([np.ones_like(x), x, xd, x * x, x * xd])


class SweepContext:
    """Backward-sweep state handed to ABSDE drivers.

    Drivers may read the solution strictly ahead of the current step (that is
    what makes the equation advanced); reads are logged so tests can assert
    the support and extension conventions.  ``extension="terminal"`` reads the
    stored terminal extension of p0; ``extension="zero"`` treats everything
    past the horizon as zero — the convention under which the duality identity
    behind the driver is exact.
    """

    def __init__(self, ens: ParticleEnsemble, p0: np.ndarray, q0: np.ndarray, r0: np.ndarray):
        self.ens = ens
        self.grid = ens.grid
        self._p0 = p0
        self._q0 = q0
        self._r0 = r0
        self.read_log: list[tuple[int, int, str]] = []

    def _future(self, arr, k: int, ahead: int, extension: str, name: str):
        if ahead < 1:
            raise ValueError(f"{name} at step {k}: drivers may only read strictly ahead (got offset {ahead})")
        if ahead > self.grid.delta_steps:
            raise ValueError(f"{name} at step {k}: read offset {ahead} exceeds the memory window")
        self.read_log.append((k, ahead, extension))
        j = k + ahead
        K = self.grid.n_steps
        if extension == "zero" and j > K:
            return np.zeros(arr.shape[0])
        j = min(j, arr.shape[1] - 1)
        return arr[:, j]

    def p0_future(self, k: int, ahead: int, extension: str = "terminal") -> np.ndarray:
        return self._future(self._p0, k, ahead, extension, "p0")

    def q0_future(self, k: int, ahead: int) -> np.ndarray:
        return self._future(self._q0, k, ahead, "zero", "q0")

    def r0_future(self, k: int, ahead: int) -> np.ndarray:
        return self._future(self._r0, k, ahead, "zero", "r0")

    def advanced_average(self, k: int, f: SegmentFunctional, extension: str = "zero") -> np.ndarray:
        """Kernel-weighted integral of future p0 over the memory window.

        Trapezoid in the lag variable; the lag-0 endpoint is read one step
        ahead to keep the sweep explicit (an O(dt^3) perturbation of the
        step's integral).
        """
        if f.kind == "evaluation":
            return self.p0_future(k, f.point_steps, extension)
        d = f.delta_steps
        w = trapezoid_weights(d + 1, f.dt) * f.kernel
        out = w[0] * self.p0_future(k, 1, extension)
        for j in range(1, d + 1):
            out = out + w[j] * self.p0_future(k, j, extension)
        return out


def solve_absde(
    ens: ParticleEnsemble,
    terminal,
    driver=None,
    basis=None,
    return_context: bool = False,
):
    """Backward least-squares sweep for the adjoint triple along an ensemble.

    ``terminal(x_T, law_T)`` gives p0 at the horizon.  ``driver(ctx, k)``
    returns the per-particle dt-coefficient at step k; it may read the
    already-computed future of (p0, q0, r0) through ``ctx``.  Each step
    regresses ``p0[k+1] + dt * driver`` onto the basis augmented by basis
    interactions with the step's Brownian and compensated-jump increments;
    the plain-basis fit is p0 at k and the interaction fits are the noise
    loadings q0, r0.  Rank-deficient designs fall back to the least-norm
    solution (for a collapsed basis that is exactly the ensemble mean) and
    are reported via ``deficient_steps`` plus a logged warning.
    """
    grid = ens.grid
    d, K, N, dt = grid.delta_steps, grid.n_steps, grid.n_particles, grid.dt
    basis = basis if basis is not None else default_basis

    p0 = np.zeros((N, K + d + 1))
    q0 = np.zeros((N, K + 1))
    r0 = np.zeros((N, K + 1))
    mean_stderr = np.zeros(K + 1)

    xT = ens.state_column(K)
    pT = np.broadcast_to(np.asarray(terminal(xT, EmpiricalMeasure(xT)), dtype=float), (N,))
    p0[:, K:] = pT[:, None]

    use_jumps = ens.jump_counts is not None
    lam_dt = ens.jumps.intensity * dt if use_jumps else 0.0
    ctx = SweepContext(ens, p0, q0, r0)
    deficient: list[int] = []

    for k in range(K - 1, -1, -1):
        target = p0[:, k + 1].copy()
        if driver is not None:
            target = target + dt * np.asarray(driver(ctx, k))
        phi = basis(ens, k)
        m = phi.shape[1]
        blocks = [phi, phi * ens.brownian[:, k][:, None]]
        if use_jumps:
            dn = ens.jump_counts[:, k, :].sum(axis=1) - lam_dt
            blocks.append(phi * dn[:, None])
        design = np.hstack(blocks)
        beta, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
        if rank < design.shape[1]:
            deficient.append(k)
        p0[:, k] = phi @ beta[:m]
        q0[:, k] = phi @ beta[m : 2 * m]
        if use_jumps:
            r0[:, k] = phi @ beta[2 * m : 3 * m]
        mean_stderr[k] = target.std(ddof=1) / math.sqrt(N) if N > 1 else 0.0

    if deficient:
        log.warning(
            "rank-deficient regression at %d of %d steps; least-norm/ensemble-mean fallback used",
            len(deficient),
            K,
        )
    triple = AdjointTriple(
        grid=grid,
        p0=p0,
        q0=q0,
        r0=r0,
        mean_stderr=mean_stderr,
        deficient_steps=tuple(reversed(deficient)),
    )
    return (triple, ctx) if return_context else triple


# ---------------------------------------------------------------------------
# optimality checkers


def _ensemble_inputs(ens: ParticleEnsemble, k: int):
    x = ens.state_column(k)
    x_seg = ens.backward_window(k)
    law = EmpiricalMeasure(x)
    d, dt = ens.grid.delta_steps, ens.grid.dt
    idx = d + k
    law_seg = MeasureSegment([EmpiricalMeasure(ens.paths[:, idx - j]) for j in range(d + 1)], dt)
    return x, x_seg, law, law_seg


def max_condition_gap(
    coeffs: CoefficientSet,
    ens: ParticleEnsemble,
    adj: AdjointTriple,
    candidate_grid,
    jumps: JumpModel | None = None,
    filtration: str = "trivial",
    basis=None,
    step_stride: int = 1,
) -> tuple[float, float]:
    """Worst improvement of the conditional Hamiltonian over a control grid.

    For each mesh time, each candidate value replaces the applied control in
    the Hamiltonian (the control's memory segment stays at its realized
    values) and the conditional expectation is taken under the trivial
    filtration (plain ensemble mean of the paired difference) or the full
    one (per-particle regression-fitted difference, maximized pointwise).
    Returns the largest mean gap over times and candidates together with the
    standard error at the maximizing pair — for an optimal control the gap
    should vanish within noise; a genuinely improvable control yields a gap
    many standard errors above zero.
    """
    candidates = [float(c) for c in candidate_grid]
    if not candidates:
        raise ValueError("candidate grid must be non-empty")
    jumps = jumps if jumps is not None else ens.jumps
    basis = basis if basis is not None else default_basis
    grid = ens.grid
    best_gap, best_se = -math.inf, 0.0

    for k in range(0, grid.n_steps, step_stride):
        x, x_seg, law, law_seg = _ensemble_inputs(ens, k)
        u_seg = ens.control_window(k)
        common = dict(
            t=k * grid.dt,
            x=x,
            x_seg=x_seg,
            law=law,
            law_seg=law_seg,
            u_seg=u_seg,
            p0=adj.p0[:, k],
            q0=adj.q0[:, k],
            r0=adj.r0[:, k],
        )
        h_used = hamiltonian(coeffs, HamiltonianInputs(u=ens.controls[:, k], **common), jumps, grid.horizon)
        if filtration == "trivial":
            for c in candidates:
                diff = hamiltonian(coeffs, HamiltonianInputs(u=c, **common), jumps, grid.horizon) - h_used
                gap = float(np.mean(diff))
                if gap > best_gap:
                    best_gap = gap
                    best_se = float(np.std(diff, ddof=1) / math.sqrt(len(diff))) if len(diff) > 1 else 0.0
        elif filtration == "full":
            phi = basis(ens, k)
            fitted = []
            for c in candidates:
                diff = hamiltonian(coeffs, HamiltonianInputs(u=c, **common), jumps, grid.horizon) - h_used
                beta, _, _, _ = np.linalg.lstsq(phi, diff, rcond=None)
                fitted.append(phi @ beta)
            pointwise = np.max(np.stack(fitted), axis=0)
            gap = float(pointwise.mean())
            if gap > best_gap:
                best_gap = gap
                best_se = float(pointwise.std(ddof=1) / math.sqrt(len(pointwise))) if len(pointwise) > 1 else 0.0
        else:
            raise ValueError("filtration must be 'trivial' or 'full'")
    return best_gap, best_se


def stationarity_gap(
    problem: ControlProblem,
    control,
    direction,
    eps: float = 1e-3,
) -> tuple[float, float]:
    """Central difference of the performance in a perturbation direction.

    Both perturbed controls are simulated under common random numbers (the
    per-step counter streams depend only on the grid seed), so the paired
    per-particle cost difference has tiny variance and the returned standard
    error is an honest yardstick: at an optimum |gap| should be within a few
    standard errors of zero (plus an O(eps^2) curvature remainder).
    """
    plus = problem.simulate(combine_controls(control, direction, +eps))
    minus = problem.simulate(combine_controls(control, direction, -eps))
    per_path = (pathwise_cost(plus, problem.coeffs) - pathwise_cost(minus, problem.coeffs)) / (2.0 * eps)
    n = per_path.size
    if n == 1:
        return float(per_path[0]), 0.0
    return float(per_path.mean()), float(per_path.std(ddof=1) / math.sqrt(n))
