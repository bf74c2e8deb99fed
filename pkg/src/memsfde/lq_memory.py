"""Linear-quadratic control of a state with distributed-delay feedback.

Dynamics and objective:

    dX(t) = [ integral over [0, delta] of kernel(s) X(t - s) ds + u(t) ] dt
            + alpha0(t) dB(t) + beta0(t) z JUMPS,
    J(u)  = -E[ X(T)^2 + integral of u(t)^2 dt ] / 2   (maximize).

The first-order condition couples the control to the adjoint, u = p0, where
p0 solves an advanced backward equation: its driver at time t is the
conditional expectation of the kernel-weighted integral of p0 over [t, t+delta]
(zero past the horizon), with terminal value -X(T).  No closed form exists in
general, so ``solve_lq`` runs a damped fixed-point iteration — forward
simulate with the current control, backward least-squares solve, blend the
control toward the new p0 — and ``verify_lq`` interrogates the result:
coupling residual, idempotence, first-order stationarity in several
directions, paired performance comparisons, and an exact-quadratic parabola
fit in the perturbation size.

Two sanity anchors have hand-computable solutions: with no kernel and no
noise the optimal control for x0 = 1, T = 1 is the constant u = -0.5 with
J = -0.25 exactly, and with no kernel but unit Brownian noise the optimal
control satisfies u(0) = -x0/(1 + T).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from memsfde.adjoint import (
    AdjointTriple,
    SegmentFunctional,
    default_basis,
    solve_absde,
    stationarity_gap,
)
from memsfde.engine import (
    CoefficientSet,
    ControlProblem,
    JumpModel,
    combine_controls,
    pathwise_cost,
    performance,
)
from memsfde.grid import SimGrid, trapezoid_weights

__all__ = [
    "LQSpec",
    "FBSDEIterationReport",
    "FixedPointDivergence",
    "LQVerification",
    "solve_lq",
    "verify_lq",
    "control_problem",
    "lq_basis",
]


class FixedPointDivergence(RuntimeError):
    """Control changes grew for several consecutive fixed-point sweeps."""


def _as_time_fn(v) -> Callable[[float], float]:
    if callable(v):
        return v
    c = float(v)
    return lambda t: c


def _is_zero_const(v) -> bool:
    return not callable(v) and float(v) == 0.0


@dataclass(frozen=True)
class LQSpec:
    """Delay kernel on [0, delta], additive noise loadings, initial history.

    The default is a noise-excited regulator (zero initial history): the
    state law is then symmetric under flipping the driving noise, which the
    optimality diagnostics inherit, so their estimates carry no systematic
    offset for deterministic perturbation directions.
    """

    kernel: object = 1.0  # constant, callable(s), or mesh array (delta_steps+1,)
    alpha0: object = 0.3
    beta0: object = 0.0
    xi: object = 0.0
    jumps: JumpModel = field(default_factory=JumpModel.none)

    def kernel_values(self, grid: SimGrid) -> np.ndarray:
        d, dt = grid.delta_steps, grid.dt
        if callable(self.kernel):
            return np.array([float(self.kernel(j * dt)) for j in range(d + 1)])
        arr = np.asarray(self.kernel, dtype=float)
        if arr.ndim == 0:
            return np.full(d + 1, float(arr))
        if arr.shape != (d + 1,):
            raise ValueError(f"kernel mesh must have delta_steps + 1 = {d + 1} values")
        return arr


def _delay_weights(spec: LQSpec, grid: SimGrid) -> np.ndarray:
    """Quadrature-folded kernel: backward window @ weights = delay integral."""
    return trapezoid_weights(grid.delta_steps + 1, grid.dt) * spec.kernel_values(grid)


def control_problem(spec: LQSpec, grid: SimGrid) -> ControlProblem:
    dw = _delay_weights(spec, grid)
    a0 = _as_time_fn(spec.alpha0)
    b0 = _as_time_fn(spec.beta0)

    def drift(t, x, x_seg, law, law_seg, u, u_seg):
        return x_seg @ dw + u

    def diffusion(t, x, x_seg, law, law_seg, u, u_seg):
        return np.full_like(x, a0(t))

    def jump(t, x, x_seg, law, law_seg, u, u_seg, z):
        return np.full_like(x, b0(t) * z)

    coeffs = CoefficientSet(
        drift=drift,
        diffusion=None if _is_zero_const(spec.alpha0) else diffusion,
        jump=None if (_is_zero_const(spec.beta0) or not spec.jumps.active) else jump,
        running_cost=lambda t, x, x_seg, law, law_seg, u, u_seg: -0.5 * u * u,
        terminal_cost=lambda x, law: -0.5 * x * x,
    )
    return ControlProblem(coeffs=coeffs, grid=grid, jumps=spec.jumps, xi=spec.xi)


def lq_basis(spec: LQSpec, grid: SimGrid):
    """Regression basis: the default polynomial features plus the running
    delay integral — the statistic that drives the dynamics."""
    dw = _delay_weights(spec, grid)

    def basis(ens, k):
        phi = default_basis(ens, k)
        return np.column_stack([phi, ens.backward_window(k) @ dw])

    return basis


@dataclass(frozen=True)
class FBSDEIterationReport:
    """Trace of the damped control iteration: per-sweep control change
    (root-mean-square over particles of the mesh-L2 norm of the update)."""

    changes: tuple
    damping: float
    tol: float
    converged: bool

    @property
    def iterations(self) -> int:
        return len(self.changes)


def solve_lq(
    spec: LQSpec,
    grid: SimGrid,
    damping: float = 0.5,
    tol: float = 1e-4,
    max_iter: int = 50,
    basis=None,
):
    """Damped fixed-point solve of the coupled forward-backward system.

    Returns ``(control, adjoint, report)``: the per-particle control on the
    [0, T] mesh (shape (N, n_steps + 1)), the final backward solve, and the
    iteration trace.  Noise is frozen across sweeps (counter-based streams),
    so the iteration is a deterministic map on control arrays.  Five
    consecutive growing sweeps abort with :class:`FixedPointDivergence`.
    """
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must lie in (0, 1]")
    problem = control_problem(spec, grid)
    K, N = grid.n_steps, grid.n_particles
    wq = trapezoid_weights(K + 1, grid.dt)
    basis_fn = basis if basis is not None else lq_basis(spec, grid)

    kern = spec.kernel_values(grid)
    if np.any(kern != 0.0):
        functional = SegmentFunctional.averaging(kern, grid.delta_steps, grid.dt)

        def driver(ctx, k):
            return ctx.advanced_average(k, functional, extension="zero")

    else:
        driver = None

    control = np.zeros((N, K + 1))
    changes: list[float] = []
    converged = False
    growing = 0
    adjoint: AdjointTriple | None = None

    for _ in range(max_iter):
        ens = problem.simulate(control)
        adjoint = solve_absde(ens, terminal=lambda x, law: -x, driver=driver, basis=basis_fn)
        new_control = (1.0 - damping) * control + damping * adjoint.p0_on_horizon()
        delta = new_control - control
        change = float(np.sqrt(np.mean((delta * delta) @ wq)))
        if changes and change > changes[-1]:
            growing += 1
            if growing >= 5:
                raise FixedPointDivergence(
                    f"control change grew for {growing} consecutive sweeps (last: {change:g})"
                )
        else:
            growing = 0
        changes.append(change)
        control = new_control
        if change < tol:
            converged = True
            break

    report = FBSDEIterationReport(changes=tuple(changes), damping=damping, tol=tol, converged=converged)
    return control, adjoint, report


@dataclass(frozen=True)
class LQVerification:
    coupling_residual_max: float
    idempotence_change: float
    stationarity: tuple  # (label, gap, stderr)
    j_rows: tuple  # (label, J, stderr, gap_vs_solution, gap_stderr)
    parabola_quad: float
    parabola_vertex: float
    parabola_rel_residual: float

    def rows(self):
        yield "coupling_residual_max", self.coupling_residual_max
        yield "idempotence_change", self.idempotence_change
        for label, gap, se in self.stationarity:
            yield f"stationarity_{label}", gap
            yield f"stationarity_{label}_stderr", se
        for label, j, se, gap, gse in self.j_rows:
            yield f"J_{label}", j
            yield f"J_{label}_gap", gap
        yield "parabola_quad", self.parabola_quad
        yield "parabola_vertex", self.parabola_vertex
        yield "parabola_rel_residual", self.parabola_rel_residual


def verify_lq(
    solution,
    spec: LQSpec,
    grid: SimGrid,
    eps: float = 1e-3,
    lambdas=(0.2, -0.2, 0.5, -0.5),
    damping: float = 0.5,
    basis=None,
) -> LQVerification:
    """First-order and pairwise optimality interrogation of a solved control.

    ``solution`` is the (control, adjoint, report) triple from ``solve_lq``.
    The parabola diagnostics exploit that for frozen noise the performance is
    exactly quadratic in the size of an additive perturbation, so a quadratic
    fit over five sizes must be essentially interpolation: its curvature is
    negative and its vertex sits at the distance of the solved control from
    the true discrete optimizer in that direction.
    """
    control, adjoint, report = solution
    problem = control_problem(spec, grid)
    K, N = grid.n_steps, grid.n_particles
    wq = trapezoid_weights(K + 1, grid.dt)
    basis_fn = basis if basis is not None else lq_basis(spec, grid)

    residual = np.abs((adjoint.p0_on_horizon() - control).mean(axis=0))
    coupling_residual_max = float(residual.max())

    # idempotence: one more forward+backward sweep barely moves the control
    kern = spec.kernel_values(grid)
    if np.any(kern != 0.0):
        functional = SegmentFunctional.averaging(kern, grid.delta_steps, grid.dt)

        def driver(ctx, k):
            return ctx.advanced_average(k, functional, extension="zero")

    else:
        driver = None
    ens = problem.simulate(control)
    adj2 = solve_absde(ens, terminal=lambda x, law: -x, driver=driver, basis=basis_fn)
    delta = damping * (adj2.p0_on_horizon() - control)
    idempotence_change = float(np.sqrt(np.mean((delta * delta) @ wq)))

    half = grid.horizon / 2.0
    directions = (
        ("const_1", 1.0),
        ("late_half", lambda t, x, x_seg, law: 1.0 if t >= half else 0.0),
        ("delayed_state", lambda t, x, x_seg, law: x_seg[:, -1]),
    )
    stationarity = tuple(
        (label, *stationarity_gap(problem, control, direction, eps=eps))
        for label, direction in directions
    )

    base_cost = pathwise_cost(ens, problem.coeffs)
    j_rows = [
        (
            "solution",
            float(base_cost.mean()),
            float(base_cost.std(ddof=1) / math.sqrt(N)) if N > 1 else 0.0,
            0.0,
            0.0,
        )
    ]
    for lam in lambdas:
        cost = pathwise_cost(problem.simulate(combine_controls(control, 1.0, lam)), problem.coeffs)
        diff = base_cost - cost
        j_rows.append(
            (
                f"shift_{lam:+g}",
                float(cost.mean()),
                float(cost.std(ddof=1) / math.sqrt(N)) if N > 1 else 0.0,
                float(diff.mean()),
                float(diff.std(ddof=1) / math.sqrt(N)) if N > 1 else 0.0,
            )
        )

    lam_grid = np.array([-0.5, -0.25, 0.0, 0.25, 0.5])
    js = np.array(
        [
            performance(problem.simulate(combine_controls(control, 1.0, float(l))), problem.coeffs)[0]
            for l in lam_grid
        ]
    )
    coefs = np.polyfit(lam_grid, js, 2)
    fit = np.polyval(coefs, lam_grid)
    scale = max(float(np.max(js) - np.min(js)), 1e-300)
    rel_residual = float(np.max(np.abs(fit - js)) / scale)
    quad = float(coefs[0])
    vertex = float(-coefs[1] / (2.0 * coefs[0])) if coefs[0] != 0.0 else math.inf

    return LQVerification(
        coupling_residual_max=coupling_residual_max,
        idempotence_change=idempotence_change,
        stationarity=stationarity,
        j_rows=tuple(j_rows),
        parabola_quad=quad,
        parabola_vertex=vertex,
        parabola_rel_residual=rel_residual,
    )
