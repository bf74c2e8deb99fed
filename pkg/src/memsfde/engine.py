"""N-particle Euler scheme for one-dimensional controlled dynamics with
path-segment memory, interaction through the running empirical law, and
compensated compound-Poisson jumps.

Coefficients are plain callables evaluated vectorized across the ensemble:

    drift(t, x, x_seg, law, law_seg, u, u_seg)            -> (N,) or scalar
    diffusion(t, x, x_seg, law, law_seg, u, u_seg)        -> (N,) or scalar
    jump(t, x, x_seg, law, law_seg, u, u_seg, mark)       -> (N,) or scalar
    running_cost(t, x, x_seg, law, law_seg, u, u_seg)     -> (N,) or scalar
    terminal_cost(x, law)                                 -> (N,) or scalar

where ``x`` is the (N,) state, ``x_seg`` the (N, delta_steps + 1) backward
window with column k equal to the state at lag ``k * dt``, ``law`` the current
empirical law of the ensemble, ``law_seg`` its backward segment, and ``u`` /
``u_seg`` the control and its backward window.  ``None`` stands for zero.

One Euler step with law inputs frozen at the step's left endpoint:

    X[k+1] = X[k] + drift dt + diffusion dW
             + sum over realized jump marks of jump(mark)
             - (integral of jump against the jump measure) dt

The law the particles interact through is the ensemble's own empirical law, so
all mean-field quantities carry the usual O(1/sqrt(N)) particle-approximation
error on top of the Euler bias.

The same window integrator serves the direct scheme (the read and write paths
alias) and the fixed-point solver in :mod:`memsfde.picard` (coefficients read a
frozen previous iterate while increments accumulate on the new one).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from memsfde.grid import BROWNIAN, JUMPS, SimGrid, step_generator, trapezoid_weights
from memsfde.measures import EmpiricalMeasure, MeasureSegment
from memsfde.segments import GridPath

__all__ = [
    "MeshMismatchError",
    "SimulationBlowupError",
    "JumpModel",
    "CoefficientSet",
    "ParticleEnsemble",
    "ControlProblem",
    "simulate",
    "law_at",
    "law_segment",
    "performance",
    "pathwise_cost",
    "as_control",
    "combine_controls",
]


class MeshMismatchError(ValueError):
    """Operands live on incompatible meshes."""


class SimulationBlowupError(RuntimeError):
    """State became non-finite during integration."""

    def __init__(self, step: int, time: float, n_bad: int):
        self.step = step
        self.time = time
        self.n_bad = n_bad
        super().__init__(
            f"non-finite state for {n_bad} particle(s) at step {step} (t={time:g}); "
            "reduce dt or check coefficient growth"
        )


@dataclass(frozen=True)
class JumpModel:
    """Finite-activity compound Poisson noise with a discrete mark law.

    ``intensity`` is the total jump rate per unit time; a realized jump carries
    mark ``marks[a]`` with probability ``probs[a]``.  Keeping the mark law
    discrete makes every integral against the jump measure a finite sum
    (``nu_integral``), so compensators and moment formulas are exact, and lets
    the per-step draw be a vector of Poisson counts per mark.
    """

    intensity: float = 0.0
    marks: tuple = (1.0,)
    probs: tuple = (1.0,)

    def __post_init__(self) -> None:
        if self.intensity < 0.0:
            raise ValueError("intensity must be >= 0")
        marks = tuple(float(z) for z in self.marks)
        probs = tuple(float(p) for p in self.probs)
        if len(marks) != len(probs) or not marks:
            raise ValueError("marks and probs must be non-empty and match")
        if any(p < 0.0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError("mark probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "probs", probs)

    @staticmethod
    def none() -> "JumpModel":
        return JumpModel(0.0)

    @property
    def active(self) -> bool:
        return self.intensity > 0.0

    def nu_integral(self, fn):
        """Integral of ``fn(mark)`` against the jump measure (rate included)."""
        total = 0.0
        for z, p in zip(self.marks, self.probs):
            total = total + p * fn(z)
        return self.intensity * total


@dataclass(frozen=True)
class CoefficientSet:
    """Dynamics and cost of one problem; ``None`` entries mean zero."""

    drift: Callable | None = None
    diffusion: Callable | None = None
    jump: Callable | None = None
    running_cost: Callable | None = None
    terminal_cost: Callable | None = None
    lipschitz: float | None = None  # declared constant, reporting only


# ---------------------------------------------------------------------------
# controls


class _Control:
    def value(self, k: int, t: float, x, x_seg, law) -> np.ndarray:
        raise NotImplementedError


class _ZeroControl(_Control):
    def value(self, k, t, x, x_seg, law):
        return np.zeros_like(x)


class _ConstControl(_Control):
    def __init__(self, c: float):
        self.c = float(c)

    def value(self, k, t, x, x_seg, law):
        return np.full_like(x, self.c)


class _ArrayControl(_Control):
    """Open-loop values on the [0, T] mesh: shape (K+1,) shared or (N, K+1)."""

    def __init__(self, values: np.ndarray):
        self.values = np.asarray(values, dtype=float)

    def value(self, k, t, x, x_seg, law):
        if self.values.ndim == 1:
            return np.full_like(x, self.values[k])
        return self.values[:, k]


class _CallableControl(_Control):
    def __init__(self, fn):
        self.fn = fn

    def value(self, k, t, x, x_seg, law):
        out = self.fn(t, x, x_seg, law)
        return np.broadcast_to(np.asarray(out, dtype=float), x.shape)


class _SumControl(_Control):
    def __init__(self, parts):
        self.parts = parts  # list of (control, scale)

    def value(self, k, t, x, x_seg, law):
        out = np.zeros_like(x)
        for ctrl, scale in self.parts:
            out = out + scale * ctrl.value(k, t, x, x_seg, law)
        return out


def as_control(obj) -> _Control:
    """Normalize scalars, mesh arrays, and feedback callables to a control.

    Callables receive ``(t, x, x_seg, law)`` and return per-particle values.
    """
    if obj is None:
        return _ZeroControl()
    if isinstance(obj, _Control):
        return obj
    if np.isscalar(obj):
        return _ConstControl(obj)
    if isinstance(obj, np.ndarray):
        return _ArrayControl(obj)
    if callable(obj):
        return _CallableControl(obj)
    raise TypeError(f"cannot interpret {type(obj).__name__} as a control")


def combine_controls(base, direction, scale: float) -> _Control:
    """Control ``base + scale * direction`` (both may be feedback rules)."""
    return _SumControl([(as_control(base), 1.0), (as_control(direction), float(scale))])


# ---------------------------------------------------------------------------
# ensemble


@dataclass
class ParticleEnsemble:
    """Simulated particle system plus the noise that drove it.

    ``paths`` covers ``[-delta, T]`` (column ``delta_steps + k`` is time
    ``k dt``); ``controls_full`` covers the same mesh with the pre-horizon part
    holding the control history.  Brownian increments and per-mark jump counts
    are kept so the adjoint solver can build regression features from the same
    noise that moved the particles.
    """

    grid: SimGrid
    paths: np.ndarray
    controls_full: np.ndarray
    brownian: np.ndarray
    jump_counts: np.ndarray | None
    jumps: JumpModel

    @property
    def n_particles(self) -> int:
        return self.paths.shape[0]

    @property
    def controls(self) -> np.ndarray:
        """Applied control on the [0, T] mesh, shape (N, n_steps + 1)."""
        return self.controls_full[:, self.grid.delta_steps :]

    @property
    def states(self) -> np.ndarray:
        """State on the [0, T] mesh, shape (N, n_steps + 1)."""
        return self.paths[:, self.grid.delta_steps :]

    def state_column(self, k: int) -> np.ndarray:
        return self.paths[:, self.grid.delta_steps + k]

    def backward_window(self, k: int) -> np.ndarray:
        """State window (N, delta_steps + 1); column j is the state at lag j dt."""
        idx = self.grid.delta_steps + k
        return self.paths[:, idx - self.grid.delta_steps : idx + 1][:, ::-1]

    def control_window(self, k: int) -> np.ndarray:
        idx = self.grid.delta_steps + k
        return self.controls_full[:, idx - self.grid.delta_steps : idx + 1][:, ::-1]

    def path(self, i: int) -> GridPath:
        return GridPath(
            values=self.paths[i].copy(),
            dt=self.grid.dt,
            t0=-self.grid.delta,
            delta_steps=self.grid.delta_steps,
        )


def _materialize_history(xi, grid: SimGrid) -> np.ndarray:
    """Initial data on the mesh of [-delta, 0], time-ordered, shape (d + 1,)."""
    d = grid.delta_steps
    ts = grid.times_full()[: d + 1]
    if xi is None:
        return np.zeros(d + 1)
    if np.isscalar(xi):
        return np.full(d + 1, float(xi))
    if callable(xi):
        return np.array([float(xi(t)) for t in ts])
    arr = np.asarray(xi, dtype=float)
    if arr.shape != (d + 1,):
        raise MeshMismatchError(
            f"initial history must have delta_steps + 1 = {d + 1} values, got shape {arr.shape}"
        )
    return arr


def _law_segment_from(paths: np.ndarray, idx: int, d: int, dt: float) -> MeasureSegment:
    return MeasureSegment(
        [EmpiricalMeasure(paths[:, idx - j]) for j in range(d + 1)], dt
    )


def _euler_window(
    coeffs: CoefficientSet,
    grid: SimGrid,
    jumps: JumpModel,
    ctrl: _Control,
    read_paths: np.ndarray,
    write_paths: np.ndarray,
    ucols: np.ndarray,
    k_start: int,
    k_stop: int,
    brownian: np.ndarray,
    jump_counts: np.ndarray | None,
) -> None:
    """Advance ``write_paths`` over steps ``k_start..k_stop-1``.

    Coefficient inputs (state, segments, laws, control) are read from
    ``read_paths``; increments accumulate on ``write_paths``.  Passing the same
    array for both gives the ordinary explicit scheme.
    """
    d, dt, N = grid.delta_steps, grid.dt, grid.n_particles
    sq = math.sqrt(dt)
    use_jumps = jumps.active and coeffs.jump is not None
    mark_rates = np.array(jumps.probs) * jumps.intensity * dt if use_jumps else None

    for k in range(k_start, k_stop):
        idx = d + k
        t = k * dt
        x = read_paths[:, idx]
        x_seg = read_paths[:, idx - d : idx + 1][:, ::-1]
        law = EmpiricalMeasure(x)
        law_seg = _law_segment_from(read_paths, idx, d, dt)
        u = ctrl.value(k, t, x, x_seg, law)
        ucols[:, idx] = u
        u_seg = ucols[:, idx - d : idx + 1][:, ::-1]

        nxt = write_paths[:, idx].copy()
        if coeffs.drift is not None:
            nxt += dt * np.asarray(coeffs.drift(t, x, x_seg, law, law_seg, u, u_seg))
        if coeffs.diffusion is not None:
            dw = step_generator(grid.seed, k, BROWNIAN).standard_normal(N) * sq
            brownian[:, k] = dw
            nxt += np.asarray(coeffs.diffusion(t, x, x_seg, law, law_seg, u, u_seg)) * dw
        if use_jumps:
            counts = step_generator(grid.seed, k, JUMPS).poisson(mark_rates, size=(N, len(jumps.marks)))
            if jump_counts is not None:
                jump_counts[:, k, :] = counts
            for a, (z, p) in enumerate(zip(jumps.marks, jumps.probs)):
                g = np.asarray(coeffs.jump(t, x, x_seg, law, law_seg, u, u_seg, z))
                nxt += counts[:, a] * g - jumps.intensity * p * g * dt

        bad = ~np.isfinite(nxt)
        if bad.any():
            raise SimulationBlowupError(step=k, time=t, n_bad=int(bad.sum()))
        write_paths[:, idx + 1] = nxt


def simulate(
    coeffs: CoefficientSet,
    grid: SimGrid,
    jumps: JumpModel | None = None,
    xi=0.0,
    control=None,
    control_history=0.0,
) -> ParticleEnsemble:
    """Run the N-particle scheme over [0, T] from initial history ``xi``.

    ``xi`` may be a scalar, a callable of time, or a time-ordered array on the
    mesh of [-delta, 0].  ``control_history`` fills the control's memory window
    before time zero (scalar or (delta_steps,) array).  Identical ``grid``
    (including seed) and inputs reproduce the ensemble bit for bit.
    """
    jumps = jumps if jumps is not None else JumpModel.none()
    d, K, N = grid.delta_steps, grid.n_steps, grid.n_particles
    n_total = d + K + 1

    paths = np.empty((N, n_total))
    paths[:, : d + 1] = _materialize_history(xi, grid)

    ucols = np.zeros((N, n_total))
    if d > 0:
        hist = np.asarray(control_history, dtype=float)
        if hist.ndim == 0:
            ucols[:, :d] = float(hist)
        elif hist.shape == (d,):
            ucols[:, :d] = hist
        else:
            raise MeshMismatchError(f"control history must be scalar or shape ({d},)")

    ctrl = as_control(control)
    brownian = np.zeros((N, K))
    use_jumps = jumps.active and coeffs.jump is not None
    jump_counts = np.zeros((N, K, len(jumps.marks)), dtype=np.int64) if use_jumps else None

    _euler_window(coeffs, grid, jumps, ctrl, paths, paths, ucols, 0, K, brownian, jump_counts)

    # record the control at the horizon (cost evaluation needs it)
    idx = d + K
    x = paths[:, idx]
    x_seg = paths[:, idx - d : idx + 1][:, ::-1]
    ucols[:, idx] = ctrl.value(K, grid.horizon, x, x_seg, EmpiricalMeasure(x))

    return ParticleEnsemble(
        grid=grid,
        paths=paths,
        controls_full=ucols,
        brownian=brownian,
        jump_counts=jump_counts,
        jumps=jumps,
    )


def law_at(ens: ParticleEnsemble, t: float) -> EmpiricalMeasure:
    """Empirical law of the ensemble at mesh time t in [0, T]."""
    k = ens.grid.index_of(t)
    return EmpiricalMeasure(ens.state_column(k))


def law_segment(ens: ParticleEnsemble, t: float) -> MeasureSegment:
    """Backward law segment at t: entry j is the law at lag j dt."""
    k = ens.grid.index_of(t)
    return _law_segment_from(ens.paths, ens.grid.delta_steps + k, ens.grid.delta_steps, ens.grid.dt)


def pathwise_cost(ens: ParticleEnsemble, coeffs: CoefficientSet) -> np.ndarray:
    """Per-particle cost: trapezoid of the running cost over [0, T] plus the
    terminal cost, evaluated along the stored states and controls."""
    grid = ens.grid
    d, K, dt = grid.delta_steps, grid.n_steps, grid.dt
    total = np.zeros(ens.n_particles)
    if coeffs.running_cost is not None:
        w = trapezoid_weights(K + 1, dt)
        for k in range(K + 1):
            idx = d + k
            t = k * dt
            x = ens.paths[:, idx]
            x_seg = ens.backward_window(k)
            law = EmpiricalMeasure(x)
            law_seg = _law_segment_from(ens.paths, idx, d, dt)
            u = ens.controls_full[:, idx]
            u_seg = ens.control_window(k)
            total += w[k] * np.asarray(coeffs.running_cost(t, x, x_seg, law, law_seg, u, u_seg))
    if coeffs.terminal_cost is not None:
        xT = ens.state_column(K)
        total += np.asarray(coeffs.terminal_cost(xT, EmpiricalMeasure(xT)))
    return total


def performance(ens: ParticleEnsemble, coeffs: CoefficientSet) -> tuple[float, float]:
    """Monte Carlo estimate of the cost functional: ``(mean, standard error)``."""
    cost = pathwise_cost(ens, coeffs)
    n = cost.size
    if n == 1:
        return float(cost[0]), 0.0
    return float(cost.mean()), float(cost.std(ddof=1) / math.sqrt(n))


@dataclass(frozen=True)
class ControlProblem:
    """Bundle of dynamics, mesh, noise and initial data; controls vary."""

    coeffs: CoefficientSet
    grid: SimGrid
    jumps: JumpModel = field(default_factory=JumpModel.none)
    xi: object = 0.0
    control_history: object = 0.0

    def simulate(self, control=None) -> ParticleEnsemble:
        return simulate(
            self.coeffs,
            self.grid,
            jumps=self.jumps,
            xi=self.xi,
            control=control,
            control_history=self.control_history,
        )

    def performance(self, control=None) -> tuple[float, float]:
        return performance(self.simulate(control), self.coeffs)
