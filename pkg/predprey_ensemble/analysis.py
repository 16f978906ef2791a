import dataclasses
import itertools
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from predprey_ensemble.errors import (
    FitError,
    InvalidParameterError,
    MeasurementError,
    ResamplingError,
    StateSpaceTooLargeError,
)
from predprey_ensemble.lattice_model import (
    LatticeState,
    ModelParams,
    rates_from_vector,
    scale_params,
    stoichiometry_for,
    uniform,
)
from predprey_ensemble.meanfield import Field, SolverConfig, integrate, solution_to_trajectory
from predprey_ensemble.samplers import EngineConfig, Trajectory, mean_trajectory, run_engine, run_realizations

logger = logging.getLogger(__name__)

DEFAULT_STATE_CAP = 5000
MIN_TIMER_TICKS = 100


@dataclass
class ErrorReport:
    """Errors per sample size with the fitted log-log slope (e ~ C N^slope)."""
    engine: str
    reference: str
    values: List[int]
    e_f: List[float]
    e_g: List[float]
    slope_f: Optional[float] = None
    intercept_f: Optional[float] = None
    slope_g: Optional[float] = None
    intercept_g: Optional[float] = None
    wall_times: List[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CostReport:
    """Wall-clock medians (seconds) per engine and sweep value."""
    sweep: str
    values: List[float]
    repetitions: int
    times: Dict[str, List[List[float]]] = field(default_factory=dict)
    medians: Dict[str, List[float]] = field(default_factory=dict)
    iqr: Dict[str, List[float]] = field(default_factory=dict)
    events: Dict[str, List[int]] = field(default_factory=dict)
    exponents: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExactDistribution:
    """Master-equation probabilities; states rows are (A..., B...) per cell, lexicographic."""
    states: np.ndarray
    probabilities: np.ndarray
    time: float

    def index_of(self, counts: Sequence[int]) -> int:
        matches = np.flatnonzero(np.all(self.states == np.asarray(counts), axis=1))
        if len(matches) == 0:
            raise InvalidParameterError(f"State {tuple(counts)} is not part of the enumeration")
        return int(matches[0])


def _aligned(traj: Trajectory, reference: Trajectory, component: str) -> Tuple[np.ndarray, np.ndarray]:
    """Values of traj and reference on traj's grid, interpolating the reference if needed."""
    if traj.grid_shape != reference.grid_shape:
        raise ResamplingError(f"Grid shapes differ: {traj.grid_shape} vs {reference.grid_shape}")
    ours = traj.flat(component)
    theirs = reference.flat(component)
    if len(traj.times) == len(reference.times) and np.allclose(traj.times, reference.times):
        return ours, theirs
    if traj.times[0] < reference.times[0] - 1e-12 or traj.times[-1] > reference.times[-1] + 1e-12:
        raise ResamplingError("Reference does not cover the compared time range")
    resampled = np.column_stack([np.interp(traj.times, reference.times, theirs[:, c]) for c in range(theirs.shape[1])])
    return ours, resampled


def _sup_error(traj: Trajectory, reference: Trajectory, component: str, mode: str) -> float:
    ours, theirs = _aligned(traj, reference, component)
    if mode == "auto":
        mode = "homogeneous" if traj.n_cells == 1 else "spatial"
    if mode == "homogeneous":
        return float(np.max(np.abs(ours.mean(axis=1) - theirs.mean(axis=1))))
    if mode == "spatial":
        return float(np.mean(np.max(np.abs(ours - theirs), axis=0)))
    raise InvalidParameterError(f"Unknown error mode '{mode}', expected homogeneous | spatial | auto")


def error_vs_meanfield(traj: Trajectory, mf: Trajectory, mode: str = "auto") -> Tuple[float, float]:
    """
    Sup-in-time error against the mean-field solution; spatial mode averages the
    per-cell sup over cells.
    """
    return _sup_error(traj, mf, "f", mode), _sup_error(traj, mf, "g", mode)


def error_vs_direct(traj_a: Trajectory, traj_dm: Trajectory, mode: str = "auto") -> Tuple[float, float]:
    """Same metric between two (realization-mean) trajectories, the second one from the direct method."""
    return _sup_error(traj_a, traj_dm, "f", mode), _sup_error(traj_a, traj_dm, "g", mode)


def fit_power_law(x: Sequence[float], y: Sequence[float]) -> Tuple[float, float]:
    """
    Least-squares fit of log y = intercept + slope log x.

    :raises FitError: fewer than 3 points with positive finite x and y.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    valid = np.isfinite(x) & np.isfinite(y) & (x > 0) & (y > 0)
    if valid.sum() < 3:
        raise FitError(f"Power-law fit needs at least 3 valid points, got {int(valid.sum())}")
    slope, intercept = np.polyfit(np.log(x[valid]), np.log(y[valid]), 1)
    return float(slope), float(intercept)


def _solver_for(cfg: EngineConfig, p: ModelParams, boundary: str) -> SolverConfig:
    stride = cfg.resolved_stride(p)
    substeps = max(1, int(round(stride / 0.02)))
    return SolverConfig(dt=stride / substeps, t_final=cfg.t_final, output_stride=stride, boundary=boundary,
                        epsilon=p.epsilon)


def meanfield_reference(state0: LatticeState, p: ModelParams, cfg: EngineConfig,
                        boundary: str = "zero-flux", solver: Optional[SolverConfig] = None) -> Trajectory:
    """
    Mean-field solution started from the densities of state0 on the engine's output grid.

    :param solver: Step, method and boundary to use; t_final and output_stride follow cfg.
    """
    sp = scale_params(p, homogeneous=state0.is_homogeneous)
    if solver is None:
        solver = _solver_for(cfg, p, boundary)
    else:
        solver = dataclasses.replace(solver, t_final=cfg.t_final, output_stride=cfg.resolved_stride(p))
    fields = integrate(Field.from_state(state0), sp, solver)
    return solution_to_trajectory(fields)


def _initial_state(shape: Tuple[int, ...], n: int, a_frac: float, b_frac: float) -> LatticeState:
    return uniform(shape, n, a_frac, b_frac)


def convergence_study(p: ModelParams, cfg: EngineConfig, n_values: Sequence[int], realizations: int,
                      shape: Tuple[int, ...] = (1,), a_frac: float = 0.25, b_frac: float = 0.5,
                      state_builder: Optional[Callable[[int], LatticeState]] = None,
                      solver: Optional[SolverConfig] = None) -> ErrorReport:
    """
    Error of realization-averaged trajectories against the mean-field solution for each
    N (or Nc) and the fitted log-log slope.

    :param state_builder: Optional N -> initial state; defaults to uniform densities a_frac, b_frac.
    :param solver: Mean-field settings for the reference; zero-flux RK4 on the engine grid by default.
    """
    n_values = sorted(int(n) for n in n_values)
    if len(set(n_values)) < 4 or n_values[-1] < 100 * n_values[0]:
        logger.warning(f"Convergence study over {n_values} spans fewer than 4 values or 2 decades")
    e_f, e_g = [], []
    for n in n_values:
        state0 = state_builder(n) if state_builder else _initial_state(tuple(shape), n, a_frac, b_frac)
        mean = mean_trajectory(run_realizations(state0, p, cfg, realizations))
        reference = meanfield_reference(state0, p, cfg, solver=solver)
        ef, eg = error_vs_meanfield(mean, reference)
        logger.info(f"Convergence point. engine={cfg.engine}, n={n}, e_f={ef:.4g}, e_g={eg:.4g}")
        e_f.append(ef)
        e_g.append(eg)
    slope_f, intercept_f = fit_power_law(n_values, e_f)
    slope_g, intercept_g = fit_power_law(n_values, e_g)
    return ErrorReport(engine=cfg.engine, reference="meanfield", values=n_values, e_f=e_f, e_g=e_g,
                       slope_f=slope_f, intercept_f=intercept_f, slope_g=slope_g, intercept_g=intercept_g)


def accuracy_study(p: ModelParams, cfg: EngineConfig, engines: Sequence[str], n_values: Sequence[int],
                   realizations: int = 100, shape: Tuple[int, ...] = (1,), a_frac: float = 0.25,
                   b_frac: float = 0.5, clock: Callable[[], float] = time.perf_counter) -> Dict[str, ErrorReport]:
    """
    E_f, E_g of each engine's mean trajectory against the direct-method mean, plus the
    mean wall time per realization (the error vs cost trade-off).
    """
    reports = {engine: ErrorReport(engine=engine, reference="direct", values=[], e_f=[], e_g=[])
               for engine in engines}
    for n in sorted(int(n) for n in n_values):
        state0 = _initial_state(tuple(shape), n, a_frac, b_frac)
        reference = mean_trajectory(run_realizations(state0, p, cfg.replace(engine="direct"), realizations))
        for engine in engines:
            start = clock()
            mean = mean_trajectory(run_realizations(state0, p, cfg.replace(engine=engine), realizations))
            elapsed = (clock() - start) / realizations
            ef, eg = error_vs_direct(mean, reference)
            logger.info(f"Accuracy point. engine={engine}, n={n}, E_f={ef:.4g}, E_g={eg:.4g}, wall_time={elapsed:.4g}")
            report = reports[engine]
            report.values.append(n)
            report.e_f.append(ef)
            report.e_g.append(eg)
            report.wall_times.append(elapsed)
    for report in reports.values():
        if len(report.values) >= 3:
            try:
                report.slope_f, report.intercept_f = fit_power_law(report.values, report.e_f)
                report.slope_g, report.intercept_g = fit_power_law(report.values, report.e_g)
            except FitError as e:
                logger.warning(f"No slope for engine={report.engine}: {e}")
    return reports


def _enumerate_states(n_cells: int, nc: int) -> List[Tuple[int, ...]]:
    cell_states = [(a, b) for a in range(nc + 1) for b in range(nc + 1 - a)]
    states = []
    for combo in itertools.product(cell_states, repeat=n_cells):
        states.append(tuple(a for a, _ in combo) + tuple(b for _, b in combo))
    return states


def generator_matrix(state0: LatticeState, p: ModelParams, max_states: int = DEFAULT_STATE_CAP):
    """
    Sparse generator Q (dP/dt = Q P) over every state of state0's lattice, with
    propensities Nc * pi as used by the direct method.

    :raises StateSpaceTooLargeError: more than max_states states.
    """
    nc, shape, n_cells = state0.nc, state0.shape, state0.n_cells
    per_cell = (nc + 1) * (nc + 2) // 2
    size = per_cell ** n_cells
    if size > max_states:
        raise StateSpaceTooLargeError(f"State space has {size} states, above the cap max_states={max_states}")
    states = _enumerate_states(n_cells, nc)
    index = {state: i for i, state in enumerate(states)}
    V = stoichiometry_for(state0).to_dense()
    rows, cols, vals = [], [], []
    for i, state in enumerate(states):
        counts = np.array(state, dtype=np.int64)
        a, b = counts[:n_cells], counts[n_cells:]
        x = np.concatenate([a, b, nc - a - b])
        rates = nc * rates_from_vector(x, shape, nc, p)
        for j in np.flatnonzero(rates > 0):
            y = x + V[j]
            target = index[tuple(y[:2 * n_cells])]
            rows.extend([target, i])
            cols.extend([i, i])
            vals.extend([rates[j], -rates[j]])
    Q = sparse.csr_matrix((vals, (rows, cols)), shape=(size, size))
    return Q, np.array(states, dtype=np.int64)


def master_equation_exact(state0: LatticeState, p: ModelParams, t_final: float, dt: Optional[float] = None,
                          max_states: int = DEFAULT_STATE_CAP) -> ExactDistribution:
    """
    Probability of every lattice state at t_final, integrating the master equation
    with RK4 from a point mass on state0.
    """
    Q, states = generator_matrix(state0, p, max_states)
    x0 = np.concatenate([state0.A.ravel(), state0.B.ravel()])
    P = np.zeros(len(states))
    P[int(np.flatnonzero(np.all(states == x0, axis=1))[0])] = 1.0
    if t_final <= 0:
        return ExactDistribution(states=states, probabilities=P, time=0.0)

    max_rate = float(np.max(np.abs(Q.diagonal()))) if Q.nnz else 0.0
    if dt is None:
        dt = min(0.01, 0.5 / max_rate) if max_rate > 0 else t_final
    n_steps = max(1, int(np.ceil(t_final / dt)))
    h = t_final / n_steps
    for _ in range(n_steps):
        k1 = Q @ P
        k2 = Q @ (P + h / 2 * k1)
        k3 = Q @ (P + h / 2 * k2)
        k4 = Q @ (P + h * k3)
        P = P + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    logger.info(f"Master equation integrated. states={len(states)}, steps={n_steps}, mass={P.sum():.12f}")
    return ExactDistribution(states=states, probabilities=P, time=float(t_final))


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return float(0.5 * np.sum(np.abs(np.asarray(p) - np.asarray(q))))


def final_counts(traj: Trajectory) -> np.ndarray:
    """(A..., B...) at the last recorded time."""
    nc = traj.metadata["nc"]
    a = np.rint(traj.flat("f")[-1] * nc).astype(np.int64)
    b = np.rint(traj.flat("g")[-1] * nc).astype(np.int64)
    return np.concatenate([a, b])


def empirical_distribution(samples: np.ndarray, exact: ExactDistribution) -> np.ndarray:
    """Relative frequencies of sampled (A..., B...) rows over exact's state enumeration."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.int64))
    lookup = {tuple(state): i for i, state in enumerate(exact.states.tolist())}
    counts = np.zeros(len(exact.states))
    for row in samples.tolist():
        counts[lookup[tuple(row)]] += 1
    return counts / len(samples)


def _timed_run(engine: str, state0: LatticeState, p: ModelParams, cfg: EngineConfig,
               clock: Callable[[], float]) -> Tuple[float, int]:
    start = clock()
    traj = run_engine(engine, state0, p, cfg.replace(engine=engine))
    return clock() - start, int(traj.metadata.get("steps", 0))


def benchmark_cost(engines: Sequence[str], p: ModelParams, cfg: EngineConfig, values: Sequence[float],
                   state_builder: Callable[[float], LatticeState], sweep: str = "n",
                   param_builder: Optional[Callable[[float], ModelParams]] = None, repetitions: int = 3,
                   clock: Callable[[], float] = time.perf_counter) -> CostReport:
    """
    Median wall-clock time per engine and sweep value after one untimed warm-up run.

    :param sweep: "n" rebuilds the state per value; "param" rebuilds the parameters with param_builder.
    :raises MeasurementError: a median below 100 clock ticks.
    """
    if repetitions < 3:
        raise InvalidParameterError(f"Benchmarks need at least 3 repetitions, got {repetitions}")
    if sweep not in ("n", "param"):
        raise InvalidParameterError(f"Unknown sweep '{sweep}', expected 'n' or 'param'")
    if sweep == "param" and param_builder is None:
        raise InvalidParameterError("A parameter sweep needs a param_builder")
    resolution = time.get_clock_info("perf_counter").resolution
    report = CostReport(sweep=sweep, values=list(values), repetitions=repetitions)

    for engine in engines:
        report.times[engine], report.medians[engine], report.iqr[engine], report.events[engine] = [], [], [], []
        for value in values:
            state0 = state_builder(value)
            params = param_builder(value) if sweep == "param" else p
            _timed_run(engine, state0, params, cfg, clock)
            runs = [_timed_run(engine, state0, params, cfg, clock) for _ in range(repetitions)]
            times = [elapsed for elapsed, _ in runs]
            events = {count for _, count in runs}
            if len(events) != 1:
                raise MeasurementError(f"Event counts differ across repetitions for engine={engine}, value={value}")
            median = statistics.median(times)
            if median < MIN_TIMER_TICKS * resolution:
                raise MeasurementError(
                    f"Median {median:.3g}s for engine={engine}, value={value} is below {MIN_TIMER_TICKS} clock ticks")
            q1, q3 = np.percentile(times, [25, 75])
            report.times[engine].append(times)
            report.medians[engine].append(median)
            report.iqr[engine].append(float(q3 - q1))
            report.events[engine].append(events.pop())
            logger.info(f"Benchmark point. engine={engine}, value={value}, median={median:.4g}s")
        if sweep == "n" and len(values) >= 3:
            report.exponents[engine], _ = fit_power_law(values, report.medians[engine])
    return report
