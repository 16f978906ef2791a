import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from predprey_ensemble.errors import (
    DegenerateSampleError,
    InvalidDimensionError,
    InvalidParameterError,
    LeapFailureError,
    ResamplingError,
)
from predprey_ensemble.lattice_model import (
    PROBABILITY_TOLERANCE,
    LatticeState,
    ModelParams,
    neighbor_table,
    rates_from_vector,
    stoichiometry_for,
)

logger = logging.getLogger(__name__)

ENGINES = ("direct", "classic-mc", "tau-leaping", "ensemble")
KERNELS = ("agents", "counts")

# Slot codes of the materialised component arrays.
EMPTY, PREDATOR, PREY = 0, 1, 2

GRID_TOLERANCE = 1e-9
CLASSIC_BLOCK = 1 << 16


@dataclass(frozen=True)
class EngineConfig:
    """
    Run settings shared by the four engines.

    :param engine: direct | classic-mc | tau-leaping | ensemble.
    :param tau: Fixed step (ensemble, classic-mc) or initial leap; None uses ModelParams.tau.
    :param epsilon_leap: Absolute bound on the propensity change accepted per leap.
    :param record_stride: Output interval; None records every tau.
    :param kernel: Ensemble kernel, "agents" (component arrays) or "counts" (homogeneous only).
    """
    engine: str = "ensemble"
    seed: int = 0
    t_final: float = 100.0
    tau: Optional[float] = None
    epsilon_leap: float = 0.5
    record_stride: Optional[float] = None
    kernel: str = "agents"
    tau_min: float = 1e-12
    n_jobs: int = 1

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise InvalidParameterError(f"Unknown engine '{self.engine}', expected one of {ENGINES}")
        if self.kernel not in KERNELS:
            raise InvalidParameterError(f"Unknown ensemble kernel '{self.kernel}', expected one of {KERNELS}")
        if not self.t_final > 0:
            raise InvalidParameterError(f"t_final={self.t_final} must be > 0")
        if self.tau is not None and not self.tau > 0:
            raise InvalidParameterError(f"tau={self.tau} must be > 0")
        if not 0.0 < self.epsilon_leap < 1.0:
            raise InvalidParameterError(f"epsilon_leap={self.epsilon_leap} must lie in (0, 1)")
        if self.record_stride is not None and not self.record_stride > 0:
            raise InvalidParameterError(f"record_stride={self.record_stride} must be > 0")
        if not self.tau_min > 0:
            raise InvalidParameterError(f"tau_min={self.tau_min} must be > 0")

    def resolved_tau(self, p: ModelParams) -> float:
        return self.tau if self.tau is not None else p.tau

    def resolved_stride(self, p: ModelParams) -> float:
        return self.record_stride if self.record_stride is not None else self.resolved_tau(p)

    def replace(self, **changes) -> "EngineConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class Trajectory:
    """
    Densities f = A/Nc and g = B/Nc on a time grid; f and g have shape (n_times, *grid).
    Mean trajectories also carry the realization standard deviations f_std, g_std.
    """
    times: np.ndarray
    f: np.ndarray
    g: np.ndarray
    metadata: dict = field(default_factory=dict)
    f_std: Optional[np.ndarray] = None
    g_std: Optional[np.ndarray] = None

    @property
    def grid_shape(self):
        return self.f.shape[1:]

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.grid_shape))

    def cell_mean(self, component: str = "f") -> np.ndarray:
        values = self.f if component == "f" else self.g
        return values.reshape(len(self.times), -1).mean(axis=1)

    def flat(self, component: str = "f") -> np.ndarray:
        """Values as (n_times, n_cells)."""
        values = self.f if component == "f" else self.g
        return values.reshape(len(self.times), -1)

    def is_uniform_grid(self) -> bool:
        if len(self.times) < 2:
            return True
        steps = np.diff(self.times)
        return bool(np.allclose(steps, steps[0], rtol=1e-7, atol=1e-12))

    def check_invariants(self):
        if np.any(np.diff(self.times) <= 0):
            raise InvalidParameterError("Trajectory times are not strictly increasing")
        if np.any(self.f < 0) or np.any(self.g < 0) or np.any(self.f + self.g > 1.0 + 1e-12):
            raise InvalidParameterError("Trajectory densities leave the simplex 0 <= f, g; f + g <= 1")


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox stream for one realization."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def record_times(t_final: float, stride: float) -> np.ndarray:
    k = int(math.floor(t_final / stride + GRID_TOLERANCE))
    return stride * np.arange(k + 1)


def steps_per_record(stride: float, tau: float) -> int:
    every = int(round(stride / tau))
    if every < 1 or abs(every * tau - stride) > GRID_TOLERANCE * max(stride, 1.0):
        raise InvalidParameterError(f"record_stride={stride} must be a positive multiple of tau={tau}")
    return every


def _check(probabilities: dict, tau: float):
    for name, value in probabilities.items():
        if value > 1.0 + PROBABILITY_TOLERANCE:
            raise InvalidParameterError(f"Probability overflow: {name} probability {value:.6g} > 1 for tau={tau}")


def _metadata(engine: str, p: ModelParams, cfg: EngineConfig, state0: LatticeState, **extra) -> dict:
    meta = {
        "engine": engine,
        "seed": int(cfg.seed),
        "params_hash": p.params_hash(),
        "nc": state0.nc,
        "grid_shape": list(state0.shape),
    }
    meta.update(extra)
    return meta


class _Recorder:
    """Fills a fixed output grid with piecewise-constant state values."""

    def __init__(self, times: np.ndarray, shape, nc: int):
        self.times = times
        self.shape = tuple(shape)
        self.n_cells = int(np.prod(self.shape))
        self.nc = nc
        self.f = np.empty((len(times),) + self.shape)
        self.g = np.empty((len(times),) + self.shape)
        self.next = 0

    def _store(self, index: int, x: np.ndarray):
        self.f[index] = (x[:self.n_cells] / self.nc).reshape(self.shape)
        self.g[index] = (x[self.n_cells:2 * self.n_cells] / self.nc).reshape(self.shape)

    def fill_before(self, t: float, x: np.ndarray):
        """Records x on every grid time strictly before t."""
        while self.next < len(self.times) and self.times[self.next] < t - GRID_TOLERANCE:
            self._store(self.next, x)
            self.next += 1

    def fill_rest(self, x: np.ndarray):
        while self.next < len(self.times):
            self._store(self.next, x)
            self.next += 1

    def store_next(self, x: np.ndarray):
        self._store(self.next, x)
        self.next += 1

    @property
    def done(self) -> bool:
        return self.next >= len(self.times)


def select_event(a: np.ndarray, r1: float) -> int:
    """
    Smallest index j with sum_{k<=j} a_k >= r1 * a0, for r1 in (0, 1].
    """
    cumulative = np.cumsum(a)
    j = int(np.searchsorted(cumulative, r1 * cumulative[-1], side="left"))
    if j >= len(a):
        j = int(np.flatnonzero(a > 0)[-1])
    return j


def waiting_time(a0: float, r2: float) -> float:
    return math.log(1.0 / r2) / a0


def run_direct(state0: LatticeState, p: ModelParams, cfg: EngineConfig) -> Trajectory:
    """
    Exact stochastic simulation (direct method) with propensities a_j = Nc * pi_j.
    The output grid is filled piecewise-constant; an absorbing state (a0 = 0) is held
    until t_final.
    """
    rng = make_rng(cfg.seed)
    V = stoichiometry_for(state0)
    shape, nc = state0.shape, state0.nc
    x = state0.as_vector().copy()
    recorder = _Recorder(record_times(cfg.t_final, cfg.resolved_stride(p)), shape, nc)
    logger.info(f"Direct method started. nc={nc}, grid_shape={shape}, t_final={cfg.t_final}, seed={cfg.seed}")

    t = 0.0
    events = 0
    while True:
        a = nc * rates_from_vector(x, shape, nc, p)
        a0 = a.sum()
        if a0 <= 0:
            logger.debug(f"Absorbing state reached. t={t}, events={events}")
            break
        r1 = 1.0 - rng.random()
        r2 = 1.0 - rng.random()
        t_next = t + waiting_time(a0, r2)
        if t_next > cfg.t_final:
            break
        recorder.fill_before(t_next, x)
        V.apply_to_vector(x, select_event(a, r1))
        t = t_next
        events += 1
    recorder.fill_rest(x)

    logger.info(f"Direct method finished. events={events}, seed={cfg.seed}")
    return Trajectory(times=recorder.times, f=recorder.f, g=recorder.g,
                      metadata=_metadata("direct", p, cfg, state0, steps=events))


def run_classic_mc(state0: LatticeState, p: ModelParams, cfg: EngineConfig) -> Trajectory:
    """
    Classic Monte Carlo on the materialised sample: micro-steps of length tau / (n_cells * Nc).
    Each micro-step picks one cell and, with probabilities q1, q2 and 1 - q1 - q2 (mu and
    1 - mu on the homogeneous model), tries one ordered pair interaction, one migration
    toward a random neighbour or one death. The cell counts are re-read from the sample
    after every micro-step, which makes the cost grow like N^2 at fixed t_final.

    :raises DegenerateSampleError: Nc < 2.
    """
    tau = cfg.resolved_tau(p)
    _check(p.classic_probabilities(tau), tau)
    nc = state0.nc
    if nc < 2:
        raise DegenerateSampleError(f"Cell capacity Nc={nc} is too small for pair selection (Nc >= 2)")

    shape = state0.shape
    n_cells = state0.n_cells
    if state0.is_homogeneous:
        q_pair, q_move, neighbors = p.mu, 0.0, []
    else:
        q_pair, q_move = p.q1, p.q2
        neighbors = neighbor_table(tuple(shape)).tolist()
    n_dirs = len(neighbors)
    gate_move = q_pair + q_move

    rng = make_rng(cfg.seed)
    stride = cfg.resolved_stride(p)
    times = record_times(cfg.t_final, stride)
    per_tau = n_cells * nc
    every = steps_per_record(stride, tau) * per_tau
    total = int(math.ceil(cfg.t_final * per_tau / tau - GRID_TOLERANCE))
    recorder = _Recorder(times, shape, nc)
    logger.info(f"Classic Monte Carlo started. nc={nc}, grid_shape={shape}, micro_steps={total}, seed={cfg.seed}")

    a_counts = state0.A.ravel().tolist()
    b_counts = state0.B.ravel().tolist()
    sample = [[PREDATOR] * a + [PREY] * b + [EMPTY] * (nc - a - b) for a, b in zip(a_counts, b_counts)]

    def counts_vector():
        a = np.array(a_counts, dtype=np.int64)
        b = np.array(b_counts, dtype=np.int64)
        return np.concatenate([a, b, nc - a - b])

    probs = p.classic_probabilities(tau)
    p_birth = probs["birth"]
    p_pred1 = p.p1_r * tau
    p_pred = probs["predation"]
    p_death = {PREDATOR: probs["predator_death"], PREY: probs["prey_death"], EMPTY: 0.0}
    p_move = {PREDATOR: probs["predator_migration"], PREY: probs["prey_migration"]}

    block = None
    row = CLASSIC_BLOCK
    for step in range(total + 1):
        if step % every == 0 and not recorder.done:
            recorder.store_next(counts_vector())
        if step == total:
            break
        if row == CLASSIC_BLOCK:
            block = rng.random((CLASSIC_BLOCK, 6)).tolist()
            row = 0
        u_cell, gate, u1, u2, u3, accept = block[row]
        row += 1

        c = int(u_cell * n_cells)
        cell = sample[c]
        other = -1
        if gate < q_pair:
            # ordered pair of distinct slots
            i = int(u1 * nc)
            j = int(u2 * (nc - 1))
            if j >= i:
                j += 1
            first, second = cell[i], cell[j]
            if first == PREY and second == EMPTY:
                if accept < p_birth:
                    cell[j] = PREY
            elif first == EMPTY and second == PREY:
                if accept < p_birth:
                    cell[i] = PREY
            elif {first, second} == {PREDATOR, PREY}:
                k = i if first == PREY else j
                if accept < p_pred1:
                    cell[k] = PREDATOR
                elif accept < p_pred:
                    cell[k] = EMPTY
        elif gate < gate_move:
            nb = neighbors[int(u1 * n_dirs)][c]
            if nb >= 0:
                target = sample[nb]
                i = int(u2 * nc)
                j = int(u3 * nc)
                here, there = cell[i], target[j]
                if (here == EMPTY) != (there == EMPTY) and accept < p_move[here or there]:
                    cell[i], target[j] = there, here
                    other = nb
        else:
            k = int(u1 * nc)
            if accept < p_death[cell[k]]:
                cell[k] = EMPTY

        # update the sample counts
        a_counts[c] = cell.count(PREDATOR)
        b_counts[c] = cell.count(PREY)
        if other >= 0:
            target = sample[other]
            a_counts[other] = target.count(PREDATOR)
            b_counts[other] = target.count(PREY)
    recorder.fill_rest(counts_vector())

    logger.info(f"Classic Monte Carlo finished. micro_steps={total}, seed={cfg.seed}")
    return Trajectory(times=times, f=recorder.f, g=recorder.g,
                      metadata=_metadata("classic-mc", p, cfg, state0, steps=total, tau=tau))


def run_tau_leaping(state0: LatticeState, p: ModelParams, cfg: EngineConfig) -> Trajectory:
    """
    Poisson tau-leaping. Each leap starts from the configured tau, truncated at the
    next output time; a leap is halved and redrawn while some propensity changes by
    more than epsilon_leap or some count would turn negative.

    :raises LeapFailureError: tau falls below tau_min.
    """
    rng = make_rng(cfg.seed)
    V = stoichiometry_for(state0)
    Vt = V.matrix.T.tocsr()
    shape, nc = state0.shape, state0.nc
    tau0 = cfg.resolved_tau(p)
    x = state0.as_vector().copy()
    times = record_times(cfg.t_final, cfg.resolved_stride(p))
    recorder = _Recorder(times, shape, nc)
    recorder.store_next(x)
    logger.info(f"Tau-leaping started. nc={nc}, grid_shape={shape}, tau={tau0}, epsilon={cfg.epsilon_leap}, seed={cfg.seed}")

    t = 0.0
    leaps = 0
    halvings = 0
    while not recorder.done:
        a = nc * rates_from_vector(x, shape, nc, p)
        if a.sum() <= 0:
            break
        target = times[recorder.next]
        tau = min(tau0, target - t)
        while True:
            if tau < cfg.tau_min:
                raise LeapFailureError(f"Leap size {tau:.3g} fell below tau_min={cfg.tau_min} at t={t}")
            k = rng.poisson(a * tau)
            x_new = x + Vt @ k
            if np.all(x_new >= 0):
                a_new = nc * rates_from_vector(x_new, shape, nc, p)
                if np.max(np.abs(a_new - a)) <= cfg.epsilon_leap:
                    break
            tau /= 2.0
            halvings += 1
        x = x_new
        t += tau
        leaps += 1
        if t >= target - GRID_TOLERANCE:
            t = target
            recorder.store_next(x)
    recorder.fill_rest(x)

    if halvings:
        logger.info(f"Tau-leaping halved the leap {halvings} times over {leaps} leaps")
    logger.info(f"Tau-leaping finished. leaps={leaps}, seed={cfg.seed}")
    return Trajectory(times=times, f=recorder.f, g=recorder.g,
                      metadata=_metadata("tau-leaping", p, cfg, state0, steps=leaps, halvings=halvings))


@dataclass(frozen=True)
class _SlotLayout:
    """Column blocks of a shuffled cell: pairs, one migration block per direction, deaths."""
    n_pairs: int
    n_migration: int
    n_directions: int
    death_start: int

    @property
    def pair_end(self) -> int:
        return 2 * self.n_pairs

    def migration_columns(self, direction: int, interacting: int) -> slice:
        start = interacting + direction * self.n_migration
        return slice(start, start + self.n_migration)


def _slot_layout(nc: int, q1: float, q2: float, n_directions: int) -> _SlotLayout:
    interacting = int(math.floor(q1 * nc + PROBABILITY_TOLERANCE))
    migrating = int(math.floor(q2 * nc + PROBABILITY_TOLERANCE))
    return _SlotLayout(
        n_pairs=interacting // 2,
        n_migration=migrating // n_directions if n_directions else 0,
        n_directions=n_directions,
        death_start=interacting + migrating,
    )


def _slots_from_counts(a: np.ndarray, b: np.ndarray, nc: int) -> np.ndarray:
    idx = np.arange(nc)[None, :]
    a = a.reshape(-1, 1)
    b = b.reshape(-1, 1)
    return np.where(idx < a, PREDATOR, np.where(idx < a + b, PREY, EMPTY)).astype(np.int8)


def _ensemble_agents_step(slots: np.ndarray, layout: _SlotLayout, interacting: int, probs: dict,
                          neighbors: np.ndarray, rng: np.random.Generator) -> tuple:
    """
    One ensemble step on shuffled component arrays of shape (n_cells, Nc).
    All events read the step-start slots and write into a copy; returns (new_slots, conflicts).
    """
    n_cells, nc = slots.shape
    new = slots.copy()
    changed = np.zeros(slots.shape, dtype=bool)

    # pairwise birth and predation
    if layout.n_pairs:
        end = layout.pair_end
        first, second = slots[:, 0:end:2], slots[:, 1:end:2]
        new_first, new_second = new[:, 0:end:2], new[:, 1:end:2]
        changed_first, changed_second = changed[:, 0:end:2], changed[:, 1:end:2]
        u = rng.random(first.shape)

        birth = u < probs["birth"]
        prey_first = (first == PREY) & (second == EMPTY) & birth
        prey_second = (first == EMPTY) & (second == PREY) & birth
        new_second[prey_first] = PREY
        changed_second[prey_first] = True
        new_first[prey_second] = PREY
        changed_first[prey_second] = True

        converts = u < probs["conversion"]
        kills = (u >= probs["conversion"]) & (u < probs["predation"])
        predator_first = (first == PREDATOR) & (second == PREY)
        predator_second = (first == PREY) & (second == PREDATOR)
        new_second[predator_first & converts] = PREDATOR
        new_second[predator_first & kills] = EMPTY
        changed_second[predator_first & (converts | kills)] = True
        new_first[predator_second & converts] = PREDATOR
        new_first[predator_second & kills] = EMPTY
        changed_first[predator_second & (converts | kills)] = True

    # single-component deaths
    if layout.death_start < nc:
        group = slots[:, layout.death_start:]
        v = rng.random(group.shape)
        dies = ((group == PREDATOR) & (v < probs["predator_death"])) | ((group == PREY) & (v < probs["prey_death"]))
        new[:, layout.death_start:][dies] = EMPTY
        changed[:, layout.death_start:][dies] = True

    conflicts = 0
    if layout.n_migration:
        flat_new = new.reshape(-1)
        flat_old = slots.reshape(-1)
        flat_changed = changed.reshape(-1)
        cells = np.arange(n_cells)
        for direction, nb in enumerate(neighbors):
            columns = layout.migration_columns(direction, interacting)
            source = slots[:, columns]
            # partners without repetition from the neighbour's slots
            positions = rng.permuted(np.tile(np.arange(nc), (n_cells, 1)), axis=1)[:, :layout.n_migration]
            target_cell = np.where(nb < 0, 0, nb)
            target = slots[target_cell[:, None], positions]
            u = rng.random(source.shape)
            predator_moves = (((source == PREDATOR) & (target == EMPTY)) | ((source == EMPTY) & (target == PREDATOR))) \
                & (u < probs["predator_migration"])
            prey_moves = (((source == PREY) & (target == EMPTY)) | ((source == EMPTY) & (target == PREY))) \
                & (u < probs["prey_migration"])
            fires = (predator_moves | prey_moves) & (nb >= 0)[:, None]
            if not fires.any():
                continue
            rows, cols = np.nonzero(fires)
            src = cells[rows] * nc + columns.start + cols
            tgt = target_cell[rows] * nc + positions[rows, cols]
            ok = ~flat_changed[src] & ~flat_changed[tgt]
            ok &= ~np.isin(src, tgt[ok])
            conflicts += int((~ok).sum())
            src, tgt = src[ok], tgt[ok]
            flat_new[src] = flat_old[tgt]
            flat_new[tgt] = flat_old[src]
            flat_changed[src] = True
            flat_changed[tgt] = True
    return new, conflicts


def _ensemble_counts_step(a: int, b: int, n: int, n_selected: int, probs: dict, rng: np.random.Generator) -> tuple:
    """One homogeneous ensemble step sampled from counts: same law as the agents kernel."""
    e = n - a - b
    selected = rng.multivariate_hypergeometric([a, b, e], n_selected)
    n_pairs = n_selected // 2
    first = rng.multivariate_hypergeometric(selected, n_pairs)
    second = rng.multivariate_hypergeometric(selected - first, n_pairs)
    # random matching of first and second members, by type of the first member
    with_predator = rng.multivariate_hypergeometric(second, first[0])
    rest = second - with_predator
    with_prey = rng.multivariate_hypergeometric(rest, first[1])
    with_empty = rest - with_prey

    prey_empty = int(with_prey[2] + with_empty[1])
    predator_prey = int(with_predator[1] + with_prey[0])
    births = rng.binomial(prey_empty, probs["birth"])
    converts, kills, _ = rng.multinomial(
        predator_prey, [probs["conversion"], probs["predation"] - probs["conversion"], 1.0 - probs["predation"]])

    predator_deaths = rng.binomial(a - int(selected[0]), probs["predator_death"])
    prey_deaths = rng.binomial(b - int(selected[1]), probs["prey_death"])
    a_new = a + converts - predator_deaths
    b_new = b + births - converts - kills - prey_deaths
    return int(a_new), int(b_new)


def _ensemble_probabilities(p: ModelParams, tau: float) -> dict:
    probs = p.ensemble_probabilities(tau)
    probs["conversion"] = 2.0 * p.p1_r * tau
    return {name: min(value, 1.0) for name, value in probs.items()}


def _run_ensemble(state0: LatticeState, p: ModelParams, cfg: EngineConfig, q1: float, q2: float,
                  label: str) -> Trajectory:
    tau = cfg.resolved_tau(p)
    p.check_probabilities(tau)
    probs = _ensemble_probabilities(p, tau)
    shape, nc = state0.shape, state0.nc
    n_cells = state0.n_cells
    neighbors = neighbor_table(shape) if not state0.is_homogeneous else np.empty((0, 1), dtype=np.int64)
    n_directions = len(neighbors) if q2 > 0 else 0
    layout = _slot_layout(nc, q1, q2, n_directions)
    interacting = int(math.floor(q1 * nc + PROBABILITY_TOLERANCE))
    if q1 > 0 and interacting < 2:
        raise DegenerateSampleError(f"Interacting fraction selects {interacting} components from nc={nc}; need >= 2")

    stride = cfg.resolved_stride(p)
    every = steps_per_record(stride, tau)
    times = record_times(cfg.t_final, stride)
    n_steps = int(math.ceil(cfg.t_final / tau - GRID_TOLERANCE))
    use_counts = cfg.kernel == "counts"
    if use_counts and not state0.is_homogeneous:
        raise InvalidDimensionError(f"The counts kernel supports the homogeneous model only, got shape={shape}")

    rng = make_rng(cfg.seed)
    recorder = _Recorder(times, shape, nc)
    logger.info(f"Ensemble run started. kernel={cfg.kernel}, nc={nc}, grid_shape={shape}, tau={tau}, "
                f"steps={n_steps}, seed={cfg.seed}")

    a = state0.A.ravel().copy()
    b = state0.B.ravel().copy()
    slots = None if use_counts else _slots_from_counts(a, b, nc)
    conflicts = 0
    for step in range(n_steps + 1):
        if step % every == 0 and not recorder.done:
            recorder.store_next(np.concatenate([a, b, nc - a - b]))
        if step == n_steps:
            break
        if use_counts:
            a0, b0 = _ensemble_counts_step(int(a[0]), int(b[0]), nc, interacting, probs, rng)
            a[0], b[0] = a0, b0
        else:
            slots = rng.permuted(slots, axis=1)
            slots, dropped = _ensemble_agents_step(slots, layout, interacting, probs, neighbors, rng)
            conflicts += dropped
            a = (slots == PREDATOR).sum(axis=1)
            b = (slots == PREY).sum(axis=1)
        logger.debug(f"Ensemble step {step + 1}. predators={int(a.sum())}, prey={int(b.sum())}")
    recorder.fill_rest(np.concatenate([a, b, nc - a - b]))

    if conflicts:
        logger.info(f"Dropped {conflicts} migration events whose slots were already used in the step")
    logger.info(f"Ensemble run finished. steps={n_steps}, n_cells={n_cells}, seed={cfg.seed}")
    return Trajectory(times=times, f=recorder.f, g=recorder.g,
                      metadata=_metadata(label, p, cfg, state0, steps=n_steps, tau=tau, kernel=cfg.kernel,
                                         conflicts=conflicts))


def run_ensemble_homogeneous(state0: LatticeState, p: ModelParams, cfg: EngineConfig) -> Trajectory:
    """
    Efficient ensemble Monte Carlo on one well-mixed sample of N components.

    Every step of length tau shuffles the sample, pairs the first floor(mu N) components
    two by two and lets the rest undergo death; all outcomes are committed together.
    """
    if not state0.is_homogeneous:
        raise InvalidDimensionError(f"Homogeneous ensemble expects a single cell, got shape={state0.shape}")
    return _run_ensemble(state0, p, cfg, q1=p.mu, q2=0.0, label="ensemble")


def run_ensemble_heterogeneous(state0: LatticeState, p: ModelParams, cfg: EngineConfig) -> Trajectory:
    """
    Efficient ensemble Monte Carlo on a 1-D or 2-D lattice of cells. Per cell and step,
    floor(q1 Nc) components pair locally, floor(q2 Nc) are split evenly over the
    neighbour directions and exchange with random slots of that neighbour, and the
    remaining components undergo death. Boundary cells leave the missing side idle.
    """
    return _run_ensemble(state0, p, cfg, q1=p.q1, q2=p.q2, label="ensemble")


def run_engine(kind: str, state0: LatticeState, p: ModelParams, cfg: EngineConfig) -> Trajectory:
    if kind == "direct":
        return run_direct(state0, p, cfg)
    if kind == "classic-mc":
        return run_classic_mc(state0, p, cfg)
    if kind == "tau-leaping":
        return run_tau_leaping(state0, p, cfg)
    if kind == "ensemble":
        if state0.is_homogeneous:
            return run_ensemble_homogeneous(state0, p, cfg)
        return run_ensemble_heterogeneous(state0, p, cfg)
    raise InvalidParameterError(f"Unknown engine '{kind}', expected one of {ENGINES}")


def run_realizations(state0: LatticeState, p: ModelParams, cfg: EngineConfig, realizations: int,
                     seed0: Optional[int] = None, n_jobs: Optional[int] = None) -> List[Trajectory]:
    """
    Runs independent realizations with derived seeds seed0 XOR index, returned in index order.

    :param seed0: Base seed; defaults to cfg.seed.
    :param n_jobs: joblib workers; defaults to cfg.n_jobs.
    """
    if realizations < 1:
        raise InvalidParameterError(f"Realization count must be >= 1, got {realizations}")
    seed0 = cfg.seed if seed0 is None else seed0
    n_jobs = cfg.n_jobs if n_jobs is None else n_jobs
    configs = [cfg.replace(seed=int(seed0) ^ index) for index in range(realizations)]
    logger.info(f"Running realizations. engine={cfg.engine}, count={realizations}, seed0={seed0}, n_jobs={n_jobs}")
    if n_jobs == 1:
        return [run_engine(c.engine, state0, p, c) for c in configs]
    return Parallel(n_jobs=n_jobs)(delayed(run_engine)(c.engine, state0, p, c) for c in configs)


def mean_trajectory(trajs: Sequence[Trajectory]) -> Trajectory:
    """
    Realization mean with standard deviations f_std, g_std (ddof=1 when R > 1).

    :raises ResamplingError: realizations on different time grids.
    """
    if not trajs:
        raise InvalidParameterError("mean_trajectory needs at least one trajectory")
    times = trajs[0].times
    for traj in trajs[1:]:
        if len(traj.times) != len(times) or not np.allclose(traj.times, times):
            raise ResamplingError("Realizations do not share a common time grid")
    f = np.stack([traj.f for traj in trajs])
    g = np.stack([traj.g for traj in trajs])
    ddof = 1 if len(trajs) > 1 else 0
    metadata = dict(trajs[0].metadata)
    metadata["realizations"] = len(trajs)
    metadata["seeds"] = [traj.metadata.get("seed") for traj in trajs]
    metadata.pop("seed", None)
    return Trajectory(times=times.copy(), f=f.mean(axis=0), g=g.mean(axis=0), metadata=metadata,
                      f_std=f.std(axis=0, ddof=ddof), g_std=g.std(axis=0, ddof=ddof))
