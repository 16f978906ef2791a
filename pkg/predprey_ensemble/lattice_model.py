import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence, Tuple

import numpy as np
from scipy import sparse

from predprey_ensemble.errors import (
    CarryingCapacityError,
    DegenerateSampleError,
    EquilibriumUndefinedError,
    InfeasibleEventError,
    InvalidDimensionError,
    InvalidParameterError,
)

logger = logging.getLogger(__name__)

# Columns are (predators, prey, empty).
V_HAT = np.array([
    [0, 1, -1],   # B E -> B B
    [1, -1, 0],   # A B -> A A
    [0, -1, 1],   # A B -> A E
    [-1, 0, 1],   # A -> E
    [0, -1, 1],   # B -> E
], dtype=np.int64)

# Migration pairs toward one neighbour: A out, A in, B out, B in.
V_HAT_M = np.array([
    [1, 0, -1],
    [-1, 0, 1],
    [0, 1, -1],
    [0, -1, 1],
], dtype=np.int64)

N_LOCAL_EVENTS = V_HAT.shape[0]
N_MIGRATION_EVENTS = V_HAT_M.shape[0]

PROBABILITY_TOLERANCE = 1e-12


@dataclass(frozen=True)
class ModelParams:
    """
    Raw rates and event fractions of the predator-prey lattice.

    Defaults are the reference rates shared by the homogeneous row (mu) and the
    heterogeneous row (q1, q2, m1_r, m2_r).
    """
    b_r: float = 0.1
    p1_r: float = 0.25
    p2_r: float = 0.05
    d1_r: float = 0.1
    d2_r: float = 0.0
    m1_r: float = 0.5
    m2_r: float = 0.5
    mu: float = 0.5
    q1: float = 0.3
    q2: float = 0.3
    tau: float = 0.1
    epsilon: float = 1.0

    def __post_init__(self):
        for name in ("b_r", "p1_r", "p2_r", "d1_r", "d2_r", "m1_r", "m2_r"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise InvalidParameterError(f"Rate {name}={value} must be a finite value >= 0")
        for name in ("mu", "q1", "q2"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidParameterError(f"Fraction {name}={value} must lie in [0, 1]")
        if self.q1 + self.q2 > 1.0 + PROBABILITY_TOLERANCE:
            raise InvalidParameterError(f"q1 + q2 = {self.q1 + self.q2} exceeds 1 (q1={self.q1}, q2={self.q2})")
        if not self.tau > 0:
            raise InvalidParameterError(f"tau={self.tau} must be > 0")
        if not self.epsilon > 0:
            raise InvalidParameterError(f"epsilon={self.epsilon} must be > 0")
        self.check_probabilities(self.tau)

    def ensemble_probabilities(self, tau: float) -> dict:
        """
        Per-step probabilities of the ensemble engines for step tau.

        The raw rate of an encounter is b_r tau for one ordered (prey, empty) draw, and
        likewise for predation. The ensemble draws unordered disjoint pairs, so each pair
        stands for both orientations and gets twice that probability. With this factor the
        expected count change per step equals the mean-field rates; without it the drift
        of every interaction would be halved. Deaths and migrations act on one individual
        and keep their raw per-step probability.
        """
        return {
            "birth": 2.0 * self.b_r * tau,
            "predation": 2.0 * (self.p1_r + self.p2_r) * tau,
            "predator_death": self.d1_r * tau,
            "prey_death": self.d2_r * tau,
            "predator_migration": self.m1_r * tau,
            "prey_migration": self.m2_r * tau,
        }

    def classic_probabilities(self, tau: float) -> dict:
        """Acceptance probabilities of one ordered draw in the classic Monte Carlo step."""
        return {
            "birth": self.b_r * tau,
            "predation": (self.p1_r + self.p2_r) * tau,
            "predator_death": self.d1_r * tau,
            "prey_death": self.d2_r * tau,
            "predator_migration": self.m1_r * tau,
            "prey_migration": self.m2_r * tau,
        }

    def check_probabilities(self, tau: float):
        """
        Rejects a time step whose per-step probabilities leave [0, 1].

        :param tau: Candidate step.
        :raises InvalidParameterError: probability overflow.
        """
        for name, value in self.ensemble_probabilities(tau).items():
            if value > 1.0 + PROBABILITY_TOLERANCE:
                raise InvalidParameterError(
                    f"Probability overflow: {name} probability {value:.6g} > 1 for tau={tau}")

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)

    def params_hash(self) -> str:
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    @classmethod
    def reference_homogeneous(cls) -> "ModelParams":
        return cls(b_r=0.1, d1_r=0.1, d2_r=0.0, p1_r=0.25, p2_r=0.05, mu=0.5)

    @classmethod
    def reference_heterogeneous(cls) -> "ModelParams":
        return cls(b_r=0.1, d1_r=0.1, d2_r=0.0, p1_r=0.25, p2_r=0.05, m1_r=0.5, m2_r=0.5, q1=0.3, q2=0.3)

    @classmethod
    def cost_scenario(cls, p_pred: float = 0.5, tau: float = 0.1) -> "ModelParams":
        """Computational-cost scenario: b=1, d1=d2=0.3, p1=p2=p_pred, mu=0.5."""
        return cls(b_r=1.0, d1_r=0.3, d2_r=0.3, p1_r=p_pred, p2_r=p_pred, mu=0.5, tau=tau)


@dataclass(frozen=True)
class ScaledParams:
    b_t: float
    p1_t: float
    p2_t: float
    d1_t: float
    d2_t: float
    m1_t: float
    m2_t: float
    r: float
    q_cap: float
    alpha: float


def scale_params(p: ModelParams, homogeneous: bool = False) -> ScaledParams:
    """
    Mean-field scaling of the raw rates. The homogeneous model maps q1 <- mu, q2 <- 0.

    :raises CarryingCapacityError: b_t = 0 while d2_t > 0.
    """
    q1 = p.mu if homogeneous else p.q1
    q2 = 0.0 if homogeneous else p.q2
    death_fraction = 1.0 - q1 - q2
    b_t = p.b_r * q1
    d2_t = death_fraction * p.d2_r
    if b_t > 0:
        q_cap = 1.0 - d2_t / (2.0 * b_t)
    elif d2_t > 0:
        raise CarryingCapacityError(f"Carrying capacity undefined: b_t=0 with d2_t={d2_t}")
    else:
        # r = 0 as well, the logistic term vanishes
        q_cap = 1.0
    p1_t = p.p1_r * q1
    p2_t = p.p2_r * q1
    return ScaledParams(
        b_t=b_t,
        p1_t=p1_t,
        p2_t=p2_t,
        d1_t=death_fraction * p.d1_r,
        d2_t=d2_t,
        m1_t=q2 * p.m1_r / p.epsilon ** 2,
        m2_t=q2 * p.m2_r / p.epsilon ** 2,
        r=2.0 * b_t - d2_t,
        q_cap=q_cap,
        alpha=2.0 * (p1_t + p2_t + b_t),
    )


def equilibrium(sp: ScaledParams) -> Tuple[float, float]:
    """
    Coexistence fixed point (f*, g*) of the spatially homogeneous mean-field system.

    :raises EquilibriumUndefinedError: p1_t = 0.
    """
    if sp.p1_t == 0:
        raise EquilibriumUndefinedError("Equilibrium undefined for p1_t=0")
    f_star = (2.0 * sp.b_t * sp.p1_t - sp.b_t * sp.d1_t - sp.p1_t * sp.d2_t) / (
        2.0 * sp.p1_t * (sp.p1_t + sp.p2_t + sp.b_t))
    g_star = sp.d1_t / (2.0 * sp.p1_t)
    return f_star, g_star


@dataclass
class LatticeState:
    """
    Integer counts of predators (A), prey (B) and empty slots (E) per cell.

    Arrays share the grid shape: (Mc,) for 1-D or (Mcx, Mcy) for 2-D. The single-cell
    case (1,) is the homogeneous model with N = nc.
    """
    A: np.ndarray
    B: np.ndarray
    E: np.ndarray
    nc: int

    def __post_init__(self):
        self.A = np.atleast_1d(np.asarray(self.A, dtype=np.int64))
        self.B = np.atleast_1d(np.asarray(self.B, dtype=np.int64))
        self.E = np.atleast_1d(np.asarray(self.E, dtype=np.int64))
        self.nc = int(self.nc)
        if not (self.A.shape == self.B.shape == self.E.shape):
            raise InvalidDimensionError(
                f"Count arrays disagree in shape: A={self.A.shape}, B={self.B.shape}, E={self.E.shape}")
        if self.A.ndim not in (1, 2) or self.A.size == 0:
            raise InvalidDimensionError(f"Grid must be 1-D or 2-D and non-empty, got shape={self.A.shape}")
        self.check_conservation()

    @classmethod
    def from_counts(cls, a, b, nc: int) -> "LatticeState":
        a = np.atleast_1d(np.asarray(a, dtype=np.int64))
        b = np.atleast_1d(np.asarray(b, dtype=np.int64))
        return cls(A=a, B=b, E=nc - a - b, nc=nc)

    @classmethod
    def homogeneous(cls, n: int, a: int, b: int) -> "LatticeState":
        return cls.from_counts([a], [b], n)

    @classmethod
    def from_vector(cls, x: np.ndarray, shape: Tuple[int, ...], nc: int) -> "LatticeState":
        n_cells = int(np.prod(shape))
        x = np.asarray(x, dtype=np.int64)
        return cls(A=x[:n_cells].reshape(shape), B=x[n_cells:2 * n_cells].reshape(shape),
                   E=x[2 * n_cells:].reshape(shape), nc=nc)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.A.shape

    @property
    def dims(self) -> int:
        return self.A.ndim

    @property
    def n_cells(self) -> int:
        return self.A.size

    @property
    def is_homogeneous(self) -> bool:
        return self.A.size == 1

    def as_vector(self) -> np.ndarray:
        """State vector x = (A, B, E), each block flattened in C order."""
        return np.concatenate([self.A.ravel(), self.B.ravel(), self.E.ravel()])

    def densities(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.A / self.nc, self.B / self.nc

    def copy(self) -> "LatticeState":
        return LatticeState(A=self.A.copy(), B=self.B.copy(), E=self.E.copy(), nc=self.nc)

    def check_conservation(self):
        if np.any(self.A < 0) or np.any(self.B < 0) or np.any(self.E < 0):
            raise InfeasibleEventError(f"Negative count in state A={self.A}, B={self.B}, E={self.E}")
        if np.any(self.A + self.B + self.E != self.nc):
            raise InfeasibleEventError(f"Per-cell total differs from nc={self.nc}")


@dataclass(frozen=True)
class StoichiometryMatrix:
    """
    Rows are event change vectors, columns are (A, B, E) blocks over the cells.

    Row ordering is l + j * n_cells for event family j and cell l.
    """
    matrix: sparse.csr_matrix
    grid_shape: Tuple[int, ...]

    @property
    def n_events(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_columns(self) -> int:
        return self.matrix.shape[1]

    def row(self, index: int) -> np.ndarray:
        return self.matrix.getrow(index).toarray().ravel()

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def apply_to_vector(self, x: np.ndarray, index: int):
        """In-place x += row(index) without building the dense row."""
        start, end = self.matrix.indptr[index], self.matrix.indptr[index + 1]
        x[self.matrix.indices[start:end]] += self.matrix.data[start:end]


def migration_directions(shape: Sequence[int]) -> Tuple[Tuple[int, ...], ...]:
    if len(shape) == 1:
        return (-1,), (1,)
    if len(shape) == 2:
        return (-1, 0), (1, 0), (0, -1), (0, 1)
    raise InvalidDimensionError(f"Only 1-D and 2-D lattices are supported, got shape={tuple(shape)}")


def migration_share(shape: Sequence[int]) -> float:
    """Fraction of the migration rate carried by each neighbour pair direction."""
    return 1.0 / len(shape)


@lru_cache(maxsize=32)
def neighbor_table(shape: Tuple[int, ...]) -> np.ndarray:
    """
    Flat neighbour indices, shape (n_directions, n_cells); -1 marks a neighbour outside
    the grid (no migration through the boundary).
    """
    coords = np.indices(shape).reshape(len(shape), -1)
    table = []
    for offset in migration_directions(shape):
        moved = coords + np.asarray(offset)[:, None]
        inside = np.all((moved >= 0) & (moved < np.asarray(shape)[:, None]), axis=0)
        clipped = np.where(inside, moved, 0)
        flat = np.ravel_multi_index(tuple(clipped), shape)
        table.append(np.where(inside, flat, -1))
    table = np.array(table, dtype=np.int64)
    table.setflags(write=False)
    return table


def _shift_matrix(neighbors: np.ndarray) -> sparse.csr_matrix:
    n = neighbors.size
    rows = np.flatnonzero(neighbors >= 0)
    data = np.concatenate([-np.ones(rows.size), np.ones(rows.size)])
    cols = np.concatenate([rows, neighbors[rows]])
    return sparse.csr_matrix((data, (np.concatenate([rows, rows]), cols)), shape=(n, n), dtype=np.int64)


def build_stoichiometry_homogeneous() -> StoichiometryMatrix:
    return StoichiometryMatrix(matrix=sparse.csr_matrix(V_HAT), grid_shape=(1,))


def build_stoichiometry_heterogeneous(mc: int) -> StoichiometryMatrix:
    """
    [V_hat (x) I ; V_hat_M (x) M_- ; V_hat_M (x) M_+] for a 1-D lattice of mc cells.

    :raises InvalidDimensionError: mc < 1.
    """
    if int(mc) < 1:
        raise InvalidDimensionError(f"Cell count must be >= 1, got mc={mc}")
    return build_stoichiometry((int(mc),))


@lru_cache(maxsize=32)
def build_stoichiometry(shape: Tuple[int, ...]) -> StoichiometryMatrix:
    """Heterogeneous stoichiometry for a 1-D or 2-D grid (one migration block per direction)."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise InvalidDimensionError(f"Grid dimensions must be >= 1, got shape={shape}")
    n_cells = int(np.prod(shape))
    blocks = [sparse.kron(sparse.csr_matrix(V_HAT), sparse.identity(n_cells, dtype=np.int64))]
    for neighbors in neighbor_table(shape):
        blocks.append(sparse.kron(sparse.csr_matrix(V_HAT_M), _shift_matrix(neighbors)))
    matrix = sparse.vstack(blocks, format="csr").astype(np.int64)
    matrix.eliminate_zeros()
    logger.debug(f"Built stoichiometry for shape={shape}. rows={matrix.shape[0]}, cols={matrix.shape[1]}")
    return StoichiometryMatrix(matrix=matrix, grid_shape=shape)


def stoichiometry_for(state: LatticeState) -> StoichiometryMatrix:
    if state.is_homogeneous:
        return build_stoichiometry_homogeneous()
    return build_stoichiometry(state.shape)


def _homogeneous_rates(a: float, b: float, e: float, n: int, p: ModelParams) -> np.ndarray:
    if n < 2:
        raise DegenerateSampleError(f"Sample size N={n} is too small for pair selection (N >= 2)")
    return np.array([
        2.0 * p.mu * p.b_r * (b / n) * (e / (n - 1)),
        2.0 * p.mu * p.p1_r * (a / n) * (b / (n - 1)),
        2.0 * p.mu * p.p2_r * (a / n) * (b / (n - 1)),
        (1.0 - p.mu) * p.d1_r * a / n,
        (1.0 - p.mu) * p.d2_r * b / n,
    ])


def _heterogeneous_rates(a: np.ndarray, b: np.ndarray, e: np.ndarray, nc: int,
                         shape: Tuple[int, ...], p: ModelParams) -> np.ndarray:
    if nc < 2:
        raise DegenerateSampleError(f"Cell capacity Nc={nc} is too small for pair selection (Nc >= 2)")
    n_cells = a.size
    death_fraction = 1.0 - p.q1 - p.q2
    rates = [
        2.0 * p.b_r * p.q1 * (b / nc) * (e / (nc - 1)),
        2.0 * p.p1_r * p.q1 * (a / nc) * (b / (nc - 1)),
        2.0 * p.p2_r * p.q1 * (a / nc) * (b / (nc - 1)),
        p.d1_r * death_fraction * a / nc,
        p.d2_r * death_fraction * b / nc,
    ]
    share = migration_share(shape)
    m1 = p.m1_r * p.q2 * share / nc ** 2
    m2 = p.m2_r * p.q2 * share / nc ** 2
    a_ghost = np.append(a, 0.0)
    b_ghost = np.append(b, 0.0)
    e_ghost = np.append(e, 0.0)
    for neighbors in neighbor_table(tuple(shape)):
        nb = np.where(neighbors < 0, n_cells, neighbors)
        rates.extend([
            m1 * a * e_ghost[nb],
            m1 * a_ghost[nb] * e,
            m2 * b * e_ghost[nb],
            m2 * b_ghost[nb] * e,
        ])
    return np.concatenate(rates)


def transition_rates_homogeneous(state: LatticeState, p: ModelParams) -> np.ndarray:
    """
    Rates (pi_1..pi_5) of the single-cell model.

    :raises DegenerateSampleError: N < 2.
    """
    return _homogeneous_rates(float(state.A.sum()), float(state.B.sum()), float(state.E.sum()), state.nc, p)


def transition_rates_heterogeneous(state: LatticeState, p: ModelParams) -> np.ndarray:
    """
    Rates of the lattice model indexed l + j * n_cells, matching build_stoichiometry.
    Ghost cells outside the grid are empty of everything, so boundary migration is 0.

    :raises DegenerateSampleError: Nc < 2.
    """
    return _heterogeneous_rates(state.A.ravel().astype(float), state.B.ravel().astype(float),
                                state.E.ravel().astype(float), state.nc, state.shape, p)


def rates_from_vector(x: np.ndarray, shape: Tuple[int, ...], nc: int, p: ModelParams) -> np.ndarray:
    """transition_rates evaluated on a raw state vector x = (A, B, E), skipping state validation."""
    n_cells = x.size // 3
    a = x[:n_cells].astype(float)
    b = x[n_cells:2 * n_cells].astype(float)
    e = x[2 * n_cells:].astype(float)
    if n_cells == 1:
        return _homogeneous_rates(a[0], b[0], e[0], nc, p)
    return _heterogeneous_rates(a, b, e, nc, shape, p)


def transition_rates(state: LatticeState, p: ModelParams) -> np.ndarray:
    if state.is_homogeneous:
        return transition_rates_homogeneous(state, p)
    return transition_rates_heterogeneous(state, p)


def propensities(state: LatticeState, p: ModelParams) -> np.ndarray:
    """Event propensities a_j = Nc * pi_j; engine time equals mean-field time."""
    return state.nc * transition_rates(state, p)


def apply_event(state: LatticeState, V: StoichiometryMatrix, row_index: int) -> LatticeState:
    """
    Returns state + V[row_index].

    :raises InfeasibleEventError: a resulting count would be negative.
    """
    if V.n_columns != 3 * state.n_cells:
        raise InvalidDimensionError(
            f"Stoichiometry has {V.n_columns} columns, state has {3 * state.n_cells} entries")
    x = state.as_vector() + V.row(row_index)
    if np.any(x < 0):
        raise InfeasibleEventError(f"Event {row_index} drives a count negative from state x={state.as_vector()}")
    return LatticeState.from_vector(x, state.shape, state.nc)


def uniform(shape: Sequence[int], nc: int, a_frac: float, b_frac: float) -> LatticeState:
    shape = tuple(int(s) for s in shape)
    a = np.full(shape, int(np.floor(a_frac * nc)), dtype=np.int64)
    b = np.full(shape, int(np.floor(b_frac * nc)), dtype=np.int64)
    if np.any(a + b > nc):
        raise InvalidParameterError(f"Initial fractions a_frac={a_frac}, b_frac={b_frac} exceed the cell capacity")
    return LatticeState.from_counts(a, b, nc)


def centered_blob(shape: Sequence[int], nc: int, width_frac: float = 0.1) -> LatticeState:
    """
    1-D: central cells hold Nc/4 predators and Nc/2 prey, the rest is empty.
    2-D: a centered prey square (Nc/2 prey per cell) of half-width w inside a predator
    ring (Nc/4 predators per cell) of width w, with w = max(1, width_frac * min(shape)).
    """
    shape = tuple(int(s) for s in shape)
    a = np.zeros(shape, dtype=np.int64)
    b = np.zeros(shape, dtype=np.int64)
    if len(shape) == 1:
        w = max(1, int(width_frac * shape[0]))
        center = shape[0] // 2
        cells = slice(max(0, center - w), min(shape[0], center + w))
        a[cells] = nc // 4
        b[cells] = nc // 2
    elif len(shape) == 2:
        w = max(1, int(width_frac * min(shape)))
        ix, iy = np.indices(shape)
        distance = np.maximum(np.abs(ix - shape[0] // 2), np.abs(iy - shape[1] // 2))
        b[distance < w] = nc // 2
        a[(distance >= w) & (distance < 2 * w)] = nc // 4
    else:
        raise InvalidDimensionError(f"Only 1-D and 2-D lattices are supported, got shape={shape}")
    return LatticeState.from_counts(a, b, nc)
