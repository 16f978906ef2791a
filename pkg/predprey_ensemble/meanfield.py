import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy import integrate as sp_integrate
from scipy import ndimage

from predprey_ensemble.errors import (
    CarryingCapacityError,
    InvalidDimensionError,
    InvalidParameterError,
    SolverInstabilityError,
)
from predprey_ensemble.lattice_model import LatticeState, ScaledParams, migration_share
from predprey_ensemble.samplers import GRID_TOLERANCE, Trajectory, record_times

logger = logging.getLogger(__name__)

BOUNDARIES = {"periodic": "wrap", "zero-flux": "nearest"}
METHODS = ("rk4", "rk45")
DENSITY_TOLERANCE = 1e-9


@dataclass
class Field:
    """Predator (f) and prey (g) densities per cell at one time."""
    f: np.ndarray
    g: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.f = np.atleast_1d(np.asarray(self.f, dtype=float))
        self.g = np.atleast_1d(np.asarray(self.g, dtype=float))
        if self.f.shape != self.g.shape:
            raise InvalidDimensionError(f"Field components disagree in shape: f={self.f.shape}, g={self.g.shape}")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.f.shape

    @property
    def is_homogeneous(self) -> bool:
        return self.f.size == 1

    @classmethod
    def uniform(cls, shape: Sequence[int], f0: float, g0: float) -> "Field":
        return cls(f=np.full(tuple(shape), float(f0)), g=np.full(tuple(shape), float(g0)))

    @classmethod
    def from_state(cls, state: LatticeState) -> "Field":
        f, g = state.densities()
        return cls(f=f, g=g)

    def check(self):
        """
        :raises SolverInstabilityError: non-finite values or densities outside 0 <= f, g; f + g <= 1.
        """
        if not (np.all(np.isfinite(self.f)) and np.all(np.isfinite(self.g))):
            raise SolverInstabilityError(f"Non-finite density at t={self.time}")
        low = min(self.f.min(), self.g.min())
        high = (self.f + self.g).max()
        if low < -DENSITY_TOLERANCE or high > 1.0 + DENSITY_TOLERANCE:
            raise SolverInstabilityError(
                f"Density left the simplex at t={self.time}: min={low:.3g}, max(f+g)={high:.3g}")


@dataclass(frozen=True)
class SolverConfig:
    """
    :param dt: RK4 step (ignored by rk45 except as the first step hint).
    :param boundary: periodic | zero-flux.
    :param method: rk4 (fixed step) | rk45 (adaptive embedded pair).
    :param output_stride: Spacing of the returned Fields.
    :param epsilon: Lattice spacing used by the discrete Laplacian.
    """
    dt: float = 0.02
    t_final: float = 100.0
    boundary: str = "periodic"
    method: str = "rk4"
    rtol: float = 1e-8
    atol: float = 1e-10
    output_stride: float = 1.0
    epsilon: float = 1.0

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidParameterError(f"dt={self.dt} must be > 0")
        if not self.t_final > 0:
            raise InvalidParameterError(f"t_final={self.t_final} must be > 0")
        if self.boundary not in BOUNDARIES:
            raise InvalidParameterError(f"Unknown boundary '{self.boundary}', expected one of {tuple(BOUNDARIES)}")
        if self.method not in METHODS:
            raise InvalidParameterError(f"Unknown method '{self.method}', expected one of {METHODS}")
        if not self.output_stride > 0:
            raise InvalidParameterError(f"output_stride={self.output_stride} must be > 0")
        if not self.epsilon > 0:
            raise InvalidParameterError(f"epsilon={self.epsilon} must be > 0")


def rhs_homogeneous(f, g, sp: ScaledParams):
    """
    Reaction terms: df = 2 p1 f g - d1 f, dg = r g (1 - g/q) - alpha f g.
    Accepts scalars or arrays.
    """
    if sp.q_cap == 0:
        raise CarryingCapacityError("Carrying capacity q=0 makes the logistic term undefined")
    df = 2.0 * sp.p1_t * f * g - sp.d1_t * f
    dg = sp.r * g * (1.0 - g / sp.q_cap) - sp.alpha * f * g
    return df, dg


def discrete_laplacian(h: np.ndarray, epsilon: float = 1.0, boundary: str = "periodic") -> np.ndarray:
    """
    3-point (1-D) or 5-point (2-D) stencil divided by epsilon**2. Zero-flux mirrors the
    edge value into the ghost cell so the missing neighbour contributes nothing.
    """
    h = np.asarray(h, dtype=float)
    if h.ndim not in (1, 2) or min(h.shape) < 2:
        raise InvalidDimensionError(f"Laplacian needs a 1-D or 2-D grid with >= 2 cells per axis, got shape={h.shape}")
    if boundary not in BOUNDARIES:
        raise InvalidParameterError(f"Unknown boundary '{boundary}', expected one of {tuple(BOUNDARIES)}")
    return ndimage.laplace(h, mode=BOUNDARIES[boundary]) / epsilon ** 2


def rhs_heterogeneous(F: Field, sp: ScaledParams, epsilon: float = 1.0, boundary: str = "periodic") -> Field:
    """
    Reaction terms plus cross diffusion m1 (f Lg + (1-g) Lf) and m2 (g Lf + (1-f) Lg).
    On a 2-D grid each migration coefficient is shared evenly between the two axes.
    """
    df, dg = rhs_homogeneous(F.f, F.g, sp)
    lap_f = discrete_laplacian(F.f, epsilon, boundary)
    lap_g = discrete_laplacian(F.g, epsilon, boundary)
    share = migration_share(F.shape)
    m1, m2 = sp.m1_t * share, sp.m2_t * share
    df = df + m1 * (F.f * lap_g + (1.0 - F.g) * lap_f)
    dg = dg + m2 * (F.g * lap_f + (1.0 - F.f) * lap_g)
    return Field(f=df, g=dg, time=F.time)


def _vector_rhs(shape: Tuple[int, ...], sp: ScaledParams, cfg: SolverConfig):
    n = int(np.prod(shape))
    homogeneous = n == 1

    def rhs(t, y):
        f = y[:n].reshape(shape)
        g = y[n:].reshape(shape)
        if homogeneous:
            df, dg = rhs_homogeneous(f, g, sp)
        else:
            d = rhs_heterogeneous(Field(f=f, g=g, time=t), sp, cfg.epsilon, cfg.boundary)
            df, dg = d.f, d.g
        return np.concatenate([np.ravel(df), np.ravel(dg)])

    return rhs


def _to_field(y: np.ndarray, shape: Tuple[int, ...], t: float) -> Field:
    n = int(np.prod(shape))
    return Field(f=y[:n].reshape(shape).copy(), g=y[n:].reshape(shape).copy(), time=float(t))


def _check_cfl(F0: Field, sp: ScaledParams, cfg: SolverConfig):
    if F0.is_homogeneous:
        return
    m = max(sp.m1_t, sp.m2_t) * migration_share(F0.shape)
    if m > 0 and cfg.dt > cfg.epsilon ** 2 / (4.0 * m):
        raise InvalidParameterError(
            f"dt={cfg.dt} violates the explicit stability bound epsilon^2/(4 m)={cfg.epsilon ** 2 / (4.0 * m):.4g}")


def integrate(F0: Field, sp: ScaledParams, cfg: SolverConfig) -> List[Field]:
    """
    Integrates the mean-field system from F0 and returns Fields at 0, stride, ..., t_final.
    Single-cell fields use the homogeneous ODE.

    :raises SolverInstabilityError: step-size underflow or densities leaving the simplex.
    """
    shape = F0.shape
    times = record_times(cfg.t_final, cfg.output_stride)
    rhs = _vector_rhs(shape, sp, cfg)
    y = np.concatenate([F0.f.ravel(), F0.g.ravel()])
    logger.info(f"Mean-field integration started. method={cfg.method}, grid_shape={shape}, "
                f"boundary={cfg.boundary}, t_final={cfg.t_final}")
    if len(times) == 1:
        return [_to_field(y, shape, 0.0)]

    if cfg.method == "rk45":
        solution = sp_integrate.solve_ivp(rhs, (0.0, float(times[-1])), y, method="RK45", t_eval=times,
                                          rtol=cfg.rtol, atol=cfg.atol, first_step=min(cfg.dt, float(times[-1])))
        if not solution.success:
            raise SolverInstabilityError(f"Adaptive integration failed: {solution.message}")
        fields = [_to_field(solution.y[:, i], shape, t) for i, t in enumerate(solution.t)]
        for field in fields:
            field.check()
        logger.info(f"Mean-field integration finished. rhs_evaluations={solution.nfev}")
        return fields

    _check_cfl(F0, sp, cfg)
    every = int(round(cfg.output_stride / cfg.dt))
    if every < 1 or abs(every * cfg.dt - cfg.output_stride) > GRID_TOLERANCE * max(cfg.output_stride, 1.0):
        raise InvalidParameterError(f"output_stride={cfg.output_stride} must be a positive multiple of dt={cfg.dt}")
    n_steps = (len(times) - 1) * every
    dt = cfg.dt
    fields = [_to_field(y, shape, 0.0)]
    fields[0].check()
    for step in range(1, n_steps + 1):
        t = (step - 1) * dt
        k1 = rhs(t, y)
        k2 = rhs(t + dt / 2, y + dt / 2 * k1)
        k3 = rhs(t + dt / 2, y + dt / 2 * k2)
        k4 = rhs(t + dt, y + dt * k3)
        y = y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if step % every == 0:
            field = _to_field(y, shape, times[step // every])
            field.check()
            fields.append(field)
    logger.info(f"Mean-field integration finished. steps={n_steps}")
    return fields


def solution_to_trajectory(fields: Sequence[Field]) -> Trajectory:
    """Stacks integration output into a Trajectory with engine 'meanfield'."""
    times = np.array([field.time for field in fields])
    f = np.stack([field.f for field in fields])
    g = np.stack([field.g for field in fields])
    return Trajectory(times=times, f=f, g=g, metadata={"engine": "meanfield", "grid_shape": list(fields[0].shape)})

