import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import signal

from predprey_ensemble.errors import (
    FitError,
    InfeasibleEquilibriumError,
    InvalidParameterError,
    ResamplingError,
    StabilityError,
)
from predprey_ensemble.lattice_model import ScaledParams, equilibrium
from predprey_ensemble.meanfield import rhs_homogeneous
from predprey_ensemble.samplers import EngineConfig, Trajectory, make_rng, record_times, steps_per_record

logger = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 1e3


@dataclass(frozen=True)
class LinearNoiseModel:
    """
    Fluctuations about (f*, g*): d/dt x = Psi x + Phi xi, with xi four independent white
    noises of standard deviation sigma = 1/sqrt(N).
    """
    Psi: np.ndarray
    Phi: np.ndarray
    N: float
    sigma: float
    f_star: float
    g_star: float

    @property
    def omega0_squared(self) -> float:
        return float(self.Psi[0, 1] * abs(self.Psi[1, 0]))

    @property
    def gamma(self) -> float:
        return float(abs(self.Psi[1, 1]))


@dataclass
class SpectrumResult:
    """One-sided power spectrum on omega (radians/time)."""
    omega: np.ndarray
    power: np.ndarray
    kind: str
    realizations: int = 0
    power_stderr: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "omega": self.omega.tolist(), "power": self.power.tolist(),
               "realizations": self.realizations}
        if self.power_stderr is not None:
            out["power_stderr"] = self.power_stderr.tolist()
        return out


def jacobian(sp: ScaledParams, f: float, g: float) -> np.ndarray:
    """Analytic Jacobian of rhs_homogeneous at (f, g)."""
    return np.array([
        [2.0 * sp.p1_t * g - sp.d1_t, 2.0 * sp.p1_t * f],
        [-sp.alpha * g, sp.r - 2.0 * sp.r * g / sp.q_cap - sp.alpha * f],
    ])


def noise_matrix(sp: ScaledParams, f: float, g: float) -> np.ndarray:
    """
    2x4 noise amplitudes; columns are prey birth, predator birth, prey loss by predation
    or death, predator death.

    :raises InfeasibleEquilibriumError: a negative radicand.
    """
    radicands = {
        "predator_birth": 2.0 * sp.p1_t * f * g,
        "predator_death": sp.d1_t * f,
        "prey_birth": 2.0 * sp.b_t * g * (1.0 - f - g),
        "prey_loss": 2.0 * sp.p2_t * f * g + sp.d2_t * g,
    }
    for name, value in radicands.items():
        if value < 0:
            raise InfeasibleEquilibriumError(f"Negative radicand for {name}: {value:.6g} at f={f}, g={g}")
    root = {name: math.sqrt(value) for name, value in radicands.items()}
    return np.array([
        [0.0, root["predator_birth"], 0.0, -root["predator_death"]],
        [root["prey_birth"], -root["predator_birth"], -root["prey_loss"], 0.0],
    ])


def build_linear_model(sp: ScaledParams, N: float) -> LinearNoiseModel:
    """
    Linearizes the homogeneous mean-field system at its coexistence equilibrium.

    :param N: Sample size; np.inf gives the noise-free model.
    :raises InfeasibleEquilibriumError: f*, g* or 1 - f* - g* negative.
    """
    f_star, g_star = equilibrium(sp)
    if f_star < 0 or g_star < 0 or 1.0 - f_star - g_star < 0:
        raise InfeasibleEquilibriumError(f"Equilibrium outside the simplex: f*={f_star:.6g}, g*={g_star:.6g}")
    if not N > 0:
        raise InvalidParameterError(f"Sample size N={N} must be > 0")
    sigma = 0.0 if math.isinf(N) else 1.0 / math.sqrt(N)
    return LinearNoiseModel(Psi=jacobian(sp, f_star, g_star), Phi=noise_matrix(sp, f_star, g_star),
                            N=N, sigma=sigma, f_star=f_star, g_star=g_star)


def theta_lambda(model: LinearNoiseModel) -> Tuple[float, float]:
    """
    Closed-form numerator coefficients of P(omega) for i.i.d. noises of variance sigma^2.
    The shared xi_2 term gives the (Psi12 Phi22 - Psi22 Phi12)^2 contribution.
    """
    psi, phi, var = model.Psi, model.Phi, model.sigma ** 2
    theta = var * (
        (psi[0, 1] * phi[1, 0]) ** 2
        + (psi[0, 1] * phi[1, 1] - psi[1, 1] * phi[0, 1]) ** 2
        + (psi[0, 1] * phi[1, 2]) ** 2
        + (psi[1, 1] * phi[0, 3]) ** 2
    )
    lam = var * (phi[0, 1] ** 2 + phi[0, 3] ** 2)
    return float(theta), float(lam)


def theta_lambda_monte_carlo(model: LinearNoiseModel, draws: int = 10 ** 6, seed: int = 0) -> Tuple[float, float]:
    """Brute-force estimate of the expectations defining Theta and Lambda."""
    xi = make_rng(seed).normal(0.0, model.sigma, size=(draws, 4)) if model.sigma > 0 else np.zeros((draws, 4))
    predator_noise = xi @ model.Phi[0]
    prey_noise = xi @ model.Phi[1]
    theta = np.mean((model.Psi[0, 1] * prey_noise - model.Psi[1, 1] * predator_noise) ** 2)
    lam = np.mean(predator_noise ** 2)
    return float(theta), float(lam)


def analytical_spectrum(model: LinearNoiseModel, omega: np.ndarray) -> SpectrumResult:
    """
    P(omega) = (Theta + Lambda omega^2) / ((omega^2 - Omega0^2)^2 + Gamma^2 omega^2).
    """
    if model.Psi[0, 1] < 0:
        raise StabilityError(f"Psi12={model.Psi[0, 1]:.6g} < 0 gives no oscillator form")
    omega = np.asarray(omega, dtype=float)
    theta, lam = theta_lambda(model)
    w2 = omega ** 2
    power = (theta + lam * w2) / ((w2 - model.omega0_squared) ** 2 + model.gamma ** 2 * w2)
    return SpectrumResult(omega=omega, power=power, kind="analytical")


def _langevin_dt(cfg: EngineConfig, gamma: float) -> float:
    if cfg.tau is not None:
        return cfg.tau
    return min(0.1, 0.01 / gamma) if gamma > 0 else 0.1


def simulate_langevin_linear(model: LinearNoiseModel, cfg: EngineConfig,
                             x0: Sequence[float] = (0.05, 0.0), noise: bool = True) -> Trajectory:
    """
    Euler-Maruyama integration of the linearized system. The returned Trajectory holds
    deviations from (f*, g*) and can be negative.

    :raises StabilityError: dt too large for Psi, or divergence.
    """
    dt = _langevin_dt(cfg, model.gamma)
    radius = float(np.max(np.abs(np.linalg.eigvals(model.Psi))))
    if dt * radius >= 1.0:
        raise StabilityError(f"dt={dt} too large: dt * spectral_radius(Psi) = {dt * radius:.3g} >= 1")
    stride = cfg.record_stride if cfg.record_stride is not None else dt
    every = steps_per_record(stride, dt)
    times = record_times(cfg.t_final, stride)
    n_steps = (len(times) - 1) * every
    sigma = model.sigma if noise else 0.0
    rng = make_rng(cfg.seed)

    x = np.asarray(x0, dtype=float).copy()
    limit = DIVERGENCE_FACTOR * max(float(np.max(np.abs(x))), sigma, 1e-12)
    out = np.empty((len(times), 2))
    out[0] = x
    scale = sigma * math.sqrt(dt)
    for step in range(1, n_steps + 1):
        x = x + dt * (model.Psi @ x)
        if scale > 0:
            x = x + scale * (model.Phi @ rng.standard_normal(4))
        if step % every == 0:
            if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > limit:
                raise StabilityError(f"Linear Langevin run diverged at t={step * dt:.4g}")
            out[step // every] = x
    logger.info(f"Linear Langevin run finished. steps={n_steps}, dt={dt}, sigma={sigma}, seed={cfg.seed}")
    return Trajectory(times=times, f=out[:, :1].copy(), g=out[:, 1:].copy(),
                      metadata={"engine": "langevin-linear", "seed": int(cfg.seed), "steps": n_steps,
                                "deviation": True, "noise": bool(noise)})


def simulate_langevin_full(sp: ScaledParams, N: float, cfg: EngineConfig,
                           f0: float = 0.25, g0: float = 0.5) -> Trajectory:
    """
    Euler-Maruyama on the nonlinear Langevin system with state dependent noise.
    Negative radicands are clamped to 0 and densities are projected back onto the
    simplex; both are counted in the metadata.
    """
    dt = _langevin_dt(cfg, 0.0)
    stride = cfg.record_stride if cfg.record_stride is not None else dt
    every = steps_per_record(stride, dt)
    times = record_times(cfg.t_final, stride)
    n_steps = (len(times) - 1) * every
    sigma = 0.0 if math.isinf(N) else 1.0 / math.sqrt(N)
    scale = sigma * math.sqrt(dt)
    rng = make_rng(cfg.seed)

    f, g = float(f0), float(g0)
    out = np.empty((len(times), 2))
    out[0] = (f, g)
    clamped_radicands = 0
    clamped_densities = 0
    for step in range(1, n_steps + 1):
        df, dg = rhs_homogeneous(f, g, sp)
        radicands = np.array([
            2.0 * sp.b_t * g * (1.0 - f - g),
            2.0 * sp.p1_t * f * g,
            2.0 * sp.p2_t * f * g + sp.d2_t * g,
            sp.d1_t * f,
        ])
        negative = radicands < 0
        if negative.any():
            clamped_radicands += int(negative.sum())
            radicands[negative] = 0.0
        roots = np.sqrt(radicands)
        z = rng.standard_normal(4) if scale > 0 else np.zeros(4)
        f_new = f + dt * df + scale * (roots[1] * z[1] - roots[3] * z[3])
        g_new = g + dt * dg + scale * (roots[0] * z[0] - roots[2] * z[2] - roots[1] * z[1])
        if f_new < 0 or g_new < 0 or f_new + g_new > 1:
            clamped_densities += 1
            f_new, g_new = max(f_new, 0.0), max(g_new, 0.0)
            total = f_new + g_new
            if total > 1:
                f_new, g_new = f_new / total, g_new / total
        f, g = f_new, g_new
        if step % every == 0:
            out[step // every] = (f, g)

    if clamped_radicands or clamped_densities:
        logger.warning(f"Full Langevin run clamped values. radicands={clamped_radicands}, densities={clamped_densities}")
    logger.info(f"Full Langevin run finished. steps={n_steps}, dt={dt}, N={N}, seed={cfg.seed}")
    return Trajectory(times=times, f=out[:, :1].copy(), g=out[:, 1:].copy(),
                      metadata={"engine": "langevin-full", "seed": int(cfg.seed), "steps": n_steps,
                                "clamped_radicands": clamped_radicands, "clamped_densities": clamped_densities})


def _series(traj: Trajectory, cell: Union[int, str], component: str) -> np.ndarray:
    values = traj.flat(component)
    if cell == "mean":
        return values.mean(axis=1)
    return values[:, int(cell)]


def empirical_spectrum(trajs: Sequence[Trajectory], detrend: bool = True, cell: Union[int, str] = 0,
                       component: str = "f") -> SpectrumResult:
    """
    Periodogram (dt/n) |DFT(x - mean)|^2 averaged over realizations, on the one-sided
    grid omega = 2 pi k / (n dt).

    :param cell: Cell index or "mean" for the cell-averaged density.
    :raises ResamplingError: non-uniform or differing time grids.
    """
    if not trajs:
        raise InvalidParameterError("empirical_spectrum needs at least one trajectory")
    times = trajs[0].times
    if len(times) < 4 or not trajs[0].is_uniform_grid():
        raise ResamplingError("Spectrum estimation requires a uniform time grid with at least 4 samples")
    for traj in trajs[1:]:
        if len(traj.times) != len(times) or not np.allclose(traj.times, times):
            raise ResamplingError("Realizations do not share a common time grid")
    dt = float(times[1] - times[0])
    n = len(times)
    powers = []
    for traj in trajs:
        x = _series(traj, cell, component)
        if detrend:
            x = x - x.mean()
        powers.append(dt / n * np.abs(np.fft.rfft(x)) ** 2)
    powers = np.array(powers)
    omega = 2.0 * np.pi * np.fft.rfftfreq(n, dt)
    stderr = powers.std(axis=0, ddof=1) / math.sqrt(len(trajs)) if len(trajs) > 1 else None
    return SpectrumResult(omega=omega, power=powers.mean(axis=0), kind="empirical",
                          realizations=len(trajs), power_stderr=stderr)


def peak_frequency(spectrum: SpectrumResult, omega_min: float = 0.0) -> float:
    """Frequency of the largest power above omega_min (the zero bin is always skipped)."""
    mask = (spectrum.omega > max(omega_min, 0.0))
    if not mask.any():
        raise InvalidParameterError(f"No frequencies above omega_min={omega_min}")
    index = np.argmax(spectrum.power[mask])
    return float(spectrum.omega[mask][index])


def relative_l2_error(reference: SpectrumResult, estimate: SpectrumResult,
                      omega_range: Tuple[float, float] = (0.01, 1.0)) -> float:
    """||estimate - reference|| / ||reference|| on estimate's grid within omega_range."""
    lo, hi = omega_range
    mask = (estimate.omega >= lo) & (estimate.omega <= hi)
    if not mask.any():
        raise InvalidParameterError(f"No frequencies inside omega_range={omega_range}")
    ref = np.interp(estimate.omega[mask], reference.omega, reference.power)
    return float(np.linalg.norm(estimate.power[mask] - ref) / np.linalg.norm(ref))


def fit_envelope_decay(traj: Trajectory, component: str = "f", cell: Union[int, str] = 0) -> float:
    """
    Decay rate k of a damped oscillation, from a log-linear fit through its maxima:
    peaks ~ exp(-k t).

    :raises FitError: fewer than 3 positive maxima.
    """
    x = _series(traj, cell, component)
    peaks, _ = signal.find_peaks(x)
    peaks = peaks[x[peaks] > 0]
    if len(peaks) < 3:
        raise FitError(f"Envelope fit needs at least 3 maxima, found {len(peaks)}")
    slope, _ = np.polyfit(traj.times[peaks], np.log(x[peaks]), 1)
    return float(-slope)
