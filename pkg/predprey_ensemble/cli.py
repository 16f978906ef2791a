import argparse
import configparser
import dataclasses
import io
import logging
import os
import re
import sys
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from predprey_ensemble import __version__, config_utils
from predprey_ensemble.analysis import (
    accuracy_study,
    benchmark_cost,
    convergence_study,
    error_vs_meanfield,
    meanfield_reference,
)
from predprey_ensemble.errors import (
    ConfigError,
    ExperimentError,
    FitError,
    InvalidParameterError,
    PredPreyError,
)
from predprey_ensemble.lattice_model import LatticeState, ModelParams, centered_blob, equilibrium, scale_params, uniform
from predprey_ensemble.linear_noise import (
    analytical_spectrum,
    build_linear_model,
    empirical_spectrum,
    fit_envelope_decay,
    peak_frequency,
    relative_l2_error,
    simulate_langevin_linear,
    theta_lambda,
)
from predprey_ensemble.logging_utils import setup_logging
from predprey_ensemble.meanfield import Field, SolverConfig, integrate, solution_to_trajectory
from predprey_ensemble.output_utils import write_json, write_manifest, write_trajectory_csv
from predprey_ensemble.samplers import ENGINES, KERNELS, EngineConfig, Trajectory, mean_trajectory, run_realizations

logger = logging.getLogger(__name__)

KINDS = ("simulate", "meanfield", "validate", "convergence", "cost", "accuracy", "spectrum")
INITIAL_CONDITIONS = ("uniform", "centered-blob", "explicit")
COST_SWEEPS = ("n", "param")
SWEEP_PARAMS = ("p_pred", "m")
OUT_DIR_ENV = "PREDPREY_OUT_DIR"
DEFAULT_OUT_DIR = "output"
# Fraction of t_final after which the validate report measures the settled deviation.
SETTLE_FRACTION = 0.4

SCHEMA = {
    "experiment": ("kind", "seed", "realizations", "out_dir"),
    "model": ("b_r", "p1_r", "p2_r", "d1_r", "d2_r", "m1_r", "m2_r", "mu", "q1", "q2", "tau", "epsilon"),
    "lattice": ("dims", "nc", "mc", "mcy", "initial", "a_frac", "b_frac", "blob_width", "a_counts", "b_counts"),
    "engine": ("engine", "t_final", "tau", "epsilon_leap", "record_stride", "kernel", "tau_min", "n_jobs"),
    "solver": ("dt", "method", "boundary", "rtol", "atol", "output_stride"),
    "sweep": ("n_values", "engines", "cost_sweep", "param", "param_values", "repetitions"),
    "spectrum": ("omega_min", "omega_max", "cell", "component", "detrend"),
}


@dataclass(frozen=True)
class LatticeConfig:
    """
    :param dims: 0 for the homogeneous single-cell model, 1 or 2 for a lattice.
    :param nc: Cell capacity (N for the homogeneous model).
    :param mcy: Second axis length, used when dims is 2.
    :param initial: uniform | centered-blob | explicit (a_counts, b_counts per cell, C order).
    """
    dims: int = 0
    nc: int = 1000
    mc: int = 50
    mcy: int = 50
    initial: str = "uniform"
    a_frac: float = 0.25
    b_frac: float = 0.5
    blob_width: float = 0.1
    a_counts: Optional[Tuple[int, ...]] = None
    b_counts: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.dims not in (0, 1, 2):
            raise InvalidParameterError(f"dims={self.dims} must be 0, 1 or 2")
        if self.nc < 1:
            raise InvalidParameterError(f"nc={self.nc} must be >= 1")
        if self.dims >= 1 and self.mc < 2:
            raise InvalidParameterError(f"mc={self.mc} must be >= 2 on a lattice")
        if self.dims == 2 and self.mcy < 2:
            raise InvalidParameterError(f"mcy={self.mcy} must be >= 2 on a 2-D lattice")
        if self.initial not in INITIAL_CONDITIONS:
            raise InvalidParameterError(f"Unknown initial '{self.initial}', expected one of {INITIAL_CONDITIONS}")
        if self.initial == "centered-blob" and self.dims == 0:
            raise InvalidParameterError("initial=centered-blob needs dims 1 or 2")
        if self.initial == "explicit":
            n_cells = int(np.prod(self.shape))
            for name in ("a_counts", "b_counts"):
                counts = getattr(self, name)
                if counts is None or len(counts) != n_cells:
                    raise InvalidParameterError(f"initial=explicit needs {name} with {n_cells} entries")

    @property
    def shape(self) -> Tuple[int, ...]:
        if self.dims == 0:
            return (1,)
        if self.dims == 1:
            return (self.mc,)
        return (self.mc, self.mcy)

    def build_state(self, nc: Optional[int] = None) -> LatticeState:
        nc = self.nc if nc is None else int(nc)
        if self.initial == "centered-blob":
            return centered_blob(self.shape, nc, self.blob_width)
        if self.initial == "explicit":
            a = np.reshape(np.array(self.a_counts, dtype=np.int64), self.shape)
            b = np.reshape(np.array(self.b_counts, dtype=np.int64), self.shape)
            return LatticeState.from_counts(a, b, nc)
        return uniform(self.shape, nc, self.a_frac, self.b_frac)


@dataclass(frozen=True)
class SweepConfig:
    """
    :param cost_sweep: "n" sweeps the sample size over n_values; "param" sweeps param over param_values.
    :param param: p_pred (p1 = p2) or m (m1 = m2).
    """
    n_values: Tuple[int, ...] = (10, 100, 1000, 10000)
    engines: Tuple[str, ...] = ("ensemble", "tau-leaping")
    cost_sweep: str = "n"
    param: str = "p_pred"
    param_values: Tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 0.9)
    repetitions: int = 3

    def __post_init__(self):
        unknown = [engine for engine in self.engines if engine not in ENGINES]
        if unknown:
            raise InvalidParameterError(f"Unknown engines {unknown} in engines, expected a subset of {ENGINES}")
        if self.cost_sweep not in COST_SWEEPS:
            raise InvalidParameterError(f"Unknown cost_sweep '{self.cost_sweep}', expected one of {COST_SWEEPS}")
        if self.param not in SWEEP_PARAMS:
            raise InvalidParameterError(f"Unknown param '{self.param}', expected one of {SWEEP_PARAMS}")
        if any(n < 1 for n in self.n_values):
            raise InvalidParameterError(f"n_values={list(self.n_values)} must be >= 1")
        if self.repetitions < 3:
            raise InvalidParameterError(f"repetitions={self.repetitions} must be >= 3")


@dataclass(frozen=True)
class SpectrumConfig:
    """:param cell: Cell index or "mean" for the cell-averaged density."""
    omega_min: float = 0.01
    omega_max: float = 1.0
    cell: str = "0"
    component: str = "f"
    detrend: bool = True

    def __post_init__(self):
        if not 0 <= self.omega_min < self.omega_max:
            raise InvalidParameterError(f"omega_min={self.omega_min}, omega_max={self.omega_max} must satisfy "
                                        f"0 <= omega_min < omega_max")
        if self.component not in ("f", "g"):
            raise InvalidParameterError(f"component={self.component} must be f or g")
        if self.cell != "mean" and not self.cell.isdigit():
            raise InvalidParameterError(f"cell={self.cell} must be a cell index or 'mean'")

    @property
    def cell_selector(self) -> Union[int, str]:
        return "mean" if self.cell == "mean" else int(self.cell)


def _default_out_dir() -> str:
    return os.getenv(OUT_DIR_ENV, DEFAULT_OUT_DIR)


@dataclass
class ExperimentConfig:
    """
    Everything one run of the cli needs. The engine seed, solver horizon and solver
    lattice spacing follow seed, engine.t_final and model.epsilon.
    """
    kind: str = "validate"
    seed: int = 0
    realizations: int = 1
    out_dir: str = field(default_factory=_default_out_dir)
    model: ModelParams = field(default_factory=ModelParams.reference_homogeneous)
    lattice: LatticeConfig = field(default_factory=LatticeConfig)
    engine: EngineConfig = field(default_factory=lambda: EngineConfig(record_stride=1.0))
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(boundary="zero-flux"))
    sweep: SweepConfig = field(default_factory=SweepConfig)
    spectrum: SpectrumConfig = field(default_factory=SpectrumConfig)
    source: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParameterError(f"Unknown kind '{self.kind}', expected one of {KINDS}")
        if self.realizations < 1:
            raise InvalidParameterError(f"realizations={self.realizations} must be >= 1")
        self.engine = self.engine.replace(seed=self.seed)
        self.solver = dataclasses.replace(self.solver, t_final=self.engine.t_final, epsilon=self.model.epsilon)


class _Reader:
    """Typed access to the loaded properties that reports bad values with key and line."""

    def __init__(self, path: Optional[str]):
        self.path = path

    def line(self, section: str, key: str) -> Optional[int]:
        return config_utils.find_key_line(self.path, key, section)

    def error(self, message: str, section: str, key: Optional[str]) -> ConfigError:
        line = self.line(section, key) if key else None
        return ConfigError(message, key=key, line=line)

    def get(self, section: str, key: str, convert: Callable, fallback):
        raw = config_utils.get_property(key, section)
        if raw is None or raw.strip() == "":
            return fallback
        try:
            return convert(raw.strip())
        except ValueError as e:
            raise self.error(f"Cannot parse [{section}] {key}={raw!r}: {e}", section, key) from e

    def get_list(self, section: str, key: str, getter: Callable, fallback):
        """
        Comma separated value read through one of the config_utils list getters.

        :param getter: config_utils.get_list_property or a typed variant.
        :return: A tuple of the converted items, or fallback when the key is unset or empty.
        """
        raw = config_utils.get_property(key, section)
        if raw is None or raw.strip() == "":
            return fallback
        try:
            return tuple(getter(key, section))
        except ValueError as e:
            raise self.error(f"Cannot parse [{section}] {key}={raw!r}: {e}", section, key) from e


def _int(raw: str) -> int:
    return int(raw)


def _bool(raw: str) -> bool:
    states = configparser.ConfigParser.BOOLEAN_STATES
    if raw.lower() not in states:
        raise ValueError(f"not a boolean: {raw}")
    return states[raw.lower()]


def _offending_key(message: str, keys: Sequence[str]) -> Optional[str]:
    """First schema key named in an invariant message."""
    best, position = None, None
    for key in keys:
        match = re.search(rf"\b{re.escape(key)}\b", message)
        if match and (position is None or match.start() < position):
            best, position = key, match.start()
    return best


def _check_schema(reader: _Reader):
    cp = config_utils.config
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"Unknown section [{section}]", key=section)
        for key in config_utils.explicit_keys(section):
            if key not in SCHEMA[section]:
                raise reader.error(f"Unknown key in [{section}]", section, key)
    known = {key for keys in SCHEMA.values() for key in keys}
    for key in cp.defaults():
        if key not in known:
            raise reader.error("Unknown key in DEFAULT", "DEFAULT", key)


def _build(reader: _Reader, section: str, builder: Callable):
    try:
        return builder()
    except (InvalidParameterError, ValueError) as e:
        key = _offending_key(str(e), SCHEMA[section])
        raise reader.error(f"Invalid [{section}] settings: {e}", section, key) from e


def parse_config(path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None) -> ExperimentConfig:
    """
    Builds a validated ExperimentConfig from an INI properties file, PREDPREY_* environment
    variables and command-line overrides (highest precedence). Missing model keys take the
    reference homogeneous rates.

    :param path: Experiment properties file; None uses defaults and overrides only.
    :param overrides: "section.key" -> value, as produced from command-line flags.
    :raises ConfigError: unknown key, unparsable value or invariant violation, with key and line.
    """
    try:
        config_utils.load_properties(path)
    except configparser.Error as e:
        raise ConfigError(f"Malformed properties file {path}: {e}", line=getattr(e, "lineno", None)) from e
    for name, value in (overrides or {}).items():
        section, key = name.split(".", 1)
        config_utils.set_property(key, str(value), section)
    reader = _Reader(path)
    _check_schema(reader)
    for section in SCHEMA:
        if not config_utils.config.has_section(section):
            config_utils.config.add_section(section)

    defaults = ModelParams.reference_homogeneous()
    model = _build(reader, "model", lambda: ModelParams(**{
        key: reader.get("model", key, float, getattr(defaults, key)) for key in SCHEMA["model"]}))

    lattice = _build(reader, "lattice", lambda: LatticeConfig(
        dims=reader.get("lattice", "dims", _int, 0),
        nc=reader.get("lattice", "nc", _int, 1000),
        mc=reader.get("lattice", "mc", _int, 50),
        mcy=reader.get("lattice", "mcy", _int, 50),
        initial=reader.get("lattice", "initial", str, "uniform"),
        a_frac=reader.get("lattice", "a_frac", float, 0.25),
        b_frac=reader.get("lattice", "b_frac", float, 0.5),
        blob_width=reader.get("lattice", "blob_width", float, 0.1),
        a_counts=reader.get_list("lattice", "a_counts", config_utils.get_int_list_property, None),
        b_counts=reader.get_list("lattice", "b_counts", config_utils.get_int_list_property, None),
    ))

    seed = reader.get("experiment", "seed", _int, 0)
    engine = _build(reader, "engine", lambda: EngineConfig(
        engine=reader.get("engine", "engine", str, "ensemble"),
        seed=seed,
        t_final=reader.get("engine", "t_final", float, 100.0),
        tau=reader.get("engine", "tau", float, None),
        epsilon_leap=reader.get("engine", "epsilon_leap", float, 0.5),
        record_stride=reader.get("engine", "record_stride", float, 1.0),
        kernel=reader.get("engine", "kernel", str, "agents"),
        tau_min=reader.get("engine", "tau_min", float, 1e-12),
        n_jobs=reader.get("engine", "n_jobs", _int, 1),
    ))
    tau_section = "engine" if engine.tau is not None else "model"
    _build(reader, tau_section, lambda: model.check_probabilities(engine.resolved_tau(model)))

    solver = _build(reader, "solver", lambda: SolverConfig(
        dt=reader.get("solver", "dt", float, 0.02),
        t_final=engine.t_final,
        boundary=reader.get("solver", "boundary", str, "zero-flux"),
        method=reader.get("solver", "method", str, "rk4"),
        rtol=reader.get("solver", "rtol", float, 1e-8),
        atol=reader.get("solver", "atol", float, 1e-10),
        output_stride=reader.get("solver", "output_stride", float, 1.0),
        epsilon=model.epsilon,
    ))

    sweep_defaults = SweepConfig()
    sweep = _build(reader, "sweep", lambda: SweepConfig(
        n_values=reader.get_list("sweep", "n_values", config_utils.get_int_list_property, sweep_defaults.n_values),
        engines=reader.get_list("sweep", "engines", config_utils.get_list_property, sweep_defaults.engines),
        cost_sweep=reader.get("sweep", "cost_sweep", str, "n"),
        param=reader.get("sweep", "param", str, "p_pred"),
        param_values=reader.get_list("sweep", "param_values", config_utils.get_float_list_property,
                                     sweep_defaults.param_values),
        repetitions=reader.get("sweep", "repetitions", _int, 3),
    ))

    spectrum = _build(reader, "spectrum", lambda: SpectrumConfig(
        omega_min=reader.get("spectrum", "omega_min", float, 0.01),
        omega_max=reader.get("spectrum", "omega_max", float, 1.0),
        cell=reader.get("spectrum", "cell", str, "0"),
        component=reader.get("spectrum", "component", str, "f"),
        detrend=reader.get("spectrum", "detrend", _bool, True),
    ))

    cfg = _build(reader, "experiment", lambda: ExperimentConfig(
        kind=reader.get("experiment", "kind", str, "validate"),
        seed=seed,
        realizations=reader.get("experiment", "realizations", _int, 1),
        out_dir=reader.get("experiment", "out_dir", str, _default_out_dir()),
        model=model,
        lattice=lattice,
        engine=engine,
        solver=solver,
        sweep=sweep,
        spectrum=spectrum,
        source=path,
    ))
    _check_required_sweeps(cfg, reader)
    logger.info(f"Experiment configured. kind={cfg.kind}, engine={cfg.engine.engine}, seed={cfg.seed}, "
                f"grid_shape={cfg.lattice.shape}, nc={cfg.lattice.nc}, params_hash={cfg.model.params_hash()}")
    return cfg


def _check_required_sweeps(cfg: ExperimentConfig, reader: _Reader):
    sweep = cfg.sweep
    if cfg.kind in ("convergence", "accuracy") or (cfg.kind == "cost" and sweep.cost_sweep == "n"):
        if not sweep.n_values:
            raise reader.error(f"kind={cfg.kind} needs a nonempty n_values", "sweep", "n_values")
    if cfg.kind == "cost" and sweep.cost_sweep == "param" and not sweep.param_values:
        raise reader.error("cost_sweep=param needs a nonempty param_values", "sweep", "param_values")
    if cfg.kind in ("cost", "accuracy") and not sweep.engines:
        raise reader.error(f"kind={cfg.kind} needs a nonempty engines list", "sweep", "engines")


def _format(value) -> Optional[str]:
    if value is None:
        return None
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(item) for item in value)
    return str(value)


def serialize_config(cfg: ExperimentConfig, path: Optional[str] = None) -> str:
    """
    Writes cfg in the properties schema read by parse_config; optional values that are
    unset are left out.

    :param path: Also write the text to this file when given.
    """
    sections = {
        "experiment": {"kind": cfg.kind, "seed": cfg.seed, "realizations": cfg.realizations, "out_dir": cfg.out_dir},
        "model": {key: getattr(cfg.model, key) for key in SCHEMA["model"]},
        "lattice": {key: getattr(cfg.lattice, key) for key in SCHEMA["lattice"]},
        "engine": {key: getattr(cfg.engine, key) for key in SCHEMA["engine"]},
        "solver": {key: getattr(cfg.solver, key) for key in SCHEMA["solver"]},
        "sweep": {key: getattr(cfg.sweep, key) for key in SCHEMA["sweep"]},
        "spectrum": {key: getattr(cfg.spectrum, key) for key in SCHEMA["spectrum"]},
    }
    cp = configparser.ConfigParser()
    for section, values in sections.items():
        cp.add_section(section)
        for key, value in values.items():
            text = _format(value)
            if text is not None:
                cp.set(section, key, text)
    buffer = io.StringIO()
    cp.write(buffer)
    text = buffer.getvalue()
    if path is not None:
        with open(path, "w", newline="\n") as f:
            f.write(text)
    return text


def _artifact(cfg: ExperimentConfig, artifacts: List[str], name: str) -> str:
    path = os.path.join(cfg.out_dir, name)
    artifacts.append(path)
    return path


def _equilibrium_or_none(cfg: ExperimentConfig, homogeneous: bool) -> Optional[List[float]]:
    try:
        return list(equilibrium(scale_params(cfg.model, homogeneous=homogeneous)))
    except PredPreyError as e:
        logger.warning(f"No equilibrium for this parameter set: {e}")
        return None


def _final_means(traj: Trajectory) -> dict:
    return {"final_f_mean": float(traj.cell_mean("f")[-1]), "final_g_mean": float(traj.cell_mean("g")[-1])}


def _run_simulate(cfg: ExperimentConfig, artifacts: List[str]) -> dict:
    state0 = cfg.lattice.build_state()
    trajs = run_realizations(state0, cfg.model, cfg.engine, cfg.realizations)
    write_trajectory_csv(_artifact(cfg, artifacts, "trajectory.csv"), trajs[0])
    summary = {"engine": cfg.engine.engine, "realizations": cfg.realizations, "metadata": trajs[0].metadata}
    if cfg.realizations > 1:
        mean = mean_trajectory(trajs)
        write_trajectory_csv(_artifact(cfg, artifacts, "mean_trajectory.csv"), mean)
        summary.update(_final_means(mean))
    else:
        summary.update(_final_means(trajs[0]))
    write_json(_artifact(cfg, artifacts, "simulate.json"), summary)
    return summary


def _run_meanfield(cfg: ExperimentConfig, artifacts: List[str]) -> dict:
    state0 = cfg.lattice.build_state()
    sp = scale_params(cfg.model, homogeneous=state0.is_homogeneous)
    traj = solution_to_trajectory(integrate(Field.from_state(state0), sp, cfg.solver))
    write_trajectory_csv(_artifact(cfg, artifacts, "meanfield.csv"), traj)
    summary = {"equilibrium": _equilibrium_or_none(cfg, state0.is_homogeneous), "boundary": cfg.solver.boundary,
               "method": cfg.solver.method}
    summary.update(_final_means(traj))
    write_json(_artifact(cfg, artifacts, "meanfield.json"), summary)
    return summary


def _run_validate(cfg: ExperimentConfig, artifacts: List[str]) -> dict:
    state0 = cfg.lattice.build_state()
    mean = mean_trajectory(run_realizations(state0, cfg.model, cfg.engine, cfg.realizations))
    reference = meanfield_reference(state0, cfg.model, cfg.engine, solver=cfg.solver)
    e_f, e_g = error_vs_meanfield(mean, reference)
    t_after = SETTLE_FRACTION * cfg.engine.t_final
    after = mean.times > t_after
    deviation = {}
    for component in ("f", "g"):
        gap = np.abs(mean.cell_mean(component) - reference.cell_mean(component))
        deviation[component] = float(gap[after].max()) if after.any() else None
    write_trajectory_csv(_artifact(cfg, artifacts, "stochastic.csv"), mean)
    write_trajectory_csv(_artifact(cfg, artifacts, "meanfield.csv"), reference)
    summary = {
        "engine": cfg.engine.engine,
        "realizations": cfg.realizations,
        "e_f": e_f,
        "e_g": e_g,
        "t_after": t_after,
        "max_deviation_f_after": deviation["f"],
        "max_deviation_g_after": deviation["g"],
        "equilibrium": _equilibrium_or_none(cfg, state0.is_homogeneous),
    }
    write_json(_artifact(cfg, artifacts, "validate.json"), summary)
    return summary


def _run_convergence(cfg: ExperimentConfig, artifacts: List[str]) -> dict:
    report = convergence_study(cfg.model, cfg.engine, cfg.sweep.n_values, cfg.realizations,
                               state_builder=lambda n: cfg.lattice.build_state(nc=n), solver=cfg.solver)
    payload = report.to_dict()
    write_json(_artifact(cfg, artifacts, "convergence.json"), payload)
    return {"slope_f": report.slope_f, "slope_g": report.slope_g}


def _param_builder(cfg: ExperimentConfig) -> Callable[[float], ModelParams]:
    if cfg.sweep.param == "m":
        return lambda v: cfg.model.replace(m1_r=v, m2_r=v)
    return lambda v: cfg.model.replace(p1_r=v, p2_r=v)


def _run_cost(cfg: ExperimentConfig, artifacts: List[str]) -> dict:
    sweep = cfg.sweep
    if sweep.cost_sweep == "n":
        values = list(sweep.n_values)
        report = benchmark_cost(sweep.engines, cfg.model, cfg.engine, values,
                                state_builder=lambda n: cfg.lattice.build_state(nc=int(n)), sweep="n",
                                repetitions=sweep.repetitions)
    else:
        values = list(sweep.param_values)
        report = benchmark_cost(sweep.engines, cfg.model, cfg.engine, values,
                                state_builder=lambda _: cfg.lattice.build_state(), sweep="param",
                                param_builder=_param_builder(cfg), repetitions=sweep.repetitions)
    write_json(_artifact(cfg, artifacts, "cost.json"), report.to_dict())
    return {"exponents": report.exponents}


def _run_accuracy(cfg: ExperimentConfig, artifacts: List[str]) -> dict:
    engines = [engine for engine in cfg.sweep.engines if engine != "direct"]
    reports = accuracy_study(cfg.model, cfg.engine, engines, cfg.sweep.n_values, cfg.realizations,
                             shape=cfg.lattice.shape, a_frac=cfg.lattice.a_frac, b_frac=cfg.lattice.b_frac)
    tradeoff = []
    for engine, report in reports.items():
        for n, e_f, e_g, wall in zip(report.values, report.e_f, report.e_g, report.wall_times):
            tradeoff.append({"engine": engine, "n": n, "e_f": e_f, "e_g": e_g, "wall_time": wall})
    write_json(_artifact(cfg, artifacts, "accuracy.json"),
               {"reports": {engine: report.to_dict() for engine, report in reports.items()}, "tradeoff": tradeoff})
    return {engine: {"slope_f": report.slope_f} for engine, report in reports.items()}


def _run_spectrum(cfg: ExperimentConfig, artifacts: List[str]) -> dict:
    spec = cfg.spectrum
    state0 = cfg.lattice.build_state()
    trajs = run_realizations(state0, cfg.model, cfg.engine, cfg.realizations)
    empirical = empirical_spectrum(trajs, detrend=spec.detrend, cell=spec.cell_selector, component=spec.component)
    payload = {"empirical": empirical.to_dict(), "empirical_peak": peak_frequency(empirical, spec.omega_min),
               "cell": spec.cell, "component": spec.component}

    if state0.is_homogeneous and spec.component == "f":
        model = build_linear_model(scale_params(cfg.model, homogeneous=True), state0.nc)
        analytical = analytical_spectrum(model, empirical.omega)
        theta, lam = theta_lambda(model)
        payload.update({
            "analytical": analytical.to_dict(),
            "analytical_peak": peak_frequency(analytical, spec.omega_min),
            "relative_l2_error": relative_l2_error(analytical, empirical, (spec.omega_min, spec.omega_max)),
            "theta": theta,
            "lambda": lam,
            "omega0_squared": model.omega0_squared,
            "gamma": model.gamma,
        })
        noise_free = build_linear_model(scale_params(cfg.model, homogeneous=True), float("inf"))
        try:
            decay = fit_envelope_decay(simulate_langevin_linear(noise_free, cfg.engine, noise=False))
            payload["envelope_decay"] = decay
        except FitError as e:
            logger.warning(f"Envelope decay not measured: {e}")
    else:
        logger.info("Analytical spectrum skipped: it covers the homogeneous predator density only")
    write_json(_artifact(cfg, artifacts, "spectrum.json"), payload)
    return {key: payload[key] for key in ("empirical_peak", "analytical_peak", "relative_l2_error") if key in payload}


RUNNERS: Dict[str, Callable[[ExperimentConfig, List[str]], dict]] = {
    "simulate": _run_simulate,
    "meanfield": _run_meanfield,
    "validate": _run_validate,
    "convergence": _run_convergence,
    "cost": _run_cost,
    "accuracy": _run_accuracy,
    "spectrum": _run_spectrum,
}


def run_experiment(cfg: ExperimentConfig) -> int:
    """
    Runs the configured experiment and writes its CSV/JSON artifacts, the effective
    config and manifest.json into cfg.out_dir.

    :return: 0 on success.
    :raises ExperimentError: any model, engine or I/O failure, with the experiment kind attached.
    """
    artifacts: List[str] = []
    logger.info(f"Experiment started. kind={cfg.kind}, out_dir={cfg.out_dir}")
    try:
        os.makedirs(cfg.out_dir, exist_ok=True)
        summary = RUNNERS[cfg.kind](cfg, artifacts)
        serialize_config(cfg, _artifact(cfg, artifacts, "config.ini"))
        write_manifest(cfg.out_dir, {
            "kind": cfg.kind,
            "engine": cfg.engine.engine,
            "seed": cfg.seed,
            "realizations": cfg.realizations,
            "params": dataclasses.asdict(cfg.model),
            "params_hash": cfg.model.params_hash(),
            "grid_shape": list(cfg.lattice.shape),
            "nc": cfg.lattice.nc,
            "version": __version__,
            "summary": summary,
        }, artifacts)
    except ExperimentError:
        raise
    except (PredPreyError, OSError) as e:
        raise ExperimentError(cfg.kind, e) from e
    logger.info(f"Experiment finished. kind={cfg.kind}, artifacts={len(artifacts) + 1}")
    return 0


# flag dest -> "section.key"
FLAG_KEYS = {
    "seed": "experiment.seed",
    "realizations": "experiment.realizations",
    "out_dir": "experiment.out_dir",
    "engine": "engine.engine",
    "t_final": "engine.t_final",
    "tau": "engine.tau",
    "record_stride": "engine.record_stride",
    "kernel": "engine.kernel",
    "n_jobs": "engine.n_jobs",
    "nc": "lattice.nc",
    "dims": "lattice.dims",
    "mc": "lattice.mc",
    "mcy": "lattice.mcy",
    "initial": "lattice.initial",
    "n_values": "sweep.n_values",
    "engines": "sweep.engines",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Experiment properties file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", dest="out_dir", help=f"Output directory (default ${OUT_DIR_ENV} or {DEFAULT_OUT_DIR})")
    common.add_argument("--engine", choices=ENGINES)
    common.add_argument("--log-level", dest="log_level", default="INFO")
    common.add_argument("--n", "--nc", dest="nc", type=int, help="N for the homogeneous model, Nc per cell otherwise")
    common.add_argument("--dims", type=int, choices=(0, 1, 2))
    common.add_argument("--mc", type=int)
    common.add_argument("--mcy", type=int)
    common.add_argument("--initial", choices=INITIAL_CONDITIONS)
    common.add_argument("--t-final", dest="t_final", type=float)
    common.add_argument("--tau", type=float)
    common.add_argument("--record-stride", dest="record_stride", type=float)
    common.add_argument("--kernel", choices=KERNELS)
    common.add_argument("--n-jobs", dest="n_jobs", type=int)
    common.add_argument("--realizations", type=int)
    common.add_argument("--n-values", dest="n_values", help="Comma separated sample sizes")
    common.add_argument("--engines", help="Comma separated engines for cost and accuracy")

    parser = argparse.ArgumentParser(prog="predprey-sim", description="Lattice predator-prey experiments")
    subparsers = parser.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        subparsers.add_parser(kind, parents=[common])
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, str]:
    overrides = {"experiment.kind": args.kind}
    for dest, name in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[name] = str(value)
    return overrides


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.out_dir or _default_out_dir(), args.log_level, disable_file_handler=True)
    try:
        cfg = parse_config(args.config, overrides_from_args(args))
        setup_logging(cfg.out_dir, args.log_level, log_file="predprey-sim.log")
        return run_experiment(cfg)
    except (PredPreyError, FileNotFoundError) as e:
        logger.error(f"predprey-sim {args.kind} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
