"""TOML run configuration: coefficient registry, model and sampler builders.

Coefficients in config files are picked from a fixed registry of named forms
with numeric parameters; no code is ever loaded at runtime.  LQ problems are
configured through the catalog; general one-dimensional problems assemble
their coefficients form by form.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass
from typing import Callable

import numpy as np

if sys.version_info >= (3, 11):  # pragma: no cover
    import tomllib
else:
    import tomli as tomllib

from . import rng
from .model import (
    LqModelSpec,
    ModelSpec,
    ParameterError,
    build_general_catalog,
    build_lq_catalog,
    uniform_control_grid,
)
from .simulate import gaussian_sampler, point_sampler, uniform_sampler


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


# ---------------------------------------------------------------------------
# coefficient registry (general 1-D models)
# ---------------------------------------------------------------------------

def _tau_weight(params: dict) -> Callable:
    kind = params.pop("tau_weight", "none")
    rate = float(params.pop("tau_rate", 1.0))
    if kind == "none":
        return lambda s: np.ones_like(np.asarray(s, dtype=float))
    if kind == "hyperbolic":
        return lambda s: 1.0 / (1.0 + rate * np.maximum(np.asarray(s, dtype=float), 0.0))
    if kind == "exponential":
        return lambda s: np.exp(-rate * np.maximum(np.asarray(s, dtype=float), 0.0))
    raise ConfigError(f"unknown tau_weight {kind!r}")


def _state_form(table: dict) -> Callable:
    """Forms for (t, x, m) coefficients: constant, affine, sin_plus_affine."""
    params = dict(table)
    form = params.pop("form", None)
    if form == "constant":
        value = float(params.pop("value"))
        _done(form, params)
        return lambda t, x, m: np.full_like(np.asarray(x, dtype=float), value)
    if form == "affine":
        const = float(params.pop("const", 0.0))
        slope_x = float(params.pop("slope_x", 0.0))
        slope_mean = float(params.pop("slope_mean", 0.0))
        _done(form, params)
        return lambda t, x, m: const + slope_x * x + slope_mean * np.asarray(m.mean)[..., 0]
    if form == "sin_plus_affine":
        amplitude = float(params.pop("amplitude", 1.0))
        frequency = float(params.pop("frequency", 1.0))
        phase = float(params.pop("phase", 0.0))
        const = float(params.pop("const", 0.0))
        slope_x = float(params.pop("slope_x", 0.0))
        slope_mean = float(params.pop("slope_mean", 0.0))
        _done(form, params)
        return (
            lambda t, x, m: amplitude * np.sin(frequency * x + phase)
            + const
            + slope_x * x
            + slope_mean * np.asarray(m.mean)[..., 0]
        )
    raise ConfigError(f"unknown state coefficient form {form!r}")


def _control_drift_form(table: dict) -> Callable:
    params = dict(table)
    form = params.pop("form", None)
    if form == "linear_control":
        gain = float(params.pop("gain", 1.0))
        _done(form, params)
        return lambda t, x, v: gain * v
    if form == "zero":
        _done(form, params)
        return lambda t, x, v: np.zeros_like(np.asarray(x, dtype=float))
    raise ConfigError(f"unknown control drift form {form!r}")


def _state_cost_form(table: dict, terminal: bool, horizon: float) -> Callable:
    params = dict(table)
    form = params.pop("form", None)
    if form == "zero":
        _done(form, params)
        if terminal:
            return lambda tau, x, m: np.zeros_like(np.asarray(x, dtype=float))
        return lambda tau, t, x, m: np.zeros_like(np.asarray(x, dtype=float))
    if form == "quadratic_state":
        weight = float(params.pop("weight", 1.0))
        target = float(params.pop("target", 0.0))
        w = _tau_weight(params)
        _done(form, params)
        if terminal:
            return lambda tau, x, m: weight * w(horizon - tau) * (x - target) ** 2
        return lambda tau, t, x, m: weight * w(t - tau) * (x - target) ** 2
    raise ConfigError(f"unknown state cost form {form!r}")


def _control_cost_form(table: dict) -> tuple[Callable, float]:
    params = dict(table)
    form = params.pop("form", None)
    if form == "quadratic_control":
        weight = float(params.pop("weight", 1.0))
        if weight <= 0:
            raise ConfigError("control cost weight must be positive")
        w = _tau_weight(params)
        _done(form, params)
        return (lambda tau, t, x, v: weight * w(t - tau) * v * v), weight
    raise ConfigError(f"unknown control cost form {form!r}")


def _done(form: str, params: dict) -> None:
    if params:
        raise ConfigError(f"unknown parameters for form {form!r}: {sorted(params)}")


def general_model_from_tables(tables: dict) -> ModelSpec:
    """Assemble a general 1-D model from `[model.*]` coefficient tables."""
    params = dict(tables)
    params.pop("kind", None)
    horizon = float(params.pop("horizon", 1.0))
    control_dim = int(params.pop("control_dim", 1))
    if control_dim != 1:
        raise ConfigError("config-built general models are scalar-control")
    try:
        drift_state = _state_form(params.pop("drift_state"))
        drift_control_table = dict(params.pop("drift_control"))
        diffusion = _state_form(params.pop("diffusion"))
        running_state = _state_cost_form(params.pop("running_cost_state", {"form": "zero"}), False, horizon)
        control_cost_table = dict(params.pop("running_cost_control"))
        terminal = _state_cost_form(params.pop("terminal_cost", {"form": "zero"}), True, horizon)
        response_table = dict(params.pop("best_response", {}))
    except KeyError as exc:
        raise ConfigError(f"missing model section {exc}") from exc

    gain = float(drift_control_table.get("gain", 1.0))
    drift_control = _control_drift_form(drift_control_table)
    running_control, control_weight = _control_cost_form(control_cost_table)

    response = None
    control_grid = None
    form = response_table.pop("form", "derived")
    if form == "derived":
        # linear control drift + pure quadratic control cost: argmin is -gain q / (2 weight)
        if response_table:
            raise ConfigError("derived best response takes no parameters")
        if dict(control_cost_table).get("tau_weight", "none") != "none":
            raise ConfigError("derived best response needs an evaluation-time-free control cost")
        response = lambda t, x, q: -gain * q / (2.0 * control_weight)
    elif form == "scaled_gradient":
        coef = float(response_table.pop("coef"))
        _done(form, response_table)
        response = lambda t, x, q: coef * q
    elif form == "grid":
        lo = float(response_table.pop("lo"))
        hi = float(response_table.pop("hi"))
        resolution = int(response_table.pop("resolution", 201))
        _done(form, response_table)
        control_grid = uniform_control_grid(lo, hi, resolution)
    else:
        raise ConfigError(f"unknown best response form {form!r}")

    if params:
        raise ConfigError(f"unknown model entries: {sorted(params)}")
    return ModelSpec(
        horizon=horizon,
        drift_state=drift_state,
        drift_control=drift_control,
        diffusion=diffusion,
        running_cost_state=running_state,
        running_cost_control=running_control,
        terminal_cost=terminal,
        best_response=response,
        control_grid=control_grid,
        label="general-config",
    )


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    model: LqModelSpec | ModelSpec
    model_kind: str
    init_sampler: Callable
    seed: int
    n_particles: int
    n_steps: int
    max_iter: int
    tol_fp: float | None
    tol_fp_rel: float
    backend: str
    damping: float
    k_x: int
    x_domain: tuple[float, float] | None
    spike_paths: int
    eps_ladder: tuple[float, ...] | None
    checks: tuple[str, ...]
    output_dir: str
    dump_paths: bool
    raw_bytes: bytes


def _initial_sampler_from(table: dict) -> Callable:
    params = dict(table)
    law = params.pop("law", "gaussian")
    if law == "gaussian":
        mean = params.pop("mean", 0.0)
        sd = params.pop("sd", 1.0)
        _done(law, params)
        return gaussian_sampler(mean, sd)
    if law == "point":
        x0 = params.pop("x0", 0.0)
        _done(law, params)
        return point_sampler(x0)
    if law == "uniform":
        lo = params.pop("lo", -1.0)
        hi = params.pop("hi", 1.0)
        _done(law, params)
        return uniform_sampler(lo, hi)
    raise ConfigError(f"unknown initial law {law!r}")


def load_run_config(path, seed_override: int | None = None) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
        data = tomllib.loads(raw.decode("utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc

    try:
        model_table = dict(data["model"])
    except KeyError as exc:
        raise ConfigError("missing [model] section") from exc
    kind = model_table.pop("kind", "lq_catalog")
    try:
        if kind == "lq_catalog":
            name = model_table.pop("name")
            model = build_lq_catalog(name, **model_table.pop("params", {}))
            if model_table:
                raise ConfigError(f"unknown model entries: {sorted(model_table)}")
        elif kind == "general_catalog":
            name = model_table.pop("name")
            model = build_general_catalog(name, **model_table.pop("params", {}))
            if model_table:
                raise ConfigError(f"unknown model entries: {sorted(model_table)}")
        elif kind == "general":
            model = general_model_from_tables(model_table)
        else:
            raise ConfigError(f"unknown model kind {kind!r}")
    except (ParameterError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc

    init_sampler = _initial_sampler_from(data.get("initial", {}))

    numerics = dict(data.get("numerics", {}))
    n_particles = int(numerics.pop("n_particles", 4000))
    n_steps = int(numerics.pop("n_steps", 100))
    max_iter = int(numerics.pop("max_iter", 25))
    tol_fp = numerics.pop("tol_fp", None)
    tol_fp = float(tol_fp) if tol_fp is not None else None
    tol_fp_rel = float(numerics.pop("tol_fp_rel", 1e-3))
    backend = numerics.pop("backend", "riccati" if isinstance(model, LqModelSpec) else "hjb1d")
    damping = float(numerics.pop("damping", 1.0))
    k_x = int(numerics.pop("k_x", 200))
    x_lo = numerics.pop("x_lo", None)
    x_hi = numerics.pop("x_hi", None)
    x_domain = (float(x_lo), float(x_hi)) if x_lo is not None and x_hi is not None else None
    spike_paths = int(numerics.pop("spike_paths", 4000))
    ladder = numerics.pop("eps_ladder", None)
    eps_ladder = tuple(float(e) for e in ladder) if ladder is not None else None
    if numerics:
        raise ConfigError(f"unknown numerics entries: {sorted(numerics)}")
    if n_particles < 2 or n_steps < 1 or max_iter < 1:
        raise ConfigError("numerics must be positive (n_particles >= 2, n_steps >= 1, max_iter >= 1)")

    run_table = dict(data.get("run", {}))
    raw_checks = run_table.pop("checks", ["consistency", "spike"])
    if isinstance(raw_checks, str) or not isinstance(raw_checks, (list, tuple)):
        raise ConfigError("run.checks must be an array of check names")
    checks = tuple(raw_checks)
    unknown = set(checks) - {"consistency", "spike"}
    if unknown:
        raise ConfigError(f"unknown checks: {sorted(unknown)}")
    if run_table:
        raise ConfigError(f"unknown run entries: {sorted(run_table)}")

    output = dict(data.get("output", {}))
    output_dir = str(output.pop("directory", "ticmkv-out"))
    dump_paths = bool(output.pop("dump_paths", False))
    if output:
        raise ConfigError(f"unknown output entries: {sorted(output)}")

    seed = seed_override if seed_override is not None else int(data.get("seed", 0))
    try:
        rng.check_seed(seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    if backend == "riccati" and not isinstance(model, LqModelSpec):
        raise ConfigError("the riccati backend needs an LQ model")
    if backend == "hjb1d" and not isinstance(model, ModelSpec):
        raise ConfigError("the hjb1d backend needs a general model")

    return RunConfig(
        model=model,
        model_kind=kind,
        init_sampler=init_sampler,
        seed=seed,
        n_particles=n_particles,
        n_steps=n_steps,
        max_iter=max_iter,
        tol_fp=tol_fp,
        tol_fp_rel=tol_fp_rel,
        backend=backend,
        damping=damping,
        k_x=k_x,
        x_domain=x_domain,
        spike_paths=spike_paths,
        eps_ladder=eps_ladder,
        checks=checks,
        output_dir=output_dir,
        dump_paths=dump_paths,
        raw_bytes=raw,
    )
