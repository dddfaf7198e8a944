"""Problem specifications: coefficients, costs, and built-in catalogs.

Two families are supported.  :class:`ModelSpec` is the general one-dimensional
form with the structural split drift = state part + control part and running
cost = state part + control part; the split is what makes the pointwise best
response independent of the frozen measure, so it is baked into the type
rather than checked.  :class:`LqModelSpec` is the semi-linear family with
quadratic costs whose backward solve reduces to a two-time Riccati system and
which supports general state dimension.

All running/terminal costs carry an extra evaluation-time argument ``tau``:
costs re-weighted by when they are being judged are exactly what makes the
problem time-inconsistent.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .measures import MomentVector


class ParameterError(ValueError):
    """Raised for out-of-range catalog parameters or malformed specs."""


def _ones_like_state(x, value) -> np.ndarray:
    return np.broadcast_to(np.asarray(value, dtype=float), np.shape(x)).copy()


# ---------------------------------------------------------------------------
# General 1-D specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """General d=1 problem with split drift and split running cost.

    Coefficient callables are vectorized over the state: ``x``, ``v`` and
    ``q`` arrive as ``(n,)`` arrays (controls as ``(n, l)`` when
    ``control_dim > 1``) and must return ``(n,)`` arrays, broadcasting against
    batched moment vectors where those appear.

    ``best_response(t, x, q)`` is the closed-form minimizer of
    ``q * drift_control(t, x, v) + running_cost_control(t, t, x, v)`` over the
    control space; leave it ``None`` to minimize numerically over
    ``control_grid`` (smallest-index tie break).
    """

    horizon: float
    drift_state: Callable        # (t, x, m) -> (n,)
    drift_control: Callable      # (t, x, v) -> (n,)
    diffusion: Callable          # (t, x, m) -> (n,)
    running_cost_state: Callable    # (tau, t, x, m) -> (n,)
    running_cost_control: Callable  # (tau, t, x, v) -> (n,)
    terminal_cost: Callable      # (tau, x, m) -> (n,)
    best_response: Callable | None = None   # (t, x, q) -> (n,)
    control_grid: np.ndarray | None = None
    control_dim: int = 1
    lipschitz_coeff: float | None = None
    lipschitz_best_response: float | None = None
    functionals: tuple = ()
    label: str = "general"

    dim: int = 1

    def __post_init__(self):
        if self.dim != 1:
            raise ParameterError("the general specification is one-dimensional")
        if self.horizon <= 0:
            raise ParameterError("horizon must be positive")
        if self.control_grid is not None:
            grid = np.asarray(self.control_grid, dtype=float)
            if grid.ndim == 1:
                grid = grid[:, None]
            if grid.shape[0] < 1 or grid.shape[1] != self.control_dim:
                raise ParameterError("control_grid must be (m, control_dim) with m >= 1")
            object.__setattr__(self, "control_grid", grid)

    # --- uniform simulation interface (state blocks are (n, 1)) ---

    def _flat_control(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.control_dim == 1:
            return u.reshape(-1) if u.ndim > 1 else u
        return u

    def drift(self, t: float, x_block: np.ndarray, m: MomentVector, u: np.ndarray) -> np.ndarray:
        x = x_block[:, 0]
        v = self._flat_control(u)
        out = self.drift_state(t, x, m) + self.drift_control(t, x, v)
        return np.asarray(out, dtype=float).reshape(-1, 1)

    def noise_loading(self, t: float, x_block: np.ndarray, m: MomentVector) -> np.ndarray:
        vals = self.diffusion(t, x_block[:, 0], m)
        return _ones_like_state(x_block[:, 0], vals).reshape(-1, 1)

    def running_cost(self, tau: float, t: float, x_block: np.ndarray, u: np.ndarray, m: MomentVector) -> np.ndarray:
        x = x_block[:, 0]
        v = self._flat_control(u)
        out = self.running_cost_state(tau, t, x, m) + self.running_cost_control(tau, t, x, v)
        return _ones_like_state(x, out)

    def terminal_cost_values(self, tau: float, x_block: np.ndarray, m: MomentVector) -> np.ndarray:
        return _ones_like_state(x_block[:, 0], self.terminal_cost(tau, x_block[:, 0], m))


def best_response(model: ModelSpec, t: float, x, q) -> np.ndarray:
    """Minimizer of q * drift_control + diagonal control cost at (t, x).

    Uses the model's closed form when present, otherwise an exhaustive search
    over ``control_grid`` with smallest-index tie break.  Returns ``(n,)``
    controls for scalar control, ``(n, l)`` otherwise.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    q = np.broadcast_to(np.asarray(q, dtype=float), x.shape)
    if model.best_response is not None:
        out = np.asarray(model.best_response(t, x, q), dtype=float)
        if model.control_dim == 1:
            return _ones_like_state(x, out)
        return out
    if model.control_grid is None:
        raise ParameterError("model declares neither a closed-form best response nor a control grid")
    objective = np.empty((x.size, model.control_grid.shape[0]))
    for j, candidate in enumerate(model.control_grid):
        v = (
            np.full(x.shape, candidate[0])
            if model.control_dim == 1
            else np.broadcast_to(candidate, (x.size, model.control_dim))
        )
        objective[:, j] = q * model.drift_control(t, x, v) + model.running_cost_control(t, t, x, v)
    if not np.all(np.isfinite(objective)):
        raise ParameterError("non-finite objective on the control grid")
    idx = np.argmin(objective, axis=1)  # argmin returns the first (smallest) index on ties
    chosen = model.control_grid[idx]
    return chosen[:, 0] if model.control_dim == 1 else chosen


def uniform_control_grid(lo: float, hi: float, resolution: int = 201) -> np.ndarray:
    return np.linspace(lo, hi, resolution)


# ---------------------------------------------------------------------------
# Semi-linear quadratic specification
# ---------------------------------------------------------------------------

def _zero_offset(*_args) -> float:
    return 0.0


@dataclass(frozen=True)
class LqModelSpec:
    """Semi-linear dynamics dX = [A(t)X + B(t)u + forcing(t, m)]dt + noise(t, m)dW
    (scalar Brownian) with quadratic costs.

    Running cost x'Q(tau;t)x + u'R(tau;t)u plus the measure-only offset
    ``running_offset(tau, t, m)``; terminal cost x'G(tau)x plus
    ``terminal_offset(tau, m)``.  ``Q``, ``R`` and the offsets should accept a
    vector first argument (an array of tau values) for fast row-family
    evaluation; scalar-only callables are handled by a slow fallback.
    """

    dim: int
    control_dim: int
    horizon: float
    A: Callable                 # (t,) -> (d, d)
    B: Callable                 # (t,) -> (d, l)
    forcing: Callable           # (t, m) -> (d,)
    noise: Callable             # (t, m) -> (d,)
    Q: Callable                 # (tau, t) -> (d, d)
    R: Callable                 # (tau, t) -> (l, l)
    G: Callable                 # (tau,) -> (d, d)
    running_offset: Callable = _zero_offset   # (tau, t, m) -> float
    terminal_offset: Callable = _zero_offset  # (tau, m) -> float
    dissipativity_margin: float | None = None
    functionals: tuple = ()
    label: str = "lq"

    def __post_init__(self):
        if self.dim < 1 or self.control_dim < 1 or self.horizon <= 0:
            raise ParameterError("dim, control_dim and horizon must be positive")

    # --- matrix evaluation helpers ---

    def A_at(self, t: float) -> np.ndarray:
        return np.asarray(self.A(t), dtype=float).reshape(self.dim, self.dim)

    def B_at(self, t: float) -> np.ndarray:
        return np.asarray(self.B(t), dtype=float).reshape(self.dim, self.control_dim)

    def Q_at(self, tau: float, t: float) -> np.ndarray:
        return np.asarray(self.Q(tau, t), dtype=float).reshape(self.dim, self.dim)

    def R_at(self, tau: float, t: float) -> np.ndarray:
        return np.asarray(self.R(tau, t), dtype=float).reshape(self.control_dim, self.control_dim)

    def G_at(self, tau: float) -> np.ndarray:
        return np.asarray(self.G(tau), dtype=float).reshape(self.dim, self.dim)

    def forcing_at(self, t: float, m: MomentVector) -> np.ndarray:
        return np.asarray(self.forcing(t, m), dtype=float).reshape(self.dim)

    def noise_at(self, t: float, m: MomentVector) -> np.ndarray:
        return np.asarray(self.noise(t, m), dtype=float).reshape(self.dim)

    # --- uniform simulation interface ---

    def drift(self, t: float, x_block: np.ndarray, m: MomentVector, u: np.ndarray) -> np.ndarray:
        base = x_block @ self.A_at(t).T + np.asarray(u, dtype=float).reshape(-1, self.control_dim) @ self.B_at(t).T
        shift = np.asarray(self.forcing(t, m), dtype=float)
        if shift.ndim == 1:
            return base + shift
        return base + shift.reshape(x_block.shape)

    def noise_loading(self, t: float, x_block: np.ndarray, m: MomentVector) -> np.ndarray:
        load = np.asarray(self.noise(t, m), dtype=float)
        if load.ndim == 1:
            return np.broadcast_to(load, x_block.shape).copy()
        return load.reshape(x_block.shape)

    def running_cost(self, tau: float, t: float, x_block: np.ndarray, u: np.ndarray, m: MomentVector) -> np.ndarray:
        u = np.asarray(u, dtype=float).reshape(-1, self.control_dim)
        qx = np.einsum("ni,ij,nj->n", x_block, self.Q_at(tau, t), x_block)
        ru = np.einsum("ni,ij,nj->n", u, self.R_at(tau, t), u)
        return qx + ru + float(self.running_offset(tau, t, m))

    def terminal_cost_values(self, tau: float, x_block: np.ndarray, m: MomentVector) -> np.ndarray:
        gx = np.einsum("ni,ij,nj->n", x_block, self.G_at(tau), x_block)
        return gx + float(self.terminal_offset(tau, m))

    # --- invariants ---

    def validate(self, grid: np.ndarray, sym_tol: float = 1e-12) -> None:
        """Check symmetry, R(t,t) positive definiteness, and G >= 0 on a grid."""
        grid = np.asarray(grid, dtype=float)
        taus = grid[:: max(1, grid.size // 8)]
        for t in taus:
            for tau in taus[taus <= t + 1e-15]:
                for name, mat in (("Q", self.Q_at(tau, t)), ("R", self.R_at(tau, t))):
                    if np.max(np.abs(mat - mat.T)) > sym_tol:
                        raise ParameterError(f"{name}({tau}; {t}) is not symmetric")
            r_diag = self.R_at(t, t)
            if np.min(np.linalg.eigvalsh(r_diag)) <= 0.0:
                raise ParameterError(f"R(t, t) not positive definite at t = {t}")
            g = self.G_at(t)
            if np.max(np.abs(g - g.T)) > sym_tol:
                raise ParameterError(f"G({t}) is not symmetric")
            if np.min(np.linalg.eigvalsh(g)) < -sym_tol:
                raise ParameterError(f"G({t}) is not positive semidefinite")


def eval_tau_grid(fn: Callable, taus: np.ndarray, t: float, trailing_shape: tuple) -> np.ndarray:
    """Evaluate fn(tau, t) for every tau, vectorized when the callable allows it."""
    taus = np.asarray(taus, dtype=float)
    want = (taus.size, *trailing_shape)
    try:
        out = np.asarray(fn(taus, t), dtype=float)
        if out.shape == want:
            return out
        if trailing_shape and out.shape == taus.shape:
            # scalar-valued vectorization of a 1x1 matrix coefficient
            return out.reshape(want)
    except Exception:
        pass
    return np.stack([np.asarray(fn(tau, t), dtype=float).reshape(trailing_shape) for tau in taus])


# ---------------------------------------------------------------------------
# Catalogs
# ---------------------------------------------------------------------------

def _const_matrix(value: float, d: int) -> np.ndarray:
    return float(value) * np.eye(d)


def _hyperbolic(rate: float):
    def weight(s):
        return 1.0 / (1.0 + rate * np.maximum(np.asarray(s, dtype=float), 0.0))

    return weight


def _mean_forcing(coupling: float, d: int):
    def forcing(t, m: MomentVector):
        mean = np.asarray(m.mean, dtype=float)
        return coupling * mean

    return forcing


def build_lq_catalog(name: str, **params) -> LqModelSpec:
    """Instantiate a built-in semi-linear quadratic test problem.

    ``time_consistent_baseline``
        Evaluation-time independent costs; the backward family collapses to
        the classical single-parameter solve.  Parameters: ``dim``,
        ``horizon``, ``drift`` (A), ``gain`` (B), ``state_weight`` (Q),
        ``control_weight`` (R), ``terminal_weight`` (G), ``coupling`` (mean
        feedback in the forcing), ``sigma``.

    ``dissipative_meanfield``
        A = (-margin + drift_residual) I with hyperbolically discounted state
        and terminal weights; the strongly negative spectrum makes the
        equilibrium iteration a contraction.  Parameters: ``margin`` (> 0),
        ``coupling``, ``discount``, plus the baseline ones and optional
        ``running_offset_weight`` / ``terminal_offset_weight`` scaling
        second-moment cost offsets.

    ``tau_weighted_terminal``
        Baseline dynamics with terminal weight G(tau) = exp(-(T - tau)) * g.
    """
    known = {"time_consistent_baseline", "dissipative_meanfield", "tau_weighted_terminal"}
    if name not in known:
        raise ParameterError(f"unknown catalog problem {name!r}; known: {sorted(known)}")

    dim = int(params.pop("dim", 1))
    horizon = float(params.pop("horizon", 1.0))
    gain = float(params.pop("gain", 1.0))
    control_weight = float(params.pop("control_weight", 1.0))
    sigma = float(params.pop("sigma", 1.0))
    coupling = float(params.pop("coupling", 0.0 if name != "dissipative_meanfield" else 0.5))
    terminal_weight = float(params.pop("terminal_weight", 1.0))

    if dim < 1 or horizon <= 0 or control_weight <= 0:
        raise ParameterError("dim, horizon and control_weight must be positive")

    b_mat = gain * np.eye(dim)
    r_mat = _const_matrix(control_weight, dim)
    noise_vec = sigma * np.ones(dim)

    if name == "time_consistent_baseline":
        drift = float(params.pop("drift", 0.0))
        state_weight = float(params.pop("state_weight", 0.0))
        _reject_leftovers(name, params)
        a_mat = _const_matrix(drift, dim)
        q_mat = _const_matrix(state_weight, dim)
        g_mat = _const_matrix(terminal_weight, dim)
        return LqModelSpec(
            dim=dim,
            control_dim=dim,
            horizon=horizon,
            A=lambda t, M=a_mat: M,
            B=lambda t, M=b_mat: M,
            forcing=_mean_forcing(coupling, dim),
            noise=lambda t, m, v=noise_vec: v,
            Q=lambda tau, t, M=q_mat: _tile_tau(tau, M),
            R=lambda tau, t, M=r_mat: _tile_tau(tau, M),
            G=lambda tau, M=g_mat: _tile_tau(tau, M),
            dissipativity_margin=-drift if drift < 0 else None,
            label=f"time_consistent_baseline(dim={dim})",
        )

    if name == "tau_weighted_terminal":
        drift = float(params.pop("drift", 0.0))
        state_weight = float(params.pop("state_weight", 0.0))
        _reject_leftovers(name, params)
        a_mat = _const_matrix(drift, dim)
        q_mat = _const_matrix(state_weight, dim)
        g_base = _const_matrix(terminal_weight, dim)

        def g_fn(tau, T=horizon, M=g_base):
            w = np.exp(-(T - np.asarray(tau, dtype=float)))
            return _scale_tau(w, M)

        return LqModelSpec(
            dim=dim,
            control_dim=dim,
            horizon=horizon,
            A=lambda t, M=a_mat: M,
            B=lambda t, M=b_mat: M,
            forcing=_mean_forcing(coupling, dim),
            noise=lambda t, m, v=noise_vec: v,
            Q=lambda tau, t, M=q_mat: _tile_tau(tau, M),
            R=lambda tau, t, M=r_mat: _tile_tau(tau, M),
            G=g_fn,
            label=f"tau_weighted_terminal(dim={dim})",
        )

    # dissipative_meanfield
    margin = float(params.pop("margin", 10.0))
    if margin <= 0:
        raise ParameterError("dissipative_meanfield requires margin > 0")
    drift_residual = float(params.pop("drift_residual", 0.0))
    if abs(drift_residual) >= margin:
        raise ParameterError("drift_residual must keep the spectrum strictly negative")
    state_weight = float(params.pop("state_weight", 1.0))
    discount = float(params.pop("discount", 1.0))
    w_running = float(params.pop("running_offset_weight", 0.0))
    w_terminal = float(params.pop("terminal_offset_weight", 0.0))
    _reject_leftovers(name, params)
    hyp = _hyperbolic(discount)
    a_mat = (-margin + drift_residual) * np.eye(dim)
    q_base = _const_matrix(state_weight, dim)
    g_base = _const_matrix(terminal_weight, dim)

    def q_fn(tau, t, M=q_base):
        return _scale_tau(hyp(t - np.asarray(tau, dtype=float)), M)

    def g_fn(tau, T=horizon, M=g_base):
        return _scale_tau(hyp(T - np.asarray(tau, dtype=float)), M)

    def running_offset(tau, t, m):
        return w_running * hyp(t - tau) * float(np.mean(m.second_moment))

    def terminal_offset(tau, m, T=horizon):
        return w_terminal * hyp(T - tau) * float(np.mean(m.second_moment))

    return LqModelSpec(
        dim=dim,
        control_dim=dim,
        horizon=horizon,
        A=lambda t, M=a_mat: M,
        B=lambda t, M=b_mat: M,
        forcing=_mean_forcing(coupling, dim),
        noise=lambda t, m, v=noise_vec: v,
        Q=q_fn,
        R=lambda tau, t, M=r_mat: _tile_tau(tau, M),
        G=g_fn,
        running_offset=running_offset,
        terminal_offset=terminal_offset,
        dissipativity_margin=margin,
        label=f"dissipative_meanfield(margin={margin}, coupling={coupling})",
    )


def _tile_tau(tau, mat: np.ndarray):
    tau = np.asarray(tau, dtype=float)
    if tau.ndim == 0:
        return mat
    return np.broadcast_to(mat, (tau.size, *mat.shape)).copy()


def _scale_tau(w, mat: np.ndarray):
    w = np.asarray(w, dtype=float)
    if w.ndim == 0:
        return float(w) * mat
    return w[:, None, None] * mat


def _reject_leftovers(name: str, params: dict) -> None:
    if params:
        raise ParameterError(f"unknown parameters for {name}: {sorted(params)}")


def build_general_catalog(name: str, **params) -> ModelSpec:
    """Instantiate a built-in general one-dimensional test problem.

    ``brownian``: zero drift, unit-scale diffusion, zero costs.
    ``mean_field_ou``: mean-reverting drift with mean coupling, quadratic
    control energy, closed-form best response.
    ``sin_drift``: bounded nonlinear drift with mean coupling and
    hyperbolically discounted quadratic costs; the nonlinear exercise
    problem for the finite-difference backend.
    """
    known = {"brownian", "mean_field_ou", "sin_drift"}
    if name not in known:
        raise ParameterError(f"unknown catalog problem {name!r}; known: {sorted(known)}")
    horizon = float(params.pop("horizon", 1.0))
    sigma = float(params.pop("sigma", 1.0))

    if name == "brownian":
        _reject_leftovers(name, params)
        zero = lambda *args: np.zeros(np.shape(args[1]) or (1,))
        return ModelSpec(
            horizon=horizon,
            drift_state=lambda t, x, m: np.zeros_like(x),
            drift_control=lambda t, x, v: np.zeros_like(x),
            diffusion=lambda t, x, m: np.full_like(x, sigma),
            running_cost_state=lambda tau, t, x, m: np.zeros_like(x),
            running_cost_control=lambda tau, t, x, v: np.zeros_like(x),
            terminal_cost=lambda tau, x, m: np.zeros_like(x),
            best_response=lambda t, x, q: np.zeros_like(x),
            lipschitz_coeff=0.0,
            lipschitz_best_response=0.0,
            label="brownian",
        )

    if name == "mean_field_ou":
        reversion = float(params.pop("reversion", 1.0))
        coupling = float(params.pop("coupling", 0.0))
        control_gain = float(params.pop("control_gain", 0.0))
        _reject_leftovers(name, params)
        return ModelSpec(
            horizon=horizon,
            drift_state=lambda t, x, m: -reversion * x + coupling * np.asarray(m.mean)[..., 0],
            drift_control=lambda t, x, v: control_gain * v,
            diffusion=lambda t, x, m: np.full_like(x, sigma),
            running_cost_state=lambda tau, t, x, m: np.zeros_like(x),
            running_cost_control=lambda tau, t, x, v: v * v,
            terminal_cost=lambda tau, x, m: np.zeros_like(x),
            best_response=lambda t, x, q: -0.5 * control_gain * q,
            lipschitz_coeff=reversion + coupling,
            lipschitz_best_response=0.5 * abs(control_gain),
            label=f"mean_field_ou(reversion={reversion}, coupling={coupling})",
        )

    # sin_drift
    amplitude = float(params.pop("amplitude", 1.0))
    coupling = float(params.pop("coupling", 0.0))
    state_weight = float(params.pop("state_weight", 1.0))
    control_weight = float(params.pop("control_weight", 1.0))
    terminal_weight = float(params.pop("terminal_weight", 1.0))
    target = float(params.pop("target", 0.0))
    discount = float(params.pop("discount", 1.0))
    _reject_leftovers(name, params)
    if control_weight <= 0:
        raise ParameterError("control_weight must be positive")
    if sigma == 0.0:
        raise ParameterError("sin_drift requires non-degenerate diffusion")
    hyp = _hyperbolic(discount)
    return ModelSpec(
        horizon=horizon,
        drift_state=lambda t, x, m: amplitude * np.sin(x) + coupling * np.asarray(m.mean)[..., 0],
        drift_control=lambda t, x, v: v,
        diffusion=lambda t, x, m: np.full_like(x, sigma),
        running_cost_state=lambda tau, t, x, m: state_weight * hyp(t - tau) * (x - target) ** 2,
        running_cost_control=lambda tau, t, x, v: control_weight * v * v,
        terminal_cost=lambda tau, x, m, T=horizon: terminal_weight * hyp(T - tau) * (x - target) ** 2,
        best_response=lambda t, x, q: -q / (2.0 * control_weight),
        lipschitz_coeff=amplitude + coupling,
        lipschitz_best_response=0.5 / control_weight,
        label=f"sin_drift(amplitude={amplitude}, coupling={coupling})",
    )


def lq_to_general(lq: LqModelSpec) -> ModelSpec:
    """View a scalar LQ problem through the general split interface.

    Used to cross-validate the finite-difference backend against the Riccati
    backend on identical problems.
    """
    if lq.dim != 1 or lq.control_dim != 1:
        raise ParameterError("only scalar LQ problems convert to the general form")

    def a_scal(t):
        return float(lq.A_at(t)[0, 0])

    def b_scal(t):
        return float(lq.B_at(t)[0, 0])

    return ModelSpec(
        horizon=lq.horizon,
        drift_state=lambda t, x, m: a_scal(t) * x + float(lq.forcing_at(t, m)[0]),
        drift_control=lambda t, x, v: b_scal(t) * v,
        diffusion=lambda t, x, m: np.full_like(x, float(lq.noise_at(t, m)[0])),
        running_cost_state=lambda tau, t, x, m: float(lq.Q_at(tau, t)[0, 0]) * x * x
        + float(lq.running_offset(tau, t, m)),
        running_cost_control=lambda tau, t, x, v: float(lq.R_at(tau, t)[0, 0]) * v * v,
        terminal_cost=lambda tau, x, m: float(lq.G_at(tau)[0, 0]) * x * x
        + float(lq.terminal_offset(tau, m)),
        best_response=lambda t, x, q: -b_scal(t) / (2.0 * float(lq.R_at(t, t)[0, 0])) * q,
        functionals=lq.functionals,
        label=f"general({lq.label})",
    )


# ---------------------------------------------------------------------------
# Empirical Lipschitz probe
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LipschitzReport:
    drift: float
    diffusion: float
    best_response: float


def lipschitz_probe(
    model: ModelSpec,
    n_samples: int = 400,
    box: tuple[float, float] = (-3.0, 3.0),
    gradient_box: tuple[float, float] = (-3.0, 3.0),
    seed: int = 0,
    warn_factor: float = 1.1,
) -> LipschitzReport:
    """Empirical finite-difference Lipschitz ratios over sampled pairs.

    Warns (never fails) when an observed ratio exceeds a declared constant by
    more than ``warn_factor``.
    """
    from . import rng as _rng

    lo, hi = box
    if not (np.isfinite(lo) and np.isfinite(hi) and hi > lo):
        raise ParameterError("box bounds must be finite with hi > lo")
    gen = _rng.generator(seed, _rng.SAMPLING)
    ts = gen.uniform(0.0, model.horizon, n_samples)
    x1 = gen.uniform(lo, hi, n_samples)
    x2 = gen.uniform(lo, hi, n_samples)
    q1 = gen.uniform(*gradient_box, size=n_samples)
    q2 = gen.uniform(*gradient_box, size=n_samples)
    ref = MomentVector(mean=np.array([0.5 * (lo + hi)]), second_moment=(0.5 * (lo + hi)) ** 2 + 1.0)
    v0 = np.zeros(1)

    drift_ratio = diff_ratio = br_ratio = 0.0
    for t, a, b, qa, qb in zip(ts, x1, x2, q1, q2):
        dx = abs(a - b)
        if dx < 1e-12:
            continue
        xa, xb = np.array([a]), np.array([b])
        da = model.drift_state(t, xa, ref) + model.drift_control(t, xa, v0)
        db = model.drift_state(t, xb, ref) + model.drift_control(t, xb, v0)
        drift_ratio = max(drift_ratio, float(np.max(np.abs(da - db))) / dx)
        sa = model.diffusion(t, xa, ref)
        sb = model.diffusion(t, xb, ref)
        diff_ratio = max(diff_ratio, float(abs(np.atleast_1d(sa) - np.atleast_1d(sb))[0]) / dx)
        ua = best_response(model, t, xa, np.array([qa]))
        ub = best_response(model, t, xb, np.array([qb]))
        br_ratio = max(
            br_ratio, float(np.max(np.abs(np.atleast_1d(ua) - np.atleast_1d(ub)))) / (dx + abs(qa - qb))
        )

    if model.lipschitz_coeff is not None and model.lipschitz_coeff >= 0:
        bound = warn_factor * model.lipschitz_coeff
        if max(drift_ratio, diff_ratio) > bound + 1e-12:
            warnings.warn(
                f"observed coefficient ratio {max(drift_ratio, diff_ratio):.3g} exceeds "
                f"declared constant {model.lipschitz_coeff:.3g} by more than {warn_factor - 1:.0%}",
                stacklevel=2,
            )
    if model.lipschitz_best_response is not None and model.lipschitz_best_response >= 0:
        if br_ratio > warn_factor * model.lipschitz_best_response + 1e-12:
            warnings.warn(
                f"observed best-response ratio {br_ratio:.3g} exceeds declared constant "
                f"{model.lipschitz_best_response:.3g} by more than {warn_factor - 1:.0%}",
                stacklevel=2,
            )
    return LipschitzReport(drift=drift_ratio, diffusion=diff_ratio, best_response=br_ratio)
