"""Backward integration of the two-time Riccati family for LQ problems.

For a frozen distribution curve, the cost-to-go judged from evaluation time
tau has the quadratic form <P(tau;t)x, x> + 2<p(tau;t), x> + eta(tau;t).  The
rows tau are coupled only through the running diagonal values P(t;t), p(t;t),
which also define the affine feedback

    u(t, x) = -R(t;t)^{-1} B'(t) [P(t;t) x + p(t;t)].

All rows are marched backward from t = T simultaneously with a Heun
predictor-corrector; the predictor supplies the diagonal values at the new
node.  The quadratic coupling is kept in its symmetrized form
-[P(tau;t) M P(t;t) + P(t;t) M P(tau;t)] (M = B R(t;t)^{-1} B'), which is what
the quadratic ansatz produces and is the only symmetry-preserving reading in
matrix dimensions.

The tau-cross term of the offset rows admits more than one reading; see
``offset_cross_term`` on :func:`solve_riccati_family`.  The default
``"value_consistent"`` form K(t)'R(tau;t)k(t) is the one validated by
independent Monte-Carlo policy evaluation; with zero forcing it keeps the
offsets identically zero, and for evaluation-time-independent weights it
collapses the family to the classical single-parameter solve.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .measures import as_moment_curve
from .model import LqModelSpec, eval_tau_grid
from .strategies import FeedbackStrategy


class RiccatiError(RuntimeError):
    """Non-invertible diagonal control weight or a non-finite row value."""


@dataclass(frozen=True)
class RiccatiFamily:
    """Triangular row storage: index [j, k] holds the row tau_j value at t_k, k >= j."""

    grid: np.ndarray
    P: np.ndarray    # (K+1, K+1, d, d)
    p: np.ndarray    # (K+1, K+1, d)
    eta: np.ndarray  # (K+1, K+1)

    @property
    def n_nodes(self) -> int:
        return self.grid.size

    @property
    def dim(self) -> int:
        return self.P.shape[-1]

    def diagonal(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = np.arange(self.n_nodes)
        return self.P[idx, idx], self.p[idx, idx], self.eta[idx, idx]


def _interp_weight(grid: np.ndarray, t: float) -> tuple[int, float]:
    if t <= grid[0]:
        return 0, 0.0
    if t >= grid[-1]:
        return grid.size - 2, 1.0
    k = int(np.searchsorted(grid, t, side="right")) - 1
    k = min(k, grid.size - 2)
    return k, float((t - grid[k]) / (grid[k + 1] - grid[k]))


def solve_riccati_family(
    lq: LqModelSpec,
    mu,
    offset_cross_term: str = "value_consistent",
) -> RiccatiFamily:
    """Integrate all rows of (P, p, eta) backward on the curve's grid.

    ``mu`` supplies the frozen forcing/noise/offset evaluations a(t, mu(t)),
    b(t, mu(t)), and the cost offsets.  ``offset_cross_term`` selects the
    tau-cross term in the offset rows: ``"value_consistent"`` (default),
    ``"as_printed"`` (scalar problems only, kept for comparison; breaks the
    Monte-Carlo value identity), or ``"omit"``.
    """
    if offset_cross_term not in ("value_consistent", "as_printed", "omit"):
        raise ValueError(f"unknown offset_cross_term {offset_cross_term!r}")
    if offset_cross_term == "as_printed" and lq.dim != 1:
        raise ValueError("the literal printed offset form only parses in one dimension")

    mom = as_moment_curve(mu, lq.functionals)
    grid = np.asarray(mom.grid, dtype=float)
    if abs(float(grid[-1]) - lq.horizon) > 1e-9 * max(1.0, lq.horizon):
        raise ValueError(f"curve ends at {grid[-1]}, model horizon is {lq.horizon}")
    n = grid.size
    d, l = lq.dim, lq.control_dim
    h = float(grid[1] - grid[0])

    # frozen measure channels, one evaluation per node
    avec = np.stack([lq.forcing_at(float(t), mom.moments[k]) for k, t in enumerate(grid)])
    bvec = np.stack([lq.noise_at(float(t), mom.moments[k]) for k, t in enumerate(grid)])

    P = np.full((n, n, d, d), np.nan)
    p = np.full((n, n, d), np.nan)
    eta = np.full((n, n), np.nan)
    taus = grid
    m_end = mom.moments[-1]
    # G is a one-argument family; the throwaway second argument of the row
    # evaluator must not leak into it
    P[:, n - 1] = eval_tau_grid(lambda tau, _t: lq.G(tau), taus, 0.0, (d, d))
    p[:, n - 1] = 0.0
    eta[:, n - 1] = np.array([float(lq.terminal_offset(float(tau), m_end)) for tau in taus])

    def derivatives(t: float, k_node: int, rows: slice, Pr, pr, Pd, pd):
        """Time-derivatives of the active rows, given diagonal values at t."""
        A = lq.A_at(t)
        B = lq.B_at(t)
        Rd = lq.R_at(t, t)
        try:
            Rdinv = np.linalg.inv(Rd)
        except np.linalg.LinAlgError as exc:
            raise RiccatiError(f"R(t, t) not invertible at t = {t:.6g}") from exc
        S = B @ Rdinv                       # d x l
        M = S @ B.T                         # d x d
        kvec = -Rdinv @ B.T @ pd            # l
        vec = avec[k_node] + B @ kvec       # forcing seen by the offset rows
        gain_t = A - M @ Pd                 # closed-loop drift matrix A + B K(t)

        tr = taus[rows]
        Q_rows = eval_tau_grid(lq.Q, tr, t, (d, d))
        R_rows = eval_tau_grid(lq.R, tr, t, (l, l))
        F_rows = eval_tau_grid(lambda tau, tt: lq.running_offset(tau, tt, mom.moments[k_node]), tr, t, ())

        W = np.einsum("al,jlm,bm->jab", S, R_rows, S)      # B Rd^-1 R(tau;t) Rd^-1 B'
        PA = np.einsum("jab,bc->jac", Pr, A)
        AtP = np.einsum("ba,jbc->jac", A, Pr)
        PMPd = np.einsum("jab,bc->jac", Pr @ M, Pd)
        PdMP = np.einsum("ab,jbc->jac", Pd @ M, Pr)
        PdWPd = np.einsum("ab,jbc,cd->jad", Pd, W, Pd)
        dP = -(PA + AtP + Q_rows - (PMPd + PdMP) + PdWPd)

        Pvec = np.einsum("jab,b->ja", Pr, vec)
        if offset_cross_term == "value_consistent":
            cross = np.einsum("ab,jbc,c->ja", Pd, W, pd)   # = K' R(tau;t) k
            dp = -(Pvec + np.einsum("ba,jb->ja", gain_t, pr) + cross)
        elif offset_cross_term == "omit":
            dp = -(Pvec + np.einsum("ba,jb->ja", gain_t, pr))
        else:  # as_printed, scalar: literal form, no transport term
            cross = PdWPd[:, :, 0]
            dp = -(Pvec + cross)

        bP = np.einsum("a,jab,b->j", bvec[k_node], Pr, bvec[k_node])
        pvec = 2.0 * np.einsum("ja,a->j", pr, vec)
        kRk = np.einsum("l,jlm,m->j", kvec, R_rows, kvec)
        de = -(bP + pvec + kRk + F_rows)
        return dP, dp, de

    for k in range(n - 2, -1, -1):
        rows = slice(0, k + 1)
        t_hi, t_lo = float(grid[k + 1]), float(grid[k])
        P1, p1, e1 = P[rows, k + 1], p[rows, k + 1], eta[rows, k + 1]
        dP1, dp1, de1 = derivatives(t_hi, k + 1, rows, P1, p1, P[k + 1, k + 1], p[k + 1, k + 1])
        P_star = P1 - h * dP1
        p_star = p1 - h * dp1
        # the predicted row tau = t_k supplies the diagonal at the new node
        dP2, dp2, de2 = derivatives(t_lo, k, rows, P_star, p_star, P_star[k], p_star[k])
        Pk = P1 - 0.5 * h * (dP1 + dP2)
        P[rows, k] = 0.5 * (Pk + np.swapaxes(Pk, -1, -2))
        p[rows, k] = p1 - 0.5 * h * (dp1 + dp2)
        eta[rows, k] = e1 - 0.5 * h * (de1 + de2)
        if not (
            np.all(np.isfinite(P[rows, k]))
            and np.all(np.isfinite(p[rows, k]))
            and np.all(np.isfinite(eta[rows, k]))
        ):
            raise RiccatiError(f"non-finite row value while marching at node {k} (t = {t_lo:.6g})")

    return RiccatiFamily(grid=grid, P=P, p=p, eta=eta)


# ---------------------------------------------------------------------------
# affine strategy extraction
# ---------------------------------------------------------------------------

@dataclass
class AffineStrategy(FeedbackStrategy):
    """u(t, x) = gain(t) x + offset(t), linear in t between grid nodes."""

    grid: np.ndarray
    gains: np.ndarray    # (K+1, l, d)
    offsets: np.ndarray  # (K+1, l)
    label: str = "affine"

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.gains = np.asarray(self.gains, dtype=float)
        self.offsets = np.asarray(self.offsets, dtype=float)
        self.control_dim = self.gains.shape[1]
        self.lipschitz_x = float(
            max(np.linalg.norm(g, ord=2) for g in self.gains)
        )

    def gain_offset(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        k, w = _interp_weight(self.grid, t)
        gain = (1.0 - w) * self.gains[k] + w * self.gains[k + 1]
        off = (1.0 - w) * self.offsets[k] + w * self.offsets[k + 1]
        return gain, off

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        gain, off = self.gain_offset(t)
        x = np.atleast_2d(x)
        return x @ gain.T + off

    def to_csv(self, path) -> None:
        l, d = self.gains.shape[1], self.gains.shape[2]
        header = (
            ["t"]
            + [f"gain_{i + 1}{j + 1}" for i in range(l) for j in range(d)]
            + [f"offset_{i + 1}" for i in range(l)]
        )
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for k, t in enumerate(self.grid):
                row = [repr(float(t))]
                row += [repr(float(v)) for v in self.gains[k].ravel()]
                row += [repr(float(v)) for v in self.offsets[k]]
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "AffineStrategy":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [list(map(float, r)) for r in reader]
        gain_cols = [i for i, name in enumerate(header) if name.startswith("gain_")]
        off_cols = [i for i, name in enumerate(header) if name.startswith("offset_")]
        l = len(off_cols)
        d = len(gain_cols) // l
        grid = np.array([r[0] for r in rows])
        gains = np.array([[r[i] for i in gain_cols] for r in rows]).reshape(-1, l, d)
        offsets = np.array([[r[i] for i in off_cols] for r in rows])
        return cls(grid=grid, gains=gains, offsets=offsets)


def extract_strategy_lq(fam: RiccatiFamily, lq: LqModelSpec) -> AffineStrategy:
    """Affine feedback from the diagonal rows of a fully integrated family."""
    P_diag, p_diag, _ = fam.diagonal()
    gains = np.empty((fam.n_nodes, lq.control_dim, lq.dim))
    offsets = np.empty((fam.n_nodes, lq.control_dim))
    for k, t in enumerate(fam.grid):
        B = lq.B_at(float(t))
        Rdinv = np.linalg.inv(lq.R_at(float(t), float(t)))
        gains[k] = -Rdinv @ B.T @ P_diag[k]
        offsets[k] = -Rdinv @ B.T @ p_diag[k]
    return AffineStrategy(grid=fam.grid.copy(), gains=gains, offsets=offsets, label="affine-equilibrium")


# ---------------------------------------------------------------------------
# value evaluation
# ---------------------------------------------------------------------------

def _row_value(fam: RiccatiFamily, j: int, k: int) -> tuple[np.ndarray, np.ndarray, float]:
    return fam.P[j, k], fam.p[j, k], float(fam.eta[j, k])


def value_lq(fam: RiccatiFamily, tau: float, t: float, x) -> float | np.ndarray:
    """Quadratic cost-to-go <P(tau;t)x, x> + 2<p(tau;t), x> + eta(tau;t).

    Exact at grid nodes, bilinear between them (tau <= t required).  When the
    interpolation cell straddles the diagonal, the missing corner is clamped
    to that row's own diagonal value.
    """
    if tau > t + 1e-12:
        raise ValueError(f"need tau <= t, got tau = {tau}, t = {t}")
    j, wj = _interp_weight(fam.grid, min(tau, t))
    k, wk = _interp_weight(fam.grid, t)

    def corner(jj: int, kk: int):
        kk = max(kk, jj)  # clamp into the row's domain
        return _row_value(fam, jj, kk)

    parts = []
    for jj, w_j in ((j, 1.0 - wj), (j + 1, wj)):
        for kk, w_k in ((k, 1.0 - wk), (k + 1, wk)):
            w = w_j * w_k
            if w == 0.0:
                continue
            parts.append((w, corner(jj, kk)))
    P = sum(w * c[0] for w, c in parts)
    pvec = sum(w * c[1] for w, c in parts)
    e = sum(w * c[2] for w, c in parts)

    x = np.asarray(x, dtype=float)
    scalar = x.ndim <= 1
    xb = np.atleast_2d(x if x.ndim else x[None])
    if xb.shape[1] != fam.dim:
        xb = xb.reshape(-1, fam.dim)
    vals = np.einsum("ni,ij,nj->n", xb, P, xb) + 2.0 * xb @ pvec + e
    return float(vals[0]) if scalar and vals.size == 1 else vals


def riccati_diagonal_to_csv(fam: RiccatiFamily, path) -> None:
    """Diagonal export: t, vec(P(t;t)), p(t;t), eta(t;t)."""
    d = fam.dim
    P_diag, p_diag, e_diag = fam.diagonal()
    header = (
        ["t"]
        + [f"P_{i + 1}{j + 1}" for i in range(d) for j in range(d)]
        + [f"p_{i + 1}" for i in range(d)]
        + ["eta"]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k, t in enumerate(fam.grid):
            row = [repr(float(t))]
            row += [repr(float(v)) for v in P_diag[k].ravel()]
            row += [repr(float(v)) for v in p_diag[k]]
            row.append(repr(float(e_diag[k])))
            writer.writerow(row)
