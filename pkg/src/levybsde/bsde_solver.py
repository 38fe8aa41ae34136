"""Backward SDE solver by regression-based backward induction, plus forward Euler.

The backward equation

    y(t) = xi + int_t^T f(s, y, q, z, u) ds - int q dW - int z dH

is discretized on the bundle's grid and solved path-wise:

    y_N = xi
    ybar_n = E^[ y_{n+1} | F_n ]
    q^i_n  = E^[ (y_{n+1} - ybar_n) dW^i_n | F_n ] / dt
    z^i_n  = E^[ (y_{n+1} - ybar_n) dH^i_n | F_n ] / dt
    y_n    = ybar_n + f(t_n, ybar_n, q_n, z_n, u_n) dt

where E^[. | F_n] is least-squares regression on basis features of the Markov
state (W, L, H^1..H^K) at t_n.  Centering the increment targets on ybar_n
leaves the estimated conditional expectation unchanged (the centering term is
F_n-measurable times a mean-zero increment) and sharply reduces regression
variance; the extraction identities themselves rest on E[dH^i dH^j | F_n] =
delta_ij dt for the orthonormalized increments.

All coefficient evaluations sit at left endpoints of the steps so that every
integrand is measurable at the start of its step.  The driver is applied
explicitly at (ybar_n, q_n, z_n); an optional correction pass re-evaluates it
at the updated y for stiffer drivers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .path_engine import PathBundle, PathState

__all__ = [
    "DriverSpec",
    "TerminalSpec",
    "RegressionBasis",
    "BsdeSolution",
    "SolverOptions",
    "RegressionSingularError",
    "DivergenceError",
    "solve_bsde",
    "solve_forward_sde",
    "a_priori_norms",
    "representation_residual",
]


class RegressionSingularError(ValueError):
    """Raised when the ridge-regularized normal matrix is numerically singular."""


class DivergenceError(ArithmeticError):
    """Raised when a trajectory exceeds the configured divergence bound."""


@dataclass
class DriverSpec:
    """Driver f(t, y, q, z, u) -> (P, n) and optional derivative maps.

    All callables are vectorized over paths: y has shape (P, n), q (P, n, d),
    z (P, n, K), u (P, m) or None.  Derivatives return arrays broadcastable to
    f_y: (P, n, n), f_q: (P, n, n, d), f_z: (P, n, n, K), f_u: (P, n, m),
    indexed as d f_i / d y_j, d f_i / d q_{j l}, etc.
    """

    f: callable
    f_y: callable | None = None
    f_q: callable | None = None
    f_z: callable | None = None
    f_u: callable | None = None

    def has_derivatives(self) -> bool:
        return all(g is not None for g in (self.f_y, self.f_q, self.f_z, self.f_u))


def zero_driver() -> DriverSpec:
    """f identically zero, with zero derivatives."""

    def f(t, y, q, z, u):
        return np.zeros_like(y)

    n_of = lambda y: y.shape[1]
    return DriverSpec(
        f=f,
        f_y=lambda t, y, q, z, u: np.zeros((1, n_of(y), n_of(y))),
        f_q=lambda t, y, q, z, u: np.zeros((1, n_of(y), n_of(y), q.shape[2])),
        f_z=lambda t, y, q, z, u: np.zeros((1, n_of(y), n_of(y), z.shape[2])),
        f_u=lambda t, y, q, z, u: np.zeros((1, n_of(y), u.shape[1])),
    )


@dataclass
class TerminalSpec:
    """Terminal value xi as a function of the path state at the horizon."""

    fn: callable  # PathState -> (P, n)

    def __call__(self, state: PathState) -> np.ndarray:
        out = np.asarray(self.fn(state), dtype=float)
        if out.ndim == 1:
            out = out[:, None]
        return out

    def scaled(self, factor: float) -> "TerminalSpec":
        return TerminalSpec(fn=lambda state: factor * self.__call__(state))


@dataclass
class RegressionBasis:
    """Polynomial feature map on the Markov state (W, L, H^1..H^K).

    Features are all monomials of the state variables up to the given total
    degree, plus the constant.  Columns that are constant across paths at a
    step (for example everything at t = 0) are dropped; the remainder are
    standardized before the ridge solve, so the ridge parameter acts relative
    to unit-scale columns.
    """

    degree: int = 2
    ridge: float = 1e-10

    def n_variables(self, d: int, K: int) -> int:
        return d + 1 + K

    def build(self, state: PathState) -> np.ndarray:
        """Raw feature matrix (P, B) including the leading constant column."""
        cols = [state.W[:, i] for i in range(state.W.shape[1])]
        cols.append(state.L)
        cols += [state.H[:, i] for i in range(state.H.shape[1])]
        S = np.column_stack(cols)
        P, V = S.shape
        feats = [np.ones(P)]
        if self.degree >= 1:
            feats += [S[:, i] for i in range(V)]
        if self.degree >= 2:
            for i in range(V):
                for j in range(i, V):
                    feats.append(S[:, i] * S[:, j])
        if self.degree >= 3:
            for i in range(V):
                for j in range(i, V):
                    for k in range(j, V):
                        feats.append(S[:, i] * S[:, j] * S[:, k])
        if self.degree > 3:
            raise ValueError("polynomial basis supports total degree <= 3")
        return np.column_stack(feats)

    def cache_key(self) -> tuple:
        return ("poly", self.degree, self.ridge)


class _StepRegression:
    """Factorized per-step normal equations for a standardized design matrix."""

    def __init__(self, raw: np.ndarray, ridge: float):
        P = raw.shape[0]
        mean = raw.mean(axis=0)
        std = raw.std(axis=0)
        keep = std > 1e-12 * (1.0 + np.abs(mean))
        keep[0] = False  # constant column handled by the intercept
        self.mean = mean
        self.std = std
        self.keep = keep
        self.n_paths = P
        if not keep.any():
            # all features constant (e.g. t = 0): conditioning reduces to the mean
            self.cho = None
            self.condition = 1.0
            return
        X = (raw[:, keep] - mean[keep]) / std[keep]
        A = X.T @ X + ridge * P * np.eye(X.shape[1])
        try:
            self.cho = scipy.linalg.cho_factor(A, lower=True)
        except (scipy.linalg.LinAlgError, np.linalg.LinAlgError) as exc:
            raise RegressionSingularError(f"regression singular: {exc}") from exc
        cond = np.linalg.cond(A)
        self.condition = float(cond)

    def design(self, raw: np.ndarray) -> np.ndarray:
        return (raw[:, self.keep] - self.mean[self.keep]) / self.std[self.keep]

    def fit(self, X: np.ndarray, targets: np.ndarray) -> np.ndarray:
        """Fitted values of the ridge regression of each target column on X.

        Columns of X are standardized and mean-zero, so the unpenalized
        intercept is exactly the target mean; only the slopes see the ridge.
        """
        tbar = targets.mean(axis=0)
        if self.cho is None or X.shape[1] == 0:
            return np.broadcast_to(tbar, targets.shape).copy()
        beta = scipy.linalg.cho_solve(self.cho, X.T @ (targets - tbar))
        return tbar + X @ beta


class _RegressionContext:
    """Per-bundle cache of step regressions, keyed by basis parameters."""

    def __init__(self, bundle: PathBundle, basis: RegressionBasis):
        self.bundle = bundle
        self.basis = basis
        self._steps: dict[int, _StepRegression] = {}

    def step(self, n: int) -> tuple[_StepRegression, np.ndarray]:
        raw = self.basis.build(self.bundle.state(n))
        if n not in self._steps:
            self._steps[n] = _StepRegression(raw, self.basis.ridge)
        reg = self._steps[n]
        return reg, reg.design(raw)


def regression_context(bundle: PathBundle, basis: RegressionBasis) -> _RegressionContext:
    """Fetch (or build) the cached regression context of a bundle."""
    cache = bundle._levels.setdefault("_regression", {})
    key = basis.cache_key()
    if key not in cache:
        cache[key] = _RegressionContext(bundle, basis)
    return cache[key]


@dataclass
class SolverOptions:
    """Knobs of the backward induction."""

    n_driver_corrections: int = 0
    divergence_bound: float = 1e8


@dataclass
class BsdeSolution:
    """Trajectories of the solution triple plus regression diagnostics.

    y has shape (P, N+1, n) with y[:, N] = xi path-by-path; ybar (P, N, n) is
    the regression conditional mean of y_{n+1} before the driver is applied;
    q (P, N, n, d) and z (P, N, n, K) are the extracted integrands; and
    condition[n] is the normal-matrix condition proxy at step n.
    """

    grid: object
    y: np.ndarray
    ybar: np.ndarray
    q: np.ndarray
    z: np.ndarray
    condition: np.ndarray

    @property
    def n_dim(self) -> int:
        return self.y.shape[2]

    def y_initial(self) -> np.ndarray:
        """Cross-path mean of y at t = 0 (the paths agree there up to regression)."""
        return self.y[:, 0, :].mean(axis=0)

    def to_csv(self, path, max_paths: int | None = None) -> None:
        """CSV export (path, step, t, y.., q.., z..) at 17 significant digits."""
        P = self.y.shape[0] if max_paths is None else min(max_paths, self.y.shape[0])
        N = self.q.shape[1]
        times = self.grid.times()
        n, d, K = self.y.shape[2], self.q.shape[3], self.z.shape[3]
        with open(path, "w", newline="") as fh:
            header = ["path", "step", "t"]
            header += [f"y_{i + 1}" for i in range(n)]
            header += [f"q_{i + 1}_{j + 1}" for i in range(n) for j in range(d)]
            header += [f"z_{i + 1}_{j + 1}" for i in range(n) for j in range(K)]
            fh.write(",".join(header) + "\n")
            for p in range(P):
                for step in range(N):
                    row = [str(p), str(step), f"{times[step]:.17g}"]
                    row += [f"{v:.17g}" for v in self.y[p, step]]
                    row += [f"{v:.17g}" for v in self.q[p, step].ravel()]
                    row += [f"{v:.17g}" for v in self.z[p, step].ravel()]
                    fh.write(",".join(row) + "\n")


def solve_bsde(
    driver: DriverSpec,
    terminal: TerminalSpec,
    bundle: PathBundle,
    basis: RegressionBasis,
    control: np.ndarray | None = None,
    options: SolverOptions | None = None,
) -> BsdeSolution:
    """Backward induction with regression conditional expectations.

    ``control``, when given, must have shape (n_paths, n_steps, m) and is fed
    to the driver at left endpoints.
    """
    options = options or SolverOptions()
    P = bundle.n_paths
    N = bundle.grid.n_steps
    d = bundle.d
    K = bundle.K
    dt = bundle.grid.dt
    times = bundle.grid.times()
    if control is not None:
        control = np.asarray(control, dtype=float)
        if control.shape[:2] != (P, N):
            raise ValueError(f"control shape {control.shape} does not match bundle ({P}, {N}, m)")

    xi = terminal(bundle.state(N))
    if not np.all(np.isfinite(xi)):
        raise ValueError("terminal value is not finite on the simulated paths")
    n = xi.shape[1]

    ctx = regression_context(bundle, basis)
    y = np.empty((P, N + 1, n))
    ybar = np.empty((P, N, n))
    q = np.empty((P, N, n, d))
    z = np.empty((P, N, n, K))
    condition = np.empty(N)
    y[:, N] = xi

    for step in range(N - 1, -1, -1):
        reg, X = ctx.step(step)
        condition[step] = reg.condition
        y_next = y[:, step + 1]
        yb = reg.fit(X, y_next)
        resid = y_next - yb
        # centered increment targets, one multi-column solve for q and z
        targets = np.empty((P, n * (d + K)))
        col = 0
        for i in range(d):
            targets[:, col : col + n] = resid * (bundle.dW[:, step, i] / dt)[:, None]
            col += n
        for i in range(K):
            targets[:, col : col + n] = resid * (bundle.dH[:, step, i] / dt)[:, None]
            col += n
        fitted = reg.fit(X, targets)
        q[:, step] = fitted[:, : n * d].reshape(P, d, n).transpose(0, 2, 1)
        z[:, step] = fitted[:, n * d :].reshape(P, K, n).transpose(0, 2, 1)

        u_n = control[:, step] if control is not None else None
        ybar[:, step] = yb
        fval = driver.f(times[step], yb, q[:, step], z[:, step], u_n)
        y_step = yb + np.asarray(fval) * dt
        for _ in range(options.n_driver_corrections):
            fval = driver.f(times[step], y_step, q[:, step], z[:, step], u_n)
            y_step = yb + np.asarray(fval) * dt
        y[:, step] = y_step
        peak = float(np.max(np.abs(y_step)))
        if not np.isfinite(peak) or peak > options.divergence_bound:
            raise DivergenceError(f"divergence: max|y| = {peak:.3e} at step {step}")

    return BsdeSolution(grid=bundle.grid, y=y, ybar=ybar, q=q, z=z, condition=condition)


def solve_forward_sde(
    b,
    g,
    sigma,
    x0,
    bundle: PathBundle,
    divergence_bound: float = 1e8,
) -> np.ndarray:
    """Euler scheme with left-endpoint coefficients.

    X_{n+1} = X_n + b(t_n, X_n) dt + sum_i g^i(t_n, X_n) dW^i + sum_i sigma^i(t_n, X_n) dH^i.

    Coefficients may be None (absent term), constant arrays, or callables
    (t, X) -> array; shapes are b: (P, n) or (n,), g: (P, n, d) or (n, d),
    sigma: (P, n, K) or (n, K).  Returns the trajectory (P, N + 1, n).
    """
    P = bundle.n_paths
    N = bundle.grid.n_steps
    dt = bundle.grid.dt
    times = bundle.grid.times()
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.ndim == 1:
        x0 = np.broadcast_to(x0, (P, x0.size))
    n = x0.shape[1]

    def coeff(c, t, X, shape):
        if c is None:
            return None
        val = c(t, X) if callable(c) else c
        return np.broadcast_to(np.asarray(val, dtype=float), shape)

    X = np.empty((P, N + 1, n))
    X[:, 0] = x0
    for step in range(N):
        x = X[:, step]
        nxt = x.copy()
        bv = coeff(b, times[step], x, (P, n))
        if bv is not None:
            nxt = nxt + bv * dt
        gv = coeff(g, times[step], x, (P, n, bundle.d))
        if gv is not None:
            nxt = nxt + np.einsum("pnd,pd->pn", gv, bundle.dW[:, step])
        sv = coeff(sigma, times[step], x, (P, n, bundle.K))
        if sv is not None:
            nxt = nxt + np.einsum("pnk,pk->pn", sv, bundle.dH[:, step])
        X[:, step + 1] = nxt
        peak = float(np.max(np.abs(nxt)))
        if not np.isfinite(peak) or peak > divergence_bound:
            raise DivergenceError(f"divergence: max|X| = {peak:.3e} at step {step + 1}")
    return X


def a_priori_norms(solution: BsdeSolution) -> tuple[float, float, float]:
    """Monte Carlo estimates of (E sup|y|^2, E int |q|^2 dt, E int ||z||^2 dt)."""
    dt = solution.grid.dt
    sup_y = float(np.mean(np.max(np.sum(solution.y**2, axis=2), axis=1)))
    q_int = float(np.mean(np.sum(solution.q**2, axis=(1, 2, 3))) * dt)
    z_int = float(np.mean(np.sum(solution.z**2, axis=(1, 2, 3))) * dt)
    return sup_y, q_int, z_int


def representation_residual(
    solution: BsdeSolution,
    bundle: PathBundle,
    driver: DriverSpec,
    control: np.ndarray | None = None,
) -> float:
    """Fraction of terminal variance unexplained by the extracted integrands.

    Reconstructs xi from y(0), the driver integral, and the stochastic sums
    sum_n (q_n dW_n + z_n dH_n); the ratio of the residual second moment to
    Var(xi) measures what the first K orthonormal components (plus W) fail to
    span.  Small values certify the truncation level K for a given terminal.
    """
    dt = bundle.grid.dt
    times = bundle.grid.times()
    N = bundle.grid.n_steps
    recon = solution.y[:, 0].copy()
    for step in range(N):
        u_n = control[:, step] if control is not None else None
        fval = np.asarray(driver.f(times[step], solution.ybar[:, step], solution.q[:, step], solution.z[:, step], u_n))
        recon = recon - fval * dt
        recon = recon + np.einsum("pnd,pd->pn", solution.q[:, step], bundle.dW[:, step])
        recon = recon + np.einsum("pnk,pk->pn", solution.z[:, step], bundle.dH[:, step])
    xi = solution.y[:, N]
    err = float(np.mean(np.sum((xi - recon) ** 2, axis=1)))
    var = float(np.mean(np.sum((xi - xi.mean(axis=0)) ** 2, axis=1)))
    return err / var if var > 0 else err
