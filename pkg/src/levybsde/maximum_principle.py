"""Control-variation machinery for backward stochastic control systems.

Given a controlled backward state equation with driver f, running cost l and
initial cost phi, this module numerically realizes the first-order analysis of
the control problem:

  * the linearized (variational) backward equation along a base pair,
  * first- and second-order expansion diagnostics of state and cost under
    convex perturbations u + eps (v - u) on common random numbers,
  * the adjoint forward equation started at k(0) = -phi_y(y(0)),
  * the Hamiltonian  H(t, y, q, z, u, k) = <k, -f> + l  and the stationarity
    residual H_u of candidate optimal pairs.

Two evaluations of the first-order cost derivative are available: through the
variational solution (exact for the discrete system) and through the adjoint
pairing E int <-f_u^T k + l_u, v> dt; their gap is an Euler-discretization
defect that shrinks with the step size, which duality_check measures.

Convention: the variational equation freezes driver derivatives at the
regression conditional mean ybar_n of the base solve, because that is the
exact argument where the base solver evaluated f.  This makes the variational
solution the exact derivative of the discrete state map, so remainder and
cost-expansion rates are clean of linearization mismatch.  Cost derivatives
(l_y, l_q, l_z, l_u) are frozen at the adapted left-endpoint values (y_n, q_n,
z_n, u_n), matching where the discrete cost evaluates l.

The first-order cost functional implemented here carries all four running-cost
terms (l_y Y, l_q Q, l_z Z, l_u (u - ubar)) next to the initial-cost term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import qmc

from .bsde_solver import (
    BsdeSolution,
    DriverSpec,
    RegressionBasis,
    SolverOptions,
    TerminalSpec,
    solve_bsde,
)
from .path_engine import PathBundle

__all__ = [
    "CostSpec",
    "ControlProblem",
    "AdmissiblePair",
    "CostEstimate",
    "validate_problem",
    "solve_pair",
    "evaluate_cost",
    "solve_variational",
    "first_order_cost_term",
    "expansion_check",
    "ExpansionReport",
    "solve_adjoint_general",
    "hamiltonian_general",
    "hamiltonian_u",
    "necessary_residual",
    "NecessaryReport",
    "duality_check",
    "DualityReport",
]


@dataclass
class CostSpec:
    """Running cost l(t, y, q, z, u) -> (P,) and its derivative maps.

    l_y: (P, n), l_q: (P, n, d), l_z: (P, n, K), l_u: (P, m), all broadcastable.
    """

    l: callable
    l_y: callable
    l_q: callable
    l_z: callable
    l_u: callable


@dataclass
class ControlProblem:
    """Controlled backward system, cost data, and the admissible control set.

    ``control_box`` is None for unconstrained controls in R^m, or a pair
    (lo, hi) of m-vectors for a convex box.
    """

    driver: DriverSpec
    cost: CostSpec
    phi: callable  # (P, n) -> (P,)
    phi_y: callable  # (P, n) -> (P, n)
    terminal: TerminalSpec
    n: int
    m: int
    control_box: tuple | None = None


@dataclass
class AdmissiblePair:
    """A control together with the state triple solved under it."""

    control: np.ndarray  # (P, N, m)
    solution: BsdeSolution


@dataclass
class CostEstimate:
    value: float
    std_error: float
    per_path: np.ndarray


def _bc(arr, shape) -> np.ndarray:
    """Broadcast a derivative array to its full per-path shape."""
    return np.broadcast_to(np.asarray(arr, dtype=float), shape)


def validate_problem(
    problem: ControlProblem,
    d: int,
    K: int,
    horizon: float,
    rng: np.random.Generator,
    n_points: int = 10,
    fd_step: float = 1e-5,
    rel_tol: float = 1e-4,
) -> ControlProblem:
    """Finite-difference spot check of every supplied derivative.

    Draws random (t, y, q, z, u) points and compares each derivative map
    against central differences; relative error above ``rel_tol`` raises with
    the name of the offending derivative.
    """
    n, m = problem.n, problem.m

    def check(name, fn, dfn, pt, in_shape, out_comps):
        t, y, q, z, u = pt
        args = {"y": y, "q": q, "z": z, "u": u}
        x = args[name[-1]]
        exact = np.asarray(dfn(t, y, q, z, u), dtype=float)
        flat = x.reshape(x.shape[0], -1)
        for j in range(flat.shape[1]):
            hi, lo = flat.copy(), flat.copy()
            hi[:, j] += fd_step
            lo[:, j] -= fd_step
            args_hi = dict(args, **{name[-1]: hi.reshape(x.shape)})
            args_lo = dict(args, **{name[-1]: lo.reshape(x.shape)})
            fd = (
                np.asarray(fn(t, args_hi["y"], args_hi["q"], args_hi["z"], args_hi["u"]))
                - np.asarray(fn(t, args_lo["y"], args_lo["q"], args_lo["z"], args_lo["u"]))
            ) / (2 * fd_step)
            ex = exact.reshape(exact.shape[0] if exact.ndim > out_comps else 1, -1, flat.shape[1])[..., j]
            err = np.max(np.abs(fd.reshape(fd.shape[0], -1) - ex) / (1.0 + np.abs(ex)))
            if err > rel_tol:
                raise ValueError(f"derivative {name} fails finite-difference check: rel error {err:.2e}")

    for _ in range(n_points):
        t = float(rng.uniform(0.0, horizon))
        y = rng.normal(size=(1, n))
        q = rng.normal(size=(1, n, d))
        z = rng.normal(size=(1, n, K))
        u = rng.normal(size=(1, m))
        pt = (t, y, q, z, u)
        drv = problem.driver
        if drv.f_y is not None:
            check("f_y", drv.f, drv.f_y, pt, (n,), 1)
        if drv.f_q is not None:
            check("f_q", drv.f, drv.f_q, pt, (n, d), 1)
        if drv.f_z is not None:
            check("f_z", drv.f, drv.f_z, pt, (n, K), 1)
        if drv.f_u is not None:
            check("f_u", drv.f, drv.f_u, pt, (m,), 1)
        cst = problem.cost
        check("l_y", cst.l, cst.l_y, pt, (n,), 0)
        check("l_q", cst.l, cst.l_q, pt, (n, d), 0)
        check("l_z", cst.l, cst.l_z, pt, (n, K), 0)
        check("l_u", cst.l, cst.l_u, pt, (m,), 0)
        y0 = rng.normal(size=(1, n))
        exact = np.asarray(problem.phi_y(y0), dtype=float)
        for j in range(n):
            hi, lo = y0.copy(), y0.copy()
            hi[:, j] += fd_step
            lo[:, j] -= fd_step
            fd = (np.asarray(problem.phi(hi)) - np.asarray(problem.phi(lo))) / (2 * fd_step)
            err = np.max(np.abs(fd - exact[:, j]) / (1.0 + np.abs(exact[:, j])))
            if err > rel_tol:
                raise ValueError(f"derivative phi_y fails finite-difference check: rel error {err:.2e}")
    return problem


def solve_pair(
    problem: ControlProblem,
    control: np.ndarray,
    bundle: PathBundle,
    basis: RegressionBasis,
    options: SolverOptions | None = None,
) -> AdmissiblePair:
    """Solve the controlled state equation and package the admissible pair."""
    control = np.asarray(control, dtype=float)
    solution = solve_bsde(problem.driver, problem.terminal, bundle, basis, control=control, options=options)
    return AdmissiblePair(control=control, solution=solution)


def evaluate_cost(problem: ControlProblem, pair: AdmissiblePair, bundle: PathBundle) -> CostEstimate:
    """Monte Carlo estimate of the cost with left-endpoint time quadrature."""
    sol = pair.solution
    dt = bundle.grid.dt
    times = bundle.grid.times()
    N = bundle.grid.n_steps
    P = bundle.n_paths
    acc = np.zeros(P)
    for step in range(N):
        acc += np.asarray(
            problem.cost.l(times[step], sol.y[:, step], sol.q[:, step], sol.z[:, step], pair.control[:, step])
        ) * dt
    acc += np.asarray(problem.phi(sol.y[:, 0]))
    return CostEstimate(value=float(acc.mean()), std_error=float(acc.std(ddof=1) / np.sqrt(P)), per_path=acc)


def _frozen_coefficients(problem: ControlProblem, pair: AdmissiblePair, bundle: PathBundle, step: int):
    """Driver derivatives at the base pair, frozen at the conditional mean."""
    sol = pair.solution
    t = bundle.grid.times()[step]
    yb = sol.ybar[:, step]
    qn = sol.q[:, step]
    zn = sol.z[:, step]
    un = pair.control[:, step]
    P, n = yb.shape
    d, K = qn.shape[2], zn.shape[2]
    drv = problem.driver
    fy = _bc(drv.f_y(t, yb, qn, zn, un), (P, n, n))
    fq = _bc(drv.f_q(t, yb, qn, zn, un), (P, n, n, d))
    fz = _bc(drv.f_z(t, yb, qn, zn, un), (P, n, n, K))
    fu = _bc(drv.f_u(t, yb, qn, zn, un), (P, n, problem.m))
    return fy, fq, fz, fu


def solve_variational(
    problem: ControlProblem,
    pair: AdmissiblePair,
    direction: np.ndarray,
    bundle: PathBundle,
    basis: RegressionBasis,
) -> BsdeSolution:
    """Linearized state equation along the base pair with source f_u (u - ubar).

    Solves the linear backward equation with terminal value zero whose driver
    is the differential of f frozen along the pair; with the conventions in
    the module docstring this is the exact derivative of the discrete state
    map in the given control direction.
    """
    if not problem.driver.has_derivatives():
        raise ValueError("variational solve needs all four driver derivatives")
    direction = np.asarray(direction, dtype=float)
    dt = bundle.grid.dt

    def lin_f(t, Y, Q, Z, u_unused):
        step = int(round(t / dt))
        fy, fq, fz, fu = _frozen_coefficients(problem, pair, bundle, step)
        out = np.einsum("pij,pj->pi", fy, Y)
        out += np.einsum("pijd,pjd->pi", fq, Q)
        out += np.einsum("pijk,pjk->pi", fz, Z)
        out += np.einsum("pim,pm->pi", fu, direction[:, step])
        return out

    zero_terminal = TerminalSpec(fn=lambda state: np.zeros((bundle.n_paths, problem.n)))
    return solve_bsde(DriverSpec(f=lin_f), zero_terminal, bundle, basis)


def first_order_cost_term(
    problem: ControlProblem,
    pair: AdmissiblePair,
    variational: BsdeSolution,
    direction: np.ndarray,
    bundle: PathBundle,
) -> CostEstimate:
    """First-order term of the cost expansion in a control direction.

    E[ phi_y(y(0)) Y(0) + int ( l_y Y + l_q Q + l_z Z + l_u (u - ubar) ) dt ]
    with cost derivatives along the base pair and (Y, Q, Z) the variational
    solution for the direction.
    """
    sol = pair.solution
    dt = bundle.grid.dt
    times = bundle.grid.times()
    N = bundle.grid.n_steps
    P = bundle.n_paths
    cst = problem.cost
    acc = np.einsum("pn,pn->p", np.asarray(problem.phi_y(sol.y[:, 0]), dtype=float), variational.y[:, 0])
    for step in range(N):
        t = times[step]
        y_n, q_n, z_n, u_n = sol.y[:, step], sol.q[:, step], sol.z[:, step], pair.control[:, step]
        ly = _bc(cst.l_y(t, y_n, q_n, z_n, u_n), (P, problem.n))
        lq = _bc(cst.l_q(t, y_n, q_n, z_n, u_n), q_n.shape)
        lz = _bc(cst.l_z(t, y_n, q_n, z_n, u_n), z_n.shape)
        lu = _bc(cst.l_u(t, y_n, q_n, z_n, u_n), (P, problem.m))
        term = np.einsum("pn,pn->p", ly, variational.y[:, step])
        term += np.einsum("pnd,pnd->p", lq, variational.q[:, step])
        term += np.einsum("pnk,pnk->p", lz, variational.z[:, step])
        term += np.einsum("pm,pm->p", lu, direction[:, step])
        acc += term * dt
    return CostEstimate(value=float(acc.mean()), std_error=float(acc.std(ddof=1) / np.sqrt(P)), per_path=acc)


@dataclass
class ExpansionReport:
    """Rates of the convex-perturbation expansion on common random numbers."""

    epsilons: np.ndarray
    state_dev: np.ndarray  # D(eps): squared state deviation norm
    remainder: np.ndarray  # R(eps): squared norm after removing eps * variational
    cost_residual: np.ndarray  # |J(u^eps) - J(ubar) - eps * G|
    first_order_term: float
    cost_base: float
    state_dev_slope: float

    @property
    def remainder_over_eps2(self) -> np.ndarray:
        return self.remainder / self.epsilons**2

    @property
    def cost_residual_over_eps(self) -> np.ndarray:
        return self.cost_residual / self.epsilons

    def rows(self) -> list[dict]:
        return [
            {
                "eps": float(e),
                "state_dev": float(d),
                "remainder": float(r),
                "cost_residual": float(c),
            }
            for e, d, r, c in zip(self.epsilons, self.state_dev, self.remainder, self.cost_residual)
        ]


def _triple_sq_norm(dy: np.ndarray, dq: np.ndarray, dz: np.ndarray, dt: float) -> float:
    """E sup_t |dy|^2 + E int |dq|^2 dt + E int ||dz||^2 dt."""
    sup_y = float(np.mean(np.max(np.sum(dy**2, axis=2), axis=1)))
    q_int = float(np.mean(np.sum(dq**2, axis=(1, 2, 3))) * dt)
    z_int = float(np.mean(np.sum(dz**2, axis=(1, 2, 3))) * dt)
    return sup_y + q_int + z_int


def expansion_check(
    problem: ControlProblem,
    u_bar: np.ndarray,
    u: np.ndarray,
    bundle: PathBundle,
    basis: RegressionBasis,
    epsilons=(0.4, 0.2, 0.1, 0.05),
) -> ExpansionReport:
    """Measure the perturbation rates of state and cost under u^eps = ubar + eps (u - ubar).

    All solves share the bundle (common random numbers).  For each eps the
    report carries the squared state-deviation norm D(eps), the remainder
    R(eps) after subtracting eps times the variational solution, and the
    first-order cost residual |J(u^eps) - J(ubar) - eps G|.
    """
    eps = np.asarray(sorted(epsilons, reverse=True), dtype=float)
    u_bar = np.asarray(u_bar, dtype=float)
    u = np.asarray(u, dtype=float)
    direction = u - u_bar
    dt = bundle.grid.dt

    base = solve_pair(problem, u_bar, bundle, basis)
    variational = solve_variational(problem, base, direction, bundle, basis)
    G = first_order_cost_term(problem, base, variational, direction, bundle)
    J0 = evaluate_cost(problem, base, bundle)

    D = np.empty(eps.size)
    R = np.empty(eps.size)
    C = np.empty(eps.size)
    for i, e in enumerate(eps):
        pert = solve_pair(problem, u_bar + e * direction, bundle, basis)
        dy = pert.solution.y - base.solution.y
        dq = pert.solution.q - base.solution.q
        dz = pert.solution.z - base.solution.z
        D[i] = _triple_sq_norm(dy, dq, dz, dt)
        R[i] = _triple_sq_norm(
            dy - e * variational.y, dq - e * variational.q, dz - e * variational.z, dt
        )
        Je = evaluate_cost(problem, pert, bundle)
        C[i] = abs(Je.value - J0.value - e * G.value)

    slope = float(np.polyfit(np.log(eps), np.log(np.maximum(D, 1e-300)), 1)[0])
    return ExpansionReport(
        epsilons=eps,
        state_dev=D,
        remainder=R,
        cost_residual=C,
        first_order_term=G.value,
        cost_base=J0.value,
        state_dev_slope=slope,
    )


def solve_adjoint_general(
    problem: ControlProblem,
    pair: AdmissiblePair,
    bundle: PathBundle,
    divergence_bound: float = 1e8,
) -> np.ndarray:
    """Forward Euler for the adjoint process of the variational equation.

    k(0) = -phi_y(y(0)) and

      dk = (f_y^T k - l_y) dt + sum_i (f_{q^i}^T k - l_{q^i}) dW^i
                              + sum_i (f_{z^i}^T k - l_{z^i}) dH^i,

    with every coefficient frozen at the pair's left-endpoint values.
    Returns k of shape (P, N + 1, n).
    """
    sol = pair.solution
    P = bundle.n_paths
    N = bundle.grid.n_steps
    dt = bundle.grid.dt
    times = bundle.grid.times()
    n = problem.n
    cst = problem.cost
    drv = problem.driver

    k = np.empty((P, N + 1, n))
    k[:, 0] = -np.asarray(problem.phi_y(sol.y[:, 0]), dtype=float)
    for step in range(N):
        t = times[step]
        y_n, q_n, z_n, u_n = sol.y[:, step], sol.q[:, step], sol.z[:, step], pair.control[:, step]
        kn = k[:, step]
        fy = _bc(drv.f_y(t, y_n, q_n, z_n, u_n), (P, n, n))
        fq = _bc(drv.f_q(t, y_n, q_n, z_n, u_n), (P, n, n, q_n.shape[2]))
        fz = _bc(drv.f_z(t, y_n, q_n, z_n, u_n), (P, n, n, z_n.shape[2]))
        ly = _bc(cst.l_y(t, y_n, q_n, z_n, u_n), (P, n))
        lq = _bc(cst.l_q(t, y_n, q_n, z_n, u_n), q_n.shape)
        lz = _bc(cst.l_z(t, y_n, q_n, z_n, u_n), z_n.shape)
        drift = np.einsum("pij,pi->pj", fy, kn) - ly
        coef_w = np.einsum("pijd,pi->pjd", fq, kn) - lq
        coef_h = np.einsum("pijk,pi->pjk", fz, kn) - lz
        nxt = kn + drift * dt
        nxt += np.einsum("pjd,pd->pj", coef_w, bundle.dW[:, step])
        nxt += np.einsum("pjk,pk->pj", coef_h, bundle.dH[:, step])
        k[:, step + 1] = nxt
        peak = float(np.max(np.abs(nxt)))
        if not np.isfinite(peak) or peak > divergence_bound:
            raise ArithmeticError(f"divergence: max|k| = {peak:.3e} at step {step + 1}")
    return k


def hamiltonian_general(problem: ControlProblem, t, y, q, z, u, k) -> np.ndarray:
    """H(t, y, q, z, u, k) = <k, -f(t, y, q, z, u)> + l(t, y, q, z, u), per path."""
    f = np.asarray(problem.driver.f(t, y, q, z, u), dtype=float)
    l = np.asarray(problem.cost.l(t, y, q, z, u), dtype=float)
    return -np.einsum("pn,pn->p", np.asarray(k, dtype=float), f) + l


def hamiltonian_u(problem: ControlProblem, t, y, q, z, u, k) -> np.ndarray:
    """Control gradient H_u = -f_u^T k + l_u, per path, shape (P, m)."""
    P = np.asarray(y).shape[0]
    fu = _bc(problem.driver.f_u(t, y, q, z, u), (P, problem.n, problem.m))
    lu = _bc(problem.cost.l_u(t, y, q, z, u), (P, problem.m))
    return -np.einsum("pnm,pn->pm", fu, np.asarray(k, dtype=float)) + lu


@dataclass
class NecessaryReport:
    """Stationarity and variational-inequality diagnostics of a candidate pair."""

    sup_residual: float  # sup over (path, step) of |H_u|
    sup_residual_normalized: float  # sup of |H_u| / (1 + |k|)
    vi_min: float | None  # box case: min over sampled controls of E int H_u (u - ubar) dt
    vi_argmin: np.ndarray | None
    vi_pointwise: float | None  # box case: E int of pointwise min over samples
    direction_functionals: list[float]


def necessary_residual(
    problem: ControlProblem,
    pair: AdmissiblePair,
    k: np.ndarray,
    bundle: PathBundle,
    directions: list | None = None,
    basis: RegressionBasis | None = None,
    n_box_samples: int = 64,
) -> NecessaryReport:
    """Evaluate the first-order optimality condition along a pair.

    For unconstrained controls the report carries the sup over (path, step) of
    the stationarity residual |H_u|.  For a box control set it evaluates
    E int H_u . (u_s - ubar) dt over a deterministic Sobol sample of the box
    (a falsifier, not a proof) and reports the minimum.  When ``directions``
    are supplied (each (P, N, m)), the four-term first-order cost functional
    is evaluated per direction, which requires ``basis`` for the variational
    solves.
    """
    sol = pair.solution
    dt = bundle.grid.dt
    times = bundle.grid.times()
    N = bundle.grid.n_steps
    P = bundle.n_paths
    m = problem.m

    hu = np.empty((P, N, m))
    for step in range(N):
        hu[:, step] = hamiltonian_u(
            problem,
            times[step],
            sol.y[:, step],
            sol.q[:, step],
            sol.z[:, step],
            pair.control[:, step],
            k[:, step],
        )
    k_norm = np.sqrt(np.sum(k[:, :N] ** 2, axis=2))
    hu_norm = np.sqrt(np.sum(hu**2, axis=2))
    sup_resid = float(hu_norm.max())
    sup_resid_norm = float((hu_norm / (1.0 + k_norm)).max())

    vi_min = vi_argmin = vi_pointwise = None
    if problem.control_box is not None:
        lo = np.asarray(problem.control_box[0], dtype=float).reshape(m)
        hi = np.asarray(problem.control_box[1], dtype=float).reshape(m)
        exponent = max(1, int(np.ceil(np.log2(n_box_samples))))
        pts = qmc.Sobol(d=m, scramble=False).random_base2(exponent)[:n_box_samples]
        samples = lo + pts * (hi - lo)  # (S, m)
        hu_total = hu.sum(axis=1) * dt  # (P, m): int H_u dt per path
        base_term = float(np.mean(np.einsum("pnm,pnm->p", hu, pair.control)) * dt)
        vals = hu_total.mean(axis=0) @ samples.T - base_term  # (S,)
        i_min = int(np.argmin(vals))
        vi_min = float(vals[i_min])
        vi_argmin = samples[i_min]
        # sharper falsifier: pointwise minimum over the sample, step by step
        acc = np.zeros(P)
        for step in range(N):
            gains = hu[:, step] @ samples.T - np.einsum("pm,pm->p", hu[:, step], pair.control[:, step])[:, None]
            acc += gains.min(axis=1) * dt
        vi_pointwise = float(acc.mean())

    funcs = []
    if directions:
        if basis is None:
            raise ValueError("direction functionals need a regression basis")
        for v in directions:
            v = np.asarray(v, dtype=float)
            var = solve_variational(problem, pair, v, bundle, basis)
            funcs.append(first_order_cost_term(problem, pair, var, v, bundle).value)

    return NecessaryReport(
        sup_residual=sup_resid,
        sup_residual_normalized=sup_resid_norm,
        vi_min=vi_min,
        vi_argmin=vi_argmin,
        vi_pointwise=vi_pointwise,
        direction_functionals=funcs,
    )


@dataclass
class DualityReport:
    """Agreement of the two evaluations of the first-order cost term."""

    first_order_variational: float
    first_order_adjoint: float
    residual: float
    pairing_identity_gap: float  # E<Y(0), k(0)> + E phi_y(y(0)) Y(0), zero by construction


def duality_check(
    problem: ControlProblem,
    u_bar: np.ndarray,
    direction: np.ndarray,
    bundle: PathBundle,
    basis: RegressionBasis,
) -> DualityReport:
    """Compare the variational and adjoint evaluations of the cost derivative.

    The variational route is exact for the discrete system; the adjoint route
    E int <-f_u^T k + l_u, v> dt carries the Euler pairing defect, so the
    residual measures the discrete duality gap at this step size.
    """
    u_bar = np.asarray(u_bar, dtype=float)
    direction = np.asarray(direction, dtype=float)
    pair = solve_pair(problem, u_bar, bundle, basis)
    variational = solve_variational(problem, pair, direction, bundle, basis)
    g_var = first_order_cost_term(problem, pair, variational, direction, bundle)
    k = solve_adjoint_general(problem, pair, bundle)

    dt = bundle.grid.dt
    times = bundle.grid.times()
    N = bundle.grid.n_steps
    P = bundle.n_paths
    sol = pair.solution
    acc = np.zeros(P)
    for step in range(N):
        fu = _bc(
            problem.driver.f_u(times[step], sol.y[:, step], sol.q[:, step], sol.z[:, step], pair.control[:, step]),
            (P, problem.n, problem.m),
        )
        lu = _bc(
            problem.cost.l_u(times[step], sol.y[:, step], sol.q[:, step], sol.z[:, step], pair.control[:, step]),
            (P, problem.m),
        )
        hu = -np.einsum("pnm,pn->pm", fu, k[:, step]) + lu
        acc += np.einsum("pm,pm->p", hu, direction[:, step]) * dt
    g_adj = float(acc.mean())

    pairing0 = float(np.mean(np.einsum("pn,pn->p", variational.y[:, 0], k[:, 0])))
    phi_term = float(
        np.mean(np.einsum("pn,pn->p", np.asarray(problem.phi_y(sol.y[:, 0]), dtype=float), variational.y[:, 0]))
    )
    return DualityReport(
        first_order_variational=g_var.value,
        first_order_adjoint=g_adj,
        residual=abs(g_var.value - g_adj),
        pairing_identity_gap=abs(pairing0 + phi_term),
    )
