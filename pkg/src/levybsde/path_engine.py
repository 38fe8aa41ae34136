"""Monte Carlo simulation of the driving noises on a uniform time grid.

Per path and step the engine draws Brownian increments of the independent
d-dimensional motion W, the Gaussian and compound-Poisson increments of the
Levy process L, and assembles

    dY^(1) = sigma sqrt(dt) xi + sum of jumps     - (sum_j lam_j x_j) dt
    dY^(i) = sum of i-th powers of jumps          - (sum_j lam_j x_j^i) dt
    dH     = c @ dY

with finite-activity jumps simulated exactly (Poisson counts per step plus
categorical atom sampling), so the compensated increments have mean zero and
E[dH dH^T] = I dt without discretization bias.

Reproducibility contract: path p draws from its own counter-based substream,
``Philox(key=seed, counter=p * 2**128)``, consuming normals, Poisson counts
and jump uniforms in that fixed order.  Substreams make the output
bit-identical whether paths are simulated sequentially, in chunks, or in
parallel, and a prefix of paths is unchanged when n_paths grows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .levy_basis import LevyModel, TeugelCoeffs, validate_model

__all__ = [
    "TimeGrid",
    "RngSpec",
    "PathBundle",
    "PathState",
    "simulate_paths",
    "empirical_bracket",
    "terminal_product_bracket",
    "power_jump_moments_report",
]

# Default cap on n_paths * n_steps * (d + 2K) float64 entries (~3.2 GB).
DEFAULT_MAX_ENTRIES = 400_000_000


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_N = horizon with dt = horizon / n_steps."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be positive, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    def times(self) -> np.ndarray:
        """Grid times t_0 .. t_N, length n_steps + 1."""
        return np.linspace(0.0, self.horizon, self.n_steps + 1)


@dataclass(frozen=True)
class RngSpec:
    """Seed plus the per-path substream derivation rule.

    Path p uses the counter-based generator Philox(key=seed) with its 256-bit
    counter advanced to p * 2**128.  A path never consumes 2**128 blocks, so
    substreams cannot overlap, and the draw sequence of a path depends only on
    (seed, p).
    """

    seed: int

    def generator_for_path(self, path_index: int) -> np.random.Generator:
        bitgen = np.random.Philox(key=self.seed, counter=path_index << 128)
        return np.random.Generator(bitgen)


@dataclass(frozen=True)
class PathState:
    """Levels of the driving processes at one grid time, across all paths."""

    t: float
    W: np.ndarray  # (n_paths, d)
    L: np.ndarray  # (n_paths,)
    H: np.ndarray  # (n_paths, K)


@dataclass
class PathBundle:
    """Simulated increments of an ensemble, immutable after construction.

    dW holds Brownian increments (n_paths, n_steps, d), dY the compensated
    power-jump increments and dH the orthonormalized increments, both
    (n_paths, n_steps, K).  Cumulative levels are derived lazily and cached.
    """

    grid: TimeGrid
    n_paths: int
    model: LevyModel
    coeffs: TeugelCoeffs
    rng: RngSpec
    dW: np.ndarray
    dY: np.ndarray
    dH: np.ndarray
    jump_log: list | None = None
    _levels: dict = field(default_factory=dict, repr=False)

    @property
    def d(self) -> int:
        return self.dW.shape[2]

    @property
    def K(self) -> int:
        return self.dH.shape[2]

    def W_levels(self) -> np.ndarray:
        """Brownian levels (n_paths, n_steps + 1, d), W(0) = 0."""
        if "W" not in self._levels:
            self._levels["W"] = _cumlevels(self.dW)
        return self._levels["W"]

    def H_levels(self) -> np.ndarray:
        """Teugel martingale levels (n_paths, n_steps + 1, K), H(0) = 0."""
        if "H" not in self._levels:
            self._levels["H"] = _cumlevels(self.dH)
        return self._levels["H"]

    def L_levels(self) -> np.ndarray:
        """Levy process levels (n_paths, n_steps + 1).

        Reconstructed as L(t) = Y^(1)(t) + (drift + nu-mean) t, which telescopes
        the stored compensated increments exactly.
        """
        if "L" not in self._levels:
            y1 = _cumlevels(self.dY[:, :, :1])[:, :, 0]
            trend = self.model.mean_rate * self.grid.times()
            self._levels["L"] = y1 + trend[None, :]
        return self._levels["L"]

    def state(self, n: int) -> PathState:
        """Path state at grid index n (0 .. n_steps)."""
        t = self.grid.times()[n]
        return PathState(t=t, W=self.W_levels()[:, n], L=self.L_levels()[:, n], H=self.H_levels()[:, n])

    def to_csv(self, path, max_paths: int | None = None) -> None:
        """Dump increments as CSV (path, step, t, dW_1.., dH_1..) at 17 digits."""
        P = self.n_paths if max_paths is None else min(max_paths, self.n_paths)
        times = self.grid.times()
        with open(path, "w", newline="") as fh:
            header = ["path", "step", "t"]
            header += [f"dW_{i + 1}" for i in range(self.d)]
            header += [f"dH_{i + 1}" for i in range(self.K)]
            fh.write(",".join(header) + "\n")
            for p in range(P):
                for n in range(self.grid.n_steps):
                    row = [str(p), str(n), f"{times[n]:.17g}"]
                    row += [f"{v:.17g}" for v in self.dW[p, n]]
                    row += [f"{v:.17g}" for v in self.dH[p, n]]
                    fh.write(",".join(row) + "\n")


def _cumlevels(increments: np.ndarray) -> np.ndarray:
    """Prepend zero level and cumulative-sum increments along the step axis."""
    P, N, C = increments.shape
    out = np.zeros((P, N + 1, C))
    np.cumsum(increments, axis=1, out=out[:, 1:, :])
    return out


def simulate_paths(
    model: LevyModel,
    coeffs: TeugelCoeffs,
    grid: TimeGrid,
    n_paths: int,
    rng: RngSpec,
    max_entries: int = DEFAULT_MAX_ENTRIES,
    store_jumps: bool = False,
) -> PathBundle:
    """Simulate a Monte Carlo ensemble of driving-noise increments.

    Per path p (own substream, see RngSpec) and step n the draw order is:
    standard normals of shape (n_steps, d + 1) giving dW and the Gaussian part
    of L, then Poisson jump counts per step at rate total_intensity * dt, then
    one uniform per jump mapped to an atom with probability lam_j / Lambda.
    Summation order over jumps is fixed (path-major, then step), so reductions
    are bit-reproducible.
    """
    validate_model(model)
    if n_paths < 1:
        raise ValueError(f"n_paths must be positive, got {n_paths}")
    d = model.brownian_dim
    K = coeffs.K
    N = grid.n_steps
    dt = grid.dt
    entries = n_paths * N * (d + 2 * K)
    if entries > max_entries:
        raise MemoryError(
            f"simulation would allocate {entries} entries, exceeding the budget {max_entries}"
        )

    # Zero-intensity atoms contribute nothing; drop them defensively so an
    # unvalidated measure still simulates identically to its live atoms.
    live = model.nu.intensities > 0.0
    locs = model.nu.locations[live]
    lams = model.nu.intensities[live]
    lam_total = float(lams.sum())
    atom_cdf = None
    if lam_total > 0:
        atom_cdf = np.cumsum(lams) / lam_total
        atom_cdf[-1] = 1.0  # guard rounding so searchsorted stays in range

    normals = np.empty((n_paths, N, d + 1))
    counts = np.zeros((n_paths, N), dtype=np.int64) if lam_total > 0 else None
    uniforms = []
    for p in range(n_paths):
        g = rng.generator_for_path(p)
        normals[p] = g.standard_normal(size=(N, d + 1))
        if lam_total > 0:
            c = g.poisson(lam_total * dt, size=N)
            counts[p] = c
            uniforms.append(g.random(int(c.sum())))

    sqrt_dt = np.sqrt(dt)
    dW = sqrt_dt * normals[:, :, :d]
    gauss = normals[:, :, d]
    del normals

    dY = np.empty((n_paths, N, K))
    jump_log = None
    if lam_total > 0:
        u_all = np.concatenate(uniforms) if uniforms else np.zeros(0)
        sizes = locs[np.searchsorted(atom_cdf, u_all, side="left")]
        # flat (path, step) index of each jump, path-major then step
        flat_counts = counts.ravel()
        cell_of_jump = np.repeat(np.arange(n_paths * N), flat_counts)
        for j in range(1, K + 1):
            power_sum = np.bincount(cell_of_jump, weights=sizes**j, minlength=n_paths * N)
            dY[:, :, j - 1] = power_sum.reshape(n_paths, N) - model.nu.moment(j) * dt
        if store_jumps:
            split = np.cumsum(flat_counts)[:-1]
            jump_log = [arr.reshape(-1) for arr in np.split(sizes, split)]
    else:
        dY.fill(0.0)
        if K != 1:
            raise ValueError("pure-Gaussian model supports only K = 1")
    if model.sigma > 0:
        dY[:, :, 0] += model.sigma * sqrt_dt * gauss
    del gauss

    dH = np.einsum("ij,pnj->pni", coeffs.c, dY)
    return PathBundle(
        grid=grid,
        n_paths=n_paths,
        model=model,
        coeffs=coeffs,
        rng=rng,
        dW=dW,
        dY=dY,
        dH=dH,
        jump_log=jump_log,
    )


@dataclass(frozen=True)
class BracketReport:
    """Entrywise estimates and standard errors of a K x K bracket matrix."""

    estimate: np.ndarray
    std_error: np.ndarray

    def max_deviation_in_se(self, target: np.ndarray) -> float:
        """Largest |estimate - target| / SE over entries (SE floored at tiny)."""
        se = np.maximum(self.std_error, 1e-300)
        return float(np.max(np.abs(self.estimate - target) / se))


def empirical_bracket(bundle: PathBundle) -> BracketReport:
    """Realized covariation estimate of the predictable bracket at the horizon.

    Entry (i, j) averages sum_n dH^i_n dH^j_n over paths; for orthonormalized
    increments the target is delta_ij * horizon.
    """
    if bundle.n_paths < 2:
        raise ValueError("bracket estimate needs at least 2 paths")
    P, _, K = bundle.dH.shape
    # per-path realized covariation, path-major reduction
    prods = np.einsum("pni,pnj->pij", bundle.dH, bundle.dH)
    est = prods.mean(axis=0)
    se = prods.std(axis=0, ddof=1) / np.sqrt(P)
    return BracketReport(estimate=est, std_error=se)


def terminal_product_bracket(bundle: PathBundle) -> BracketReport:
    """Moment estimate E[H^i(T) H^j(T)], equal to delta_ij * horizon for martingales."""
    HT = bundle.dH.sum(axis=1)  # (P, K)
    P = bundle.n_paths
    prods = np.einsum("pi,pj->pij", HT, HT)
    est = prods.mean(axis=0)
    se = prods.std(axis=0, ddof=1) / np.sqrt(P)
    return BracketReport(estimate=est, std_error=se)


def power_jump_moments_report(model: LevyModel, coeffs: TeugelCoeffs, bundle: PathBundle) -> list[dict]:
    """Per-component QA table for the compensated power-jump increments.

    Each row compares the empirical per-step mean (target 0) and variance of
    dY^(j) against the exact compensated values; the exact per-step variance is
    (sum_j lam x^(2j)) dt plus sigma^2 dt for j = 1.
    """
    rows = []
    dt = bundle.grid.dt
    for j in range(1, bundle.K + 1):
        vals = bundle.dY[:, :, j - 1].ravel()
        exact_var = model.nu.moment(2 * j) * dt
        if j == 1:
            exact_var += model.sigma**2 * dt
        rows.append(
            {
                "component": j,
                "mean": float(vals.mean()),
                "se_mean": float(vals.std(ddof=1) / np.sqrt(vals.size)),
                "exact_mean": 0.0,
                "variance": float(vals.var(ddof=1)),
                "exact_variance": float(exact_var),
            }
        )
    return rows
