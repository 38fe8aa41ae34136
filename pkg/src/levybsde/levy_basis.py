"""Levy model definition and the Teugel martingale coefficient construction.

A scalar Levy process with Gaussian coefficient ``sigma`` and a finite-support
jump measure ``nu`` drives everything downstream.  The compensated power-jump
processes Y^(1), Y^(2), ... of that process are martingales but are not
orthogonal; pairwise strongly orthonormal combinations

    H^i = c_{i,i} Y^(i) + ... + c_{i,1} Y^(1)

are obtained by orthonormalizing the monomials 1, x, x^2, ... in L^2 of the
measure

    mu(dx) = x^2 nu(dx) + sigma^2 delta_0(dx),

whose k-th moment is ``mu_k = sum_j lam_j x_j^(k+2) + sigma^2 * 1{k=0}`` for a
measure with atoms (x_j, lam_j).  The Gram matrix of the monomials is the
Hankel matrix G[j, k] = mu_{j+k}, and the coefficient rows come from inverting
its Cholesky factor, so that ``c G c^T = I`` and the rescaled increments have
unit bracket rate per component.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

__all__ = [
    "JumpMeasure",
    "LevyModel",
    "MomentTable",
    "TeugelCoeffs",
    "validate_model",
    "mu_moment",
    "gram_matrix",
    "orthonormalize",
    "teugel_coefficients",
]

# Double-precision headroom for truncation levels K <= 6.
ORTHONORMALITY_TOL = 1e-10
RANK_PIVOT_REL_TOL = 1e-12


@dataclass(frozen=True)
class JumpMeasure:
    """Finite-support jump intensity measure: atoms (location, rate).

    ``locations[j]`` is the jump size x_j and ``intensities[j]`` the arrival
    rate lam_j of jumps of that size per unit time.
    """

    locations: np.ndarray
    intensities: np.ndarray

    def __init__(self, atoms=()):
        locs = np.asarray([a[0] for a in atoms], dtype=float)
        lams = np.asarray([a[1] for a in atoms], dtype=float)
        object.__setattr__(self, "locations", locs)
        object.__setattr__(self, "intensities", lams)

    @property
    def n_atoms(self) -> int:
        return self.locations.size

    @property
    def total_intensity(self) -> float:
        return float(self.intensities.sum()) if self.n_atoms else 0.0

    def moment(self, power: int) -> float:
        """integral of x^power against nu, exact for atomic measures."""
        if self.n_atoms == 0:
            return 0.0
        return float(math.fsum(lam * x**power for x, lam in zip(self.locations, self.intensities)))


@dataclass(frozen=True)
class LevyModel:
    """Driving noise: drift + Gaussian part + compound-Poisson jumps + independent Brownian motion.

    The Levy process is parametrized directly as

        L(t) = drift * t + sigma * W_L(t) + compound-Poisson(nu),

    so ``E L(t) = (drift + sum_j lam_j x_j) t`` with no truncation bookkeeping.
    ``brownian_dim`` is the dimension of the separate Brownian motion W that
    drives the q-components of the backward equations; W is independent of L.
    """

    drift: float = 0.0
    sigma: float = 1.0
    nu: JumpMeasure = field(default_factory=JumpMeasure)
    brownian_dim: int = 1

    @property
    def mean_rate(self) -> float:
        """d/dt of E L(t)."""
        return self.drift + self.nu.moment(1)

    def power_mean_rate(self, i: int) -> float:
        """d/dt of E L^(i)(t), the i-th power-jump compensator rate.

        The Gaussian part contributes only for i = 1 through the drift; for
        i >= 2 the power-jump process sums i-th powers of jumps alone.
        """
        if i == 1:
            return self.mean_rate
        return self.nu.moment(i)


def validate_model(model: LevyModel) -> LevyModel:
    """Check model invariants; return the model unchanged if all hold.

    Rejects atoms at zero, non-positive intensities, duplicate locations,
    negative sigma, non-positive Brownian dimension, and the fully
    deterministic case (sigma = 0 with no jumps).
    """
    if model.sigma < 0:
        raise ValueError(f"negative sigma: {model.sigma}")
    if model.brownian_dim < 1:
        raise ValueError(f"brownian_dim must be positive, got {model.brownian_dim}")
    locs = model.nu.locations
    lams = model.nu.intensities
    if np.any(locs == 0.0):
        raise ValueError("atom at zero in jump measure")
    if np.any(lams <= 0.0):
        bad = lams[lams <= 0.0][0]
        raise ValueError(f"non-positive intensity in jump measure: {bad}")
    if np.unique(locs).size != locs.size:
        raise ValueError("duplicate atom location in jump measure")
    if model.sigma == 0.0 and model.nu.n_atoms == 0:
        raise ValueError("deterministic process: sigma = 0 and empty jump measure")
    return model


def mu_moment(model: LevyModel, k: int) -> float:
    """k-th moment of the orthogonalization measure mu(dx) = x^2 nu(dx) + sigma^2 delta_0(dx).

    mu_k = sum_j lam_j x_j^(k+2) + sigma^2 * 1{k=0}, exact up to rounding.
    """
    if k < 0:
        raise ValueError(f"moment order must be non-negative, got {k}")
    value = model.nu.moment(k + 2)
    if k == 0:
        value += model.sigma**2
    return value


@dataclass(frozen=True)
class MomentTable:
    """Moments mu_0 .. mu_{2K-2} of the orthogonalization measure."""

    mu: np.ndarray
    K: int

    @classmethod
    def from_model(cls, model: LevyModel, K: int) -> "MomentTable":
        if K < 1:
            raise ValueError(f"K must be positive, got {K}")
        mu = np.array([mu_moment(model, k) for k in range(2 * K - 1)])
        return cls(mu=mu, K=K)

    def gram(self) -> np.ndarray:
        """Hankel Gram matrix G[j, k] = mu_{j+k} of the monomials 1..x^{K-1}."""
        K = self.K
        return np.array([[self.mu[j + k] for k in range(K)] for j in range(K)])


def gram_matrix(model: LevyModel, K: int) -> np.ndarray:
    """Gram matrix of the monomials 1, x, ..., x^{K-1} in L^2(mu)."""
    return MomentTable.from_model(model, K).gram()


@dataclass(frozen=True)
class TeugelCoeffs:
    """Lower-triangular coefficients mapping compensated power jumps to orthonormal martingales.

    Row i holds c_{i,1} .. c_{i,i} (zero above the diagonal), with
    c_{i,i} > 0, and c @ gram @ c.T = identity within ORTHONORMALITY_TOL.
    """

    K: int
    c: np.ndarray
    orthonormality_residual: float

    def polynomial(self, i: int) -> np.ndarray:
        """Coefficients (constant first) of the i-th orthonormal polynomial, i = 1..K."""
        return self.c[i - 1, :i].copy()

    def to_csv(self, path) -> None:
        """Row-major CSV dump at 17 significant digits."""
        with open(path, "w", newline="") as fh:
            fh.write(",".join(f"c_{j + 1}" for j in range(self.K)) + "\n")
            for row in self.c:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def _guarded_cholesky(gram: np.ndarray, K: int) -> np.ndarray:
    """Cholesky factor of the leading K x K block, with a relative pivot guard.

    Moment (Hankel-type) matrices are notoriously ill-conditioned; a pivot
    below RANK_PIVOT_REL_TOL times the largest diagonal entry signals that the
    measure supports fewer than K nondegenerate components.
    """
    G = np.asarray(gram, dtype=float)[:K, :K]
    scale = float(np.max(np.abs(np.diag(G)))) or 1.0
    L = np.zeros((K, K))
    for i in range(K):
        pivot = G[i, i] - L[i, :i] @ L[i, :i]
        if pivot <= RANK_PIVOT_REL_TOL * scale:
            raise ValueError(
                f"rank deficient: Gram pivot {pivot:.3e} at row {i + 1} below "
                f"{RANK_PIVOT_REL_TOL:.0e} x largest diagonal {scale:.3e}"
            )
        L[i, i] = math.sqrt(pivot)
        for j in range(i + 1, K):
            L[j, i] = (G[j, i] - L[j, :i] @ L[i, :i]) / L[i, i]
    return L


def orthonormalize(gram: np.ndarray, K: int) -> TeugelCoeffs:
    """Coefficient rows of the orthonormal polynomials for a moment Gram matrix.

    Factorizes gram = L L^T and returns c = L^{-1}, which is lower triangular
    with positive diagonal.  Raises "rank deficient" when the leading K x K
    minor is numerically singular.
    """
    gram = np.asarray(gram, dtype=float)
    if gram.ndim != 2 or gram.shape[0] < K or gram.shape[1] < K:
        raise ValueError(f"gram must be at least {K} x {K}, got {gram.shape}")
    if not np.allclose(gram, gram.T, rtol=0.0, atol=1e-12 * (1.0 + np.abs(gram).max())):
        raise ValueError("gram matrix is not symmetric")
    L = _guarded_cholesky(gram, K)
    c = scipy.linalg.solve_triangular(L, np.eye(K), lower=True)
    residual = float(np.max(np.abs(c @ gram[:K, :K] @ c.T - np.eye(K))))
    if residual > ORTHONORMALITY_TOL:
        raise ValueError(
            f"orthonormality residual {residual:.3e} exceeds {ORTHONORMALITY_TOL:.0e}"
        )
    return TeugelCoeffs(K=K, c=c, orthonormality_residual=residual)


def teugel_coefficients(model: LevyModel, K: int) -> TeugelCoeffs:
    """Validate the model and orthonormalize its first K components.

    A pure-Gaussian model (empty jump measure) supports only K = 1, where the
    single martingale is the normalized Gaussian part of L.
    """
    validate_model(model)
    if model.nu.n_atoms == 0 and K > 1:
        raise ValueError("rank deficient: pure-Gaussian model supports only K = 1")
    return orthonormalize(gram_matrix(model, K), K)
