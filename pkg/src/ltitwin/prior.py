"""Matérn-type Gaussian prior on the seafloor grid.

The spatial covariance is ``M^{-2}`` with ``M = alpha1 I - alpha2 Lap_h`` and a
Robin condition ``alpha2 du/dn + beta u = 0``.  Time slices are independent,
so every space-time operation here acts slice by slice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_solve_banded, cholesky_banded

from .wave import GridSpec


class PriorError(ValueError):
    pass


@dataclass(frozen=True)
class PriorSpec:
    """``robin_coeff=None`` selects ``sqrt(alpha1 * alpha2)``."""

    alpha1: float = 1.0
    alpha2: float = 3.5e5
    robin_coeff: float | None = None
    mean: np.ndarray | None = None

    def __post_init__(self):
        if not (self.alpha1 > 0 and self.alpha2 > 0):
            raise PriorError("alpha1 and alpha2 must be positive")
        if self.robin_coeff is not None and self.robin_coeff < 0:
            raise PriorError("robin_coeff must be non-negative")

    @property
    def beta(self) -> float:
        if self.robin_coeff is None:
            return math.sqrt(self.alpha1 * self.alpha2)
        return self.robin_coeff

    def correlation_length(self, seafloor_dim: int) -> float:
        """Matérn practical range ``sqrt(8 nu alpha2 / alpha1)``, ``nu = 2 - d/2``."""
        nu = 2.0 - seafloor_dim / 2.0
        return math.sqrt(8.0 * nu * self.alpha2 / self.alpha1)


def alpha2_for_range(length: float, seafloor_dim: int, alpha1: float = 1.0) -> float:
    nu = 2.0 - seafloor_dim / 2.0
    return alpha1 * length**2 / (8.0 * nu)


def _neg_laplacian_1d(n: int, h: float, robin: float, alpha2: float) -> sp.csr_matrix:
    """``alpha2 * (-Lap_h)`` plus Robin boundary terms (finite-volume form)."""
    main = np.full(n, 2.0)
    main[0] = main[-1] = 1.0
    T = sp.diags([-np.ones(n - 1), main, -np.ones(n - 1)], [-1, 0, 1], format="csr") * (alpha2 / h**2)
    bnd = np.zeros(n)
    bnd[0] = bnd[-1] = robin / h
    return (T + sp.diags(bnd)).tocsr()


class EllipticOperator:
    """``M = alpha1 I - alpha2 Lap_h`` with its banded Cholesky factor."""

    factorizations = 0  # process-wide count, for online-purity checks

    def __init__(self, grid: GridSpec, spec: PriorSpec):
        self.grid = grid
        self.spec = spec
        nx, ny = grid.nx, grid.ny
        beta = spec.beta
        Ax = _neg_laplacian_1d(nx, grid.dx, beta, spec.alpha2)
        if grid.seafloor_dim == 1:
            A = Ax
            self.bandwidth = 1
        else:
            Ay = _neg_laplacian_1d(ny, grid.dy, beta, spec.alpha2)
            A = sp.kron(sp.identity(ny), Ax) + sp.kron(Ay, sp.identity(nx))
            self.bandwidth = nx
        self.matrix = (A + spec.alpha1 * sp.identity(grid.n_seafloor)).tocsr()
        self._factor = self._factorize()

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def _factorize(self) -> np.ndarray:
        M = self.matrix
        asym = abs(M - M.T).max() if M.nnz else 0.0
        if asym > 1e-14 * abs(M).max():
            raise PriorError(f"elliptic operator not symmetric (max |M - M^T| = {asym})")
        u = self.bandwidth
        ab = np.zeros((u + 1, self.n))
        dia = M.todia()
        for off, data in zip(dia.offsets, dia.data):
            if off >= 0:
                # upper storage: ab[u - off, j] = M[j - off, j]
                ab[u - off, off:] = data[off:]
        try:
            factor = cholesky_banded(ab, lower=False)
        except np.linalg.LinAlgError as exc:
            raise PriorError("elliptic operator is not positive definite") from exc
        EllipticOperator.factorizations += 1
        return factor

    # Spatial index is axis 1 of stacked inputs (axis 0 for a lone vector)
    # whenever there is a time axis.
    def _columnwise(self, fn, v: np.ndarray) -> np.ndarray:
        if v.ndim == 1:
            return fn(v)
        moved = np.moveaxis(v, 1, 0)
        out = fn(moved.reshape(self.n, -1)).reshape(moved.shape)
        return np.moveaxis(out, 0, 1)

    def _solve(self, v: np.ndarray) -> np.ndarray:
        return self._columnwise(lambda b: cho_solve_banded((self._factor, False), b), v)

    def _check(self, v):
        v = np.asarray(v, dtype=np.float64)
        axis = 0 if v.ndim == 1 else 1
        if v.shape[axis] != self.n:
            raise PriorError(f"field has {v.shape[axis]} nodes, prior has {self.n}")
        return v

    def solve(self, v):
        """``M^{-1} v``."""
        return self._solve(self._check(v))

    def apply(self, v):
        """``M v``."""
        return self._columnwise(lambda b: self.matrix @ b, self._check(v))

    def cov_apply(self, v):
        """``Gamma_prior v = M^{-1} M^{-1} v``."""
        return self._solve(self._solve(self._check(v)))

    def precision_apply(self, v):
        """``Gamma_prior^{-1} v = M M v``."""
        return self.apply(self.apply(v))

    def dense_cov(self) -> np.ndarray:
        Minv = self._solve(np.eye(self.n))
        return Minv @ Minv

    def pointwise_variance(self) -> np.ndarray:
        return np.diag(self.dense_cov()) if self.n <= 5000 else np.array(
            [self.cov_apply(np.eye(1, self.n, i)[0])[i] for i in range(self.n)])

    def sample(self, rng: np.random.Generator | int, n_time: int) -> np.ndarray:
        """Zero-mean draw with covariance ``M^{-2}`` per slice: ``M^{-1} xi``."""
        rng = np.random.default_rng(rng)
        xi = rng.standard_normal((n_time, self.n))
        return self._solve(xi)


def build_elliptic(grid: GridSpec, spec: PriorSpec) -> EllipticOperator:
    return EllipticOperator(grid, spec)


def prior_cov_apply(op: EllipticOperator, v):
    return op.cov_apply(v)


def prior_precision_apply(op: EllipticOperator, v):
    return op.precision_apply(v)


def prior_sample(op: EllipticOperator, rng_seed, n_time: int, dt: float = 1.0):
    from .toeplitz import SpaceTimeField

    return SpaceTimeField(op.sample(rng_seed, n_time), dt)
