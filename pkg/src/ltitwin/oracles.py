"""Brute-force dense references for small problems.

Everything here forms full matrices and factorizes the parameter-space
Hessian directly, so it only makes sense when ``N_m * N_t`` is a few thousand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .assembly import assemble_p2o, assemble_p2q, forward_assembled_dense
from .bayes import NoiseModel, posterior_cov_matvec, run_offline
from .pipeline import gradient_residual, infer_map, predict_qoi, predict_qoi_via_pushforward
from .prior import EllipticOperator
from .wave import WaveModel


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    nb = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / (nb if nb > 0 else 1.0))


def dense_prior_cov(prior: EllipticOperator, n_t: int) -> np.ndarray:
    return np.kron(np.eye(n_t), prior.dense_cov())


def dense_prior_precision(prior: EllipticOperator, n_t: int) -> np.ndarray:
    M = prior.matrix.toarray()
    return np.kron(np.eye(n_t), M @ M)


def dense_hessian(F: np.ndarray, noise: NoiseModel, prior: EllipticOperator, n_t: int) -> np.ndarray:
    """``F^T Gamma_noise^{-1} F + Gamma_prior^{-1}``."""
    return F.T @ (F / noise.variances[:, None]) + dense_prior_precision(prior, n_t)


@dataclass
class DensePosterior:
    """Direct Cholesky of the Hessian, refined with extended-precision residuals."""

    H: np.ndarray
    H_factor: tuple
    F: np.ndarray
    Fq: np.ndarray
    noise: NoiseModel
    prior_precision: np.ndarray
    refine_steps: int = 3

    @classmethod
    def build(cls, F, Fq, noise, prior, n_t):
        H = dense_hessian(F, noise, prior, n_t)
        return cls(H, cho_factor(H, lower=True), F, Fq, noise, dense_prior_precision(prior, n_t))

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=np.float64)
        x = cho_solve(self.H_factor, rhs)
        H_ld = self.H.astype(np.longdouble)
        for _ in range(self.refine_steps):
            r = rhs.astype(np.longdouble) - H_ld @ x.astype(np.longdouble)
            x = x + cho_solve(self.H_factor, r.astype(np.float64))
        return x

    def cov(self, v):
        return self.solve(v)

    def map_point(self, d, m_prior=None):
        rhs = self.F.T @ (np.asarray(d).reshape(-1) / self.noise.variances)
        if m_prior is not None:
            rhs = rhs + self.prior_precision @ np.asarray(m_prior).reshape(-1)
        return self.solve(rhs)

    def qoi_cov(self):
        return self.Fq @ self.solve(self.Fq.T)

    def d2q(self):
        return self.Fq @ self.solve(self.F.T / self.noise.variances[None, :])


@dataclass
class OracleCheck:
    name: str
    value: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value <= self.tol)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<38s} {self.value:.3e} (tol {self.tol:.0e})"


def run_oracle_suite(model: WaveModel, prior: EllipticOperator, noise: NoiseModel, rng,
                     m_prior=None) -> list[OracleCheck]:
    """Compare every fast path on ``model`` against its dense counterpart."""
    rng = np.random.default_rng(rng)
    n_t, nm = model.obs.n_steps, model.n_param
    checks = []

    before = model.counters.transposed_marches
    F = assemble_p2o(model)
    Fq = assemble_p2q(model)
    n_adj = model.counters.transposed_marches - before
    checks.append(OracleCheck("transposed march count", abs(n_adj - model.n_data - model.n_qoi), 0))

    Fd = forward_assembled_dense(model, "p2o")
    Fqd = forward_assembled_dense(model, "p2q")
    checks.append(OracleCheck("F adjoint-assembled vs forward", np.abs(F.to_dense() - Fd).max() / np.abs(Fd).max(), 1e-12))
    checks.append(OracleCheck("F_q adjoint-assembled vs forward",
                              np.abs(Fq.to_dense() - Fqd).max() / np.abs(Fqd).max(), 1e-12))

    x = rng.standard_normal((n_t, nm))
    y = rng.standard_normal((n_t, model.n_data))
    checks.append(OracleCheck("FFT matvec vs dense", rel_err(F.matvec(x).reshape(-1), Fd @ x.reshape(-1)), 1e-10))
    checks.append(OracleCheck("FFT adjoint vs dense", rel_err(F.rmatvec(y).reshape(-1), Fd.T @ y.reshape(-1)), 1e-10))
    lhs = np.dot(model.simulate_p2o(x).reshape(-1), y.reshape(-1))
    rhs = np.dot(x.reshape(-1), model.simulate_p2o_transpose(y).reshape(-1))
    checks.append(OracleCheck("march dot-product test", abs(lhs - rhs) / max(abs(lhs), 1e-300), 1e-12))

    if m_prior is None:
        m_prior = 0.1 * prior.sample(rng, n_t)
    art = run_offline(F, Fq, prior, noise, m_prior=m_prior)
    dense = DensePosterior.build(Fd, Fqd, noise, prior, n_t)

    v = rng.standard_normal((n_t, nm))
    checks.append(OracleCheck("posterior cov matvec (SMW)",
                              rel_err(posterior_cov_matvec(art, v).reshape(-1), dense.cov(v.reshape(-1))), 1e-8))
    d = Fd @ prior.sample(rng, n_t).reshape(-1) + np.sqrt(noise.variances) * rng.standard_normal(Fd.shape[0])
    m_map = infer_map(art, d)
    checks.append(OracleCheck("MAP point vs dense solve", rel_err(m_map.reshape(-1), dense.map_point(d, m_prior)), 1e-8))
    checks.append(OracleCheck("MAP gradient residual", gradient_residual(art, m_map, d), 1e-6))
    checks.append(OracleCheck("QoI posterior cov vs dense", rel_err(art.qoi_cov, dense.qoi_cov()), 1e-8))
    checks.append(OracleCheck("d2q map vs dense", rel_err(art.d2q, dense.d2q()), 1e-8))
    q1 = predict_qoi(art, d)
    checks.append(OracleCheck("d2q path vs push-forward", rel_err(q1, predict_qoi_via_pushforward(art, m_map)), 1e-8))
    checks.append(OracleCheck("QoI mean vs dense", rel_err(q1.reshape(-1), Fqd @ dense.map_point(d, m_prior)), 1e-8))
    return checks


__all__ = ["rel_err", "dense_prior_cov", "dense_prior_precision", "dense_hessian", "DensePosterior",
           "OracleCheck", "run_oracle_suite"]
