"""Phases 2-3: data-space (Sherman-Morrison-Woodbury) posterior.

With ``G* = Gamma_prior F*`` and ``K = Gamma_noise + F G*`` (data-space sized),

    Gamma_post(m) = (I - G* K^{-1} F) Gamma_prior
    Gamma_post(q) = F_q (I - G* K^{-1} F) G_q*
    Q             = F_q (I - G* K^{-1} F) G* Gamma_noise^{-1}
    m_map^prior   = (I - G* K^{-1} F) m_prior

Only ``K`` is factorized; the parameter-space covariance is never formed.
Data vectors are flattened time-major, ``(N_t, N_d) -> N_t * N_d``.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, cholesky

from .prior import EllipticOperator
from .toeplitz import BlockToeplitzMap, load_btop, save_btop

log = logging.getLogger(__name__)

K_ASYMMETRY_TOL = 1e-10
QOI_ASYMMETRY_TOL = 1e-8
PSD_TOL = 1e-10
BATCH_BYTES = 256 * 2**20


class PosteriorError(RuntimeError):
    """Broken algebra: asymmetric K, non-PD factor, indefinite covariance."""


class ArtifactMismatch(RuntimeError):
    """Persisted artifacts were built from a different configuration."""


@dataclass
class NoiseModel:
    """Diagonal noise covariance, variances flattened time-major."""

    variances: np.ndarray
    noise_level: float = 0.0

    def __post_init__(self):
        self.variances = np.asarray(self.variances, dtype=np.float64).reshape(-1)
        if not np.all(self.variances > 0):
            raise PosteriorError("noise variances must be positive")

    @classmethod
    def from_sensor_sigmas(cls, sigmas, n_steps: int, noise_level: float = 0.0) -> NoiseModel:
        sig = np.asarray(sigmas, dtype=np.float64)
        return cls(np.tile(sig**2, n_steps), noise_level)


@dataclass
class PosteriorArtifacts:
    F: BlockToeplitzMap
    Fq: BlockToeplitzMap
    G: BlockToeplitzMap  # G* (anti-causal)
    Gq: BlockToeplitzMap  # G_q* (anti-causal)
    prior: EllipticOperator | None
    noise: NoiseModel
    K_chol: np.ndarray | None = None
    qoi_cov: np.ndarray | None = None
    d2q: np.ndarray | None = None
    m_prior: np.ndarray | None = None
    m_map_prior: np.ndarray | None = None
    q_map_prior: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def n_t(self) -> int:
        return self.F.n_lag

    @property
    def n_param(self) -> int:
        return self.F.n_col_block

    @property
    def n_data(self) -> int:
        return self.F.n_row_block

    @property
    def data_dim(self) -> int:
        return self.F.n_lag * self.F.n_row_block

    @property
    def qoi_dim(self) -> int:
        return self.Fq.n_lag * self.Fq.n_row_block

    def param_shape(self) -> tuple[int, int]:
        return (self.F.n_lag, self.F.n_col_block)

    def qoi_shape(self) -> tuple[int, int]:
        return (self.Fq.n_lag, self.Fq.n_row_block)


def _batch(n_vec: int, floats_per_vec: int) -> int:
    return max(1, min(n_vec, BATCH_BYTES // (8 * max(1, floats_per_vec))))


# -- K ---------------------------------------------------------------------------

def assemble_K(F: BlockToeplitzMap, G: BlockToeplitzMap, noise: NoiseModel) -> np.ndarray:
    """``K = Gamma_noise + F G*`` column by column through paired fast matvecs."""
    n_t, nd = F.n_lag, F.n_row_block
    n = n_t * nd
    if noise.variances.size != n:
        raise PosteriorError(f"noise has {noise.variances.size} variances, data space is {n}")
    K = np.zeros((n, n))
    b = _batch(n, n_t * F.n_col_block)
    for start in range(0, n, b):
        stop = min(n, start + b)
        E = np.zeros((n, stop - start))
        E[np.arange(start, stop), np.arange(stop - start)] = 1.0
        cols = F.matvec(G.matvec(E.reshape(n_t, nd, -1)))
        K[:, start:stop] = cols.reshape(n, -1)
    K[np.diag_indices(n)] += noise.variances
    scale = np.abs(K).max()
    asym = np.abs(K - K.T).max()
    if asym > K_ASYMMETRY_TOL * scale:
        raise PosteriorError(f"K asymmetry {asym / scale:.3e} exceeds {K_ASYMMETRY_TOL} (adjoint inconsistency)")
    return 0.5 * (K + K.T)


def factorize_K(K: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of ``K``."""
    try:
        return cholesky(K, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise PosteriorError("K is not positive definite") from exc


def _K_solve(art: PosteriorArtifacts, y: np.ndarray) -> np.ndarray:
    return cho_solve((art.K_chol, True), y, check_finite=False)


def _project(art: PosteriorArtifacts, x: np.ndarray) -> np.ndarray:
    """``(I - G* K^{-1} F) x`` for parameter fields ``(N_t, N_m[, batch])``."""
    y = art.F.matvec(x)
    shp = y.shape
    z = _K_solve(art, y.reshape(art.data_dim, -1)).reshape(shp)
    return x - art.G.matvec(z)


def _project_T(art: PosteriorArtifacts, x: np.ndarray) -> np.ndarray:
    """``(I - F* K^{-1} G) x``, the transpose of :func:`_project`."""
    y = art.G.rmatvec(x)
    shp = y.shape
    z = _K_solve(art, y.reshape(art.data_dim, -1)).reshape(shp)
    return x - art.F.rmatvec(z)


def _param(art, v):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        v = v.reshape(art.param_shape())
    if v.shape[:2] != art.param_shape():
        raise ValueError(f"parameter field shape {v.shape} does not match {art.param_shape()}")
    return v


def posterior_cov_matvec(art: PosteriorArtifacts, v) -> np.ndarray:
    """``Gamma_post(m) v = (I - G* K^{-1} F) Gamma_prior v``."""
    v = _param(art, v)
    return _project(art, art.prior.cov_apply(v))


def posterior_pointwise_variance(art: PosteriorArtifacts, indices) -> np.ndarray:
    """Diagonal entries of ``Gamma_post(m)`` at ``(space, time)`` indices."""
    idx = list(indices)
    n_t, nm = art.param_shape()
    out = np.zeros(len(idx))
    b = _batch(len(idx), n_t * nm * 4)
    for start in range(0, len(idx), b):
        chunk = idx[start:start + b]
        E = np.zeros((n_t, nm, len(chunk)))
        for c, (s, t) in enumerate(chunk):
            E[t, s, c] = 1.0
        cols = posterior_cov_matvec(art, E)
        for c, (s, t) in enumerate(chunk):
            out[start + c] = cols[t, s, c]
    return out


def compute_qoi_posterior_cov(art: PosteriorArtifacts) -> np.ndarray:
    """Dense ``Gamma_post(q) = F_q (I - G* K^{-1} F) G_q*``."""
    n_tq, nq = art.qoi_shape()
    n = n_tq * nq
    C = np.zeros((n, n))
    b = _batch(n, art.n_t * art.n_param * 3)
    for start in range(0, n, b):
        stop = min(n, start + b)
        E = np.zeros((n, stop - start))
        E[np.arange(start, stop), np.arange(stop - start)] = 1.0
        x = art.Gq.matvec(E.reshape(n_tq, nq, -1))
        x = _project(art, x.reshape(art.n_t, art.n_param, -1))
        C[:, start:stop] = art.Fq.matvec(x.reshape(n_tq, -1, stop - start)).reshape(n, -1)
    scale = max(np.abs(C).max(), np.finfo(float).tiny)
    asym = np.abs(C - C.T).max()
    if asym > QOI_ASYMMETRY_TOL * scale:
        raise PosteriorError(f"QoI covariance asymmetry {asym / scale:.3e} exceeds {QOI_ASYMMETRY_TOL}")
    C = 0.5 * (C + C.T)
    lam_min = np.linalg.eigvalsh(C)[0]
    if lam_min < -PSD_TOL * scale:
        raise PosteriorError(f"QoI covariance indefinite (min eigenvalue {lam_min:.3e})")
    return C


def data_term(art: PosteriorArtifacts, d: np.ndarray, form: str = "collapsed") -> np.ndarray:
    """``(I - G* K^{-1} F) G* Gamma_noise^{-1} d`` for data ``(N_t * N_d[, batch])``.

    ``collapsed`` uses ``F G* = K - Gamma_noise`` to evaluate the same operator
    as ``G* K^{-1} d``; ``chain`` applies the factors literally and loses
    roughly ``log10(|x| / |result|)`` digits to cancellation when the data
    dominate the prior.
    """
    d = np.asarray(d, dtype=np.float64)
    tail = d.shape[1:]
    if form == "collapsed":
        z = _K_solve(art, d.reshape(art.data_dim, -1))
        return art.G.matvec(z.reshape(art.n_t, art.n_data, *tail))
    if form == "chain":
        w = (d.reshape(art.data_dim, -1) / art.noise.variances[:, None]).reshape(art.n_t, art.n_data, *tail)
        return _project(art, art.G.matvec(w))
    raise ValueError(f"unknown form {form!r}")


def _data_term_T(art: PosteriorArtifacts, x: np.ndarray, form: str) -> np.ndarray:
    """Transpose of :func:`data_term`; returns ``(N_t * N_d, batch)``."""
    if form == "collapsed":
        return _K_solve(art, art.G.rmatvec(x).reshape(art.data_dim, -1))
    if form == "chain":
        return art.G.rmatvec(_project_T(art, x)).reshape(art.data_dim, -1) / art.noise.variances[:, None]
    raise ValueError(f"unknown form {form!r}")


def build_d2q(art: PosteriorArtifacts, method: str = "rows", form: str = "collapsed") -> np.ndarray:
    """Dense ``Q = F_q (I - G* K^{-1} F) G* Gamma_noise^{-1}``.

    ``rows`` applies the transposed operator to QoI unit vectors (``N_q N_t^q``
    applications); ``columns`` applies it to data unit vectors.  ``form`` is
    passed to :func:`data_term`.
    """
    n_tq, nq = art.qoi_shape()
    nqd, nd = n_tq * nq, art.data_dim
    Q = np.zeros((nqd, nd))
    if method == "rows":
        b = _batch(nqd, art.n_t * art.n_param * 3)
        for start in range(0, nqd, b):
            stop = min(nqd, start + b)
            E = np.zeros((nqd, stop - start))
            E[np.arange(start, stop), np.arange(stop - start)] = 1.0
            x = art.Fq.rmatvec(E.reshape(n_tq, nq, -1)).reshape(art.n_t, art.n_param, -1)
            Q[start:stop] = _data_term_T(art, x, form).T
    elif method == "columns":
        b = _batch(nd, art.n_t * art.n_param * 3)
        for start in range(0, nd, b):
            stop = min(nd, start + b)
            E = np.zeros((nd, stop - start))
            E[np.arange(start, stop), np.arange(stop - start)] = 1.0
            x = data_term(art, E, form)
            Q[:, start:stop] = art.Fq.matvec(x.reshape(n_tq, -1, stop - start)).reshape(nqd, -1)
    else:
        raise ValueError(f"unknown method {method!r}")
    return Q


def prior_mean_contributions(art: PosteriorArtifacts, m_prior) -> tuple[np.ndarray, np.ndarray]:
    """``m_map^prior = (I - G* K^{-1} F) m_prior`` and its push-forward ``F_q m_map^prior``."""
    if m_prior is None:
        m_prior = np.zeros(art.param_shape())
    m_prior = _param(art, m_prior)
    m_map_prior = _project(art, m_prior)
    q_map_prior = art.Fq.matvec(m_map_prior.reshape(art.Fq.n_lag, art.Fq.n_col_block))
    return m_map_prior, q_map_prior


def build_d2p(art: PosteriorArtifacts, max_entries: int = 10**7) -> np.ndarray:
    """Dense data-to-parameter map ``Gamma_post F* Gamma_noise^{-1}`` (small problems only)."""
    n_par = art.n_t * art.n_param
    if n_par * art.data_dim > max_entries:
        raise PosteriorError(f"data-to-parameter map needs {n_par * art.data_dim} entries, cap {max_entries}")
    return data_term(art, np.eye(art.data_dim)).reshape(n_par, -1)


def run_offline(F, Fq, prior: EllipticOperator, noise: NoiseModel, m_prior=None, G=None, Gq=None,
                metadata: dict | None = None) -> PosteriorArtifacts:
    """Phases 2-3 end to end."""
    from .assembly import build_G_star, build_Gq_star

    G = G if G is not None else build_G_star(F, prior)
    Gq = Gq if Gq is not None else build_Gq_star(Fq, prior)
    art = PosteriorArtifacts(F, Fq, G, Gq, prior, noise, metadata=dict(metadata or {}))
    for op in (F, Fq, G, Gq):
        op.precompute_fourier()
    art.K_chol = factorize_K(assemble_K(F, G, noise))
    art.qoi_cov = compute_qoi_posterior_cov(art)
    art.d2q = build_d2q(art)
    art.m_prior = np.zeros(art.param_shape()) if m_prior is None else _param(art, m_prior)
    art.m_map_prior, art.q_map_prior = prior_mean_contributions(art, art.m_prior)
    return art


def conditioning_diagnostics(art: PosteriorArtifacts) -> dict:
    d = np.diag(art.K_chol)
    return {"chol_diag_min": float(d.min()), "chol_diag_max": float(d.max()),
            "cond_estimate": float((d.max() / d.min()) ** 2)}


# -- persistence -------------------------------------------------------------------

D2QM_MAGIC = b"D2QM"
D2QM_VERSION = 1
_DHEAD = struct.Struct("<4sIQQ")


def save_dense(mat: np.ndarray, path) -> None:
    """Row-major little-endian float64 with ``magic, u32 version, u64 rows, u64 cols``."""
    mat = np.atleast_2d(np.asarray(mat, dtype=np.float64))
    with open(path, "wb") as fh:
        fh.write(_DHEAD.pack(D2QM_MAGIC, D2QM_VERSION, mat.shape[0], mat.shape[1]))
        fh.write(np.ascontiguousarray(mat, dtype="<f8").tobytes())


def load_dense(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _DHEAD.size:
        raise ValueError(f"{path}: truncated D2QM header")
    magic, version, rows, cols = _DHEAD.unpack_from(raw)
    if magic != D2QM_MAGIC or version != D2QM_VERSION:
        raise ValueError(f"{path}: not a D2QM v{D2QM_VERSION} container")
    if len(raw) - _DHEAD.size != 8 * rows * cols:
        raise ValueError(f"{path}: payload size mismatch")
    return np.frombuffer(raw, dtype="<f8", offset=_DHEAD.size).astype(np.float64).reshape(rows, cols)


MAP_FILES = {"F": "F.btop", "Fq": "Fq.btop", "G": "G_star.btop", "Gq": "Gq_star.btop"}
DENSE_FILES = {"K_chol": "K_chol.d2qm", "qoi_cov": "qoi_cov.d2qm", "d2q": "d2q.d2qm",
               "m_prior": "m_prior.d2qm", "m_map_prior": "m_map_prior.d2qm", "q_map_prior": "q_map_prior.d2qm",
               "noise_variances": "noise_variances.d2qm"}


def write_metadata(directory, meta: dict, name: str = "metadata.json") -> None:
    Path(directory, name).write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_metadata(directory, name: str = "metadata.json") -> dict:
    return json.loads(Path(directory, name).read_text())


def check_hash(meta: dict, expected: str | None, what: str) -> None:
    if expected is not None and meta.get("config_hash") != expected:
        raise ArtifactMismatch(
            f"{what} were built for config {meta.get('config_hash')!r}, current config is {expected!r}")


def save_maps(directory, maps: dict[str, BlockToeplitzMap], meta: dict) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for key, bmap in maps.items():
        save_btop(bmap, d / MAP_FILES[key])
    write_metadata(d, meta, "maps.json")


def load_maps(directory, expected_hash: str | None = None) -> dict[str, BlockToeplitzMap]:
    d = Path(directory)
    if not (d / "maps.json").exists():
        raise FileNotFoundError(f"{d}: no Phase 1 artifacts (run 'assemble' first)")
    check_hash(read_metadata(d, "maps.json"), expected_hash, "Phase 1 maps")
    return {k: load_btop(d / f) for k, f in MAP_FILES.items() if (d / f).exists()}


def save_posterior(directory, art: PosteriorArtifacts) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_dense(art.K_chol, d / DENSE_FILES["K_chol"])
    save_dense(art.qoi_cov, d / DENSE_FILES["qoi_cov"])
    save_dense(art.d2q, d / DENSE_FILES["d2q"])
    save_dense(art.m_prior, d / DENSE_FILES["m_prior"])
    save_dense(art.m_map_prior, d / DENSE_FILES["m_map_prior"])
    save_dense(art.q_map_prior, d / DENSE_FILES["q_map_prior"])
    save_dense(art.noise.variances[None, :], d / DENSE_FILES["noise_variances"])
    write_metadata(d, art.metadata, "posterior.json")


def load_posterior(directory, prior: EllipticOperator | None, expected_hash: str | None = None,
                   with_maps: bool = True) -> PosteriorArtifacts:
    """Load Phase 2-3 outputs; ``with_maps=False`` keeps only what QoI prediction needs.

    The Toeplitz maps are checked against the ``maps_hash`` recorded when the
    posterior was built, so stale Phase 1 files cannot be mixed in.
    """
    d = Path(directory)
    if not (d / "posterior.json").exists():
        raise FileNotFoundError(f"{d}: no Phase 2-3 artifacts (run 'factorize' first)")
    meta = read_metadata(d, "posterior.json")
    check_hash(meta, expected_hash, "posterior artifacts")
    maps = load_maps(d, meta.get("maps_hash")) if with_maps else {k: None for k in MAP_FILES}
    noise = NoiseModel(load_dense(d / DENSE_FILES["noise_variances"])[0], meta.get("noise_level", 0.0))
    art = PosteriorArtifacts(maps["F"], maps["Fq"], maps["G"], maps["Gq"], prior, noise, metadata=meta)
    art.K_chol = load_dense(d / DENSE_FILES["K_chol"])
    art.qoi_cov = load_dense(d / DENSE_FILES["qoi_cov"])
    art.d2q = load_dense(d / DENSE_FILES["d2q"])
    art.m_prior = load_dense(d / DENSE_FILES["m_prior"])
    art.m_map_prior = load_dense(d / DENSE_FILES["m_map_prior"])
    art.q_map_prior = load_dense(d / DENSE_FILES["q_map_prior"])
    return art


__all__ = [
    "NoiseModel", "PosteriorArtifacts", "PosteriorError", "ArtifactMismatch", "assemble_K", "factorize_K",
    "posterior_cov_matvec", "posterior_pointwise_variance", "compute_qoi_posterior_cov", "build_d2q",
    "prior_mean_contributions", "build_d2p", "run_offline", "data_term",
]
