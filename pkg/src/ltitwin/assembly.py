"""Phase 1: block Toeplitz p2o / p2q maps from one transposed march per location.

Impulse convention: the march for sensor ``j`` is seeded with ``B^T e_j`` at
the final data step; reading its output backwards in time, lag ``k`` gives
row ``j`` of ``F_k = B A_eff^k C_eff``.
"""

from __future__ import annotations

import logging

import numpy as np

from .prior import EllipticOperator
from .toeplitz import BlockToeplitzMap, bt_from_first_block_column
from .wave import WaveModel

log = logging.getLogger(__name__)


class AssemblyError(RuntimeError):
    pass


def assemble_p2o(model: WaveModel) -> BlockToeplitzMap:
    n_t = model.obs.n_steps
    blocks = np.zeros((n_t, model.n_data, model.n_param))
    before = model.counters.transposed_marches
    for j in range(model.n_data):
        seed = model.observe_transpose(np.eye(1, model.n_data, j)[0])
        blocks[:, j, :] = model.impulse_response_rows(seed, n_t)
    marches = model.counters.transposed_marches - before
    if marches != model.n_data:
        raise AssemblyError(f"expected {model.n_data} transposed marches, ran {marches}")
    log.info("assembled F: %d lags, %dx%d blocks, %d marches", n_t, model.n_data, model.n_param, marches)
    return bt_from_first_block_column(blocks)


def assemble_p2q(model: WaveModel) -> BlockToeplitzMap:
    """``F_q`` at the QoI rate: each column block spans ``qoi_subsample`` parameter steps."""
    n_t, r = model.obs.n_steps, model.obs.qoi_subsample
    n_tq = n_t // r
    nq, nm = model.n_qoi, model.n_param
    blocks = np.zeros((n_tq, nq, r * nm))
    before = model.counters.transposed_marches
    for j in range(nq):
        seed = model.observe_qoi_transpose(np.eye(1, nq, j)[0])
        g = model.impulse_response_rows(seed, n_t)
        for k in range(n_tq):
            for s in range(r):
                # q_l depends on m_{Jr+s} through A_eff^{(l-J) r + r-1-s}
                blocks[k, j, s * nm:(s + 1) * nm] = g[k * r + r - 1 - s]
    marches = model.counters.transposed_marches - before
    if marches != nq:
        raise AssemblyError(f"expected {nq} transposed marches, ran {marches}")
    log.info("assembled F_q: %d lags, %dx%d blocks, %d marches", n_tq, nq, r * nm, marches)
    return bt_from_first_block_column(blocks)


def _prior_on_columns(prior: EllipticOperator, blocks: np.ndarray) -> np.ndarray:
    """Apply ``Gamma_prior`` to each parameter sub-slice of transposed blocks.

    ``blocks`` has shape ``(n_lag, rows, s * n_m)``; the result has shape
    ``(n_lag, s * n_m, rows)``.  All lags and rows are solved in one batch.
    """
    n_lag, rows, cols = blocks.shape
    nm = prior.n
    s = cols // nm
    bt = np.swapaxes(blocks, 1, 2).reshape(n_lag * s, nm, rows)
    out = prior.cov_apply(bt)
    return out.reshape(n_lag, s * nm, rows)


def build_G_star(F: BlockToeplitzMap, prior: EllipticOperator) -> BlockToeplitzMap:
    """``G* = Gamma_prior F*``: anti-causal, blocks ``Gamma_prior F_k^T``."""
    if F.anticausal:
        raise AssemblyError("expected a causal p2o map")
    return bt_from_first_block_column(_prior_on_columns(prior, F.blocks), anticausal=True)


def build_Gq_star(Fq: BlockToeplitzMap, prior: EllipticOperator) -> BlockToeplitzMap:
    return build_G_star(Fq, prior)


def forward_assembled_dense(model: WaveModel, which: str = "p2o") -> np.ndarray:
    """Dense F (or F_q) built one forward simulation per parameter impulse.

    Oracle only: costs ``N_m * N_t`` marches.
    """
    n_t, nm = model.obs.n_steps, model.n_param
    sim = model.simulate_p2o if which == "p2o" else model.simulate_p2q
    cols = []
    for j in range(n_t):
        for i in range(nm):
            m = np.zeros((n_t, nm))
            m[j, i] = 1.0
            cols.append(sim(m).reshape(-1))
    return np.stack(cols, axis=1)
