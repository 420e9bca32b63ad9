"""Block lower-triangular Toeplitz operators with FFT matvecs.

A causal block Toeplitz operator is stored as its first block column
``blocks[k]`` (the block at lag ``k``), so that block ``(i, j)`` of the dense
operator is ``blocks[i - j]`` for ``i >= j`` and zero otherwise.  Products are
computed by embedding the block sequence into a block circulant of length
``L >= 2 * n_lag - 1`` and multiplying bin-by-bin in Fourier space.

Vectors are laid out time-major: an input of shape ``(n_lag, n_col_block)``
(optionally with a trailing batch axis) holds ``x_j`` in row ``j``.

Maps that play the role of an adjoint (``G* = Gamma_prior F*``) are block
*upper* triangular.  They are represented by the same type with
``anticausal=True``: block ``(i, j)`` is ``blocks[j - i]`` for ``j >= i``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_DENSE_CAP = 10**8

BTOP_MAGIC = b"BTOP"
BTOP_VERSION = 1
BTOP_VERSION_FLAGGED = 2
_FLAG_ANTICAUSAL = 1


class ToeplitzError(ValueError):
    """Raised on malformed block data or mismatched operand shapes."""


class DenseCapExceeded(ToeplitzError):
    pass


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n) - 1).bit_length()


def default_embedding_length(n_lag: int) -> int:
    return next_pow2(2 * n_lag)


@dataclass
class SpaceTimeField:
    """Space-time vector ``values[time, space]`` sampled every ``dt`` seconds."""

    values: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ToeplitzError(f"values must be 2-D (time, space), got shape {self.values.shape}")
        if not self.dt > 0:
            raise ToeplitzError(f"dt must be positive, got {self.dt}")
        if not np.all(np.isfinite(self.values)):
            raise ToeplitzError("values contain NaN or Inf")

    @property
    def n_time(self) -> int:
        return self.values.shape[0]

    @property
    def n_space(self) -> int:
        return self.values.shape[1]

    @classmethod
    def zeros(cls, n_time: int, n_space: int, dt: float = 1.0) -> SpaceTimeField:
        return cls(np.zeros((n_time, n_space)), dt)

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)


@dataclass(eq=False)
class BlockToeplitzMap:
    """Causal (or, with ``anticausal=True``, anti-causal) block Toeplitz operator.

    ``blocks`` has shape ``(n_lag, n_row_block, n_col_block)``.  The Fourier
    cache is filled lazily by :meth:`precompute_fourier` and never serialized.
    """

    blocks: np.ndarray
    anticausal: bool = False
    fourier_cache: np.ndarray | None = field(default=None, repr=False)
    embedding_length: int | None = None

    @property
    def n_lag(self) -> int:
        return self.blocks.shape[0]

    @property
    def n_row_block(self) -> int:
        return self.blocks.shape[1]

    @property
    def n_col_block(self) -> int:
        return self.blocks.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_lag * self.n_row_block, self.n_lag * self.n_col_block)

    def precompute_fourier(self, L: int | None = None) -> BlockToeplitzMap:
        """Fill the cache with the real DFT of the zero-padded block sequence.

        Idempotent for a fixed ``L``; the cache holds the ``L // 2 + 1``
        non-redundant bins, which determine the full length-``L`` DFT.
        """
        if L is None:
            L = self.embedding_length or default_embedding_length(self.n_lag)
        if L < 2 * self.n_lag - 1:
            raise ToeplitzError(f"embedding length {L} < 2*n_lag-1 = {2 * self.n_lag - 1}")
        if self.fourier_cache is not None and self.embedding_length == L:
            return self
        self.fourier_cache = np.fft.rfft(self.blocks, n=L, axis=0)
        self.embedding_length = L
        return self

    def full_spectrum(self) -> np.ndarray:
        """Length-``L`` DFT of the padded blocks, rebuilt from the half spectrum."""
        self.precompute_fourier()
        L = self.embedding_length
        half = self.fourier_cache
        tail = np.conj(half[1:(L + 1) // 2][::-1])
        return np.concatenate([half, tail], axis=0)[:L]

    def _coerce(self, x, n_space: int):
        dt = None
        if isinstance(x, SpaceTimeField):
            dt = x.dt
            x = x.values
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            if x.size != self.n_lag * n_space:
                raise ToeplitzError(f"vector of length {x.size} does not match {self.n_lag}x{n_space}")
            x = x.reshape(self.n_lag, n_space)
        if x.shape[0] != self.n_lag or x.shape[1] != n_space:
            raise ToeplitzError(
                f"operand shape {x.shape[:2]} does not match (n_lag, n_space)=({self.n_lag}, {n_space})"
            )
        return x, dt

    def _apply(self, x, conj: bool, transpose: bool):
        self.precompute_fourier()
        L = self.embedding_length
        xh = np.fft.rfft(x, n=L, axis=0)
        fh = np.conj(self.fourier_cache) if conj else self.fourier_cache
        if transpose:
            fh = np.swapaxes(fh, 1, 2)
        if x.ndim == 2:
            yh = np.einsum("fij,fj->fi", fh, xh, optimize=True)
        else:
            yh = np.matmul(fh, xh)
        return np.fft.irfft(yh, n=L, axis=0)[: self.n_lag]

    def matvec(self, x):
        """Apply the operator.  Accepts ``(n_lag, n_col_block[, batch])`` arrays,
        flat vectors, or a :class:`SpaceTimeField`; returns the same kind."""
        arr, dt = self._coerce(x, self.n_col_block)
        flat = np.ndim(x) == 1
        # Causal: circular convolution. Anti-causal: circular correlation, i.e.
        # conjugated symbols (no transpose of the blocks).
        y = self._apply(arr, conj=self.anticausal, transpose=False)
        return _wrap(y, dt, flat)

    def rmatvec(self, y):
        """Apply the transpose via conjugated, transposed Fourier blocks."""
        arr, dt = self._coerce(y, self.n_row_block)
        flat = np.ndim(y) == 1
        x = self._apply(arr, conj=not self.anticausal, transpose=True)
        return _wrap(x, dt, flat)

    def transpose(self) -> BlockToeplitzMap:
        return BlockToeplitzMap(np.ascontiguousarray(np.swapaxes(self.blocks, 1, 2)), anticausal=not self.anticausal)

    def to_dense(self, cap: int = DEFAULT_DENSE_CAP) -> np.ndarray:
        return bt_to_dense(self, cap)


def _wrap(y, dt, flat):
    if dt is not None:
        return SpaceTimeField(y, dt)
    return y.reshape(-1) if flat else y


def bt_from_first_block_column(blocks, n_row_block: int | None = None, n_col_block: int | None = None,
                               anticausal: bool = False) -> BlockToeplitzMap:
    """Build a map from lag-ordered blocks ``blocks[k]`` of shape ``(rows, cols)``."""
    arr = np.asarray(blocks, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] == 0:
        raise ToeplitzError(f"blocks must be a nonempty (n_lag, rows, cols) array, got shape {arr.shape}")
    if n_row_block is not None and arr.shape[1] != n_row_block:
        raise ToeplitzError(f"blocks have {arr.shape[1]} rows, expected {n_row_block}")
    if n_col_block is not None and arr.shape[2] != n_col_block:
        raise ToeplitzError(f"blocks have {arr.shape[2]} columns, expected {n_col_block}")
    if not np.all(np.isfinite(arr)):
        raise ToeplitzError("blocks contain NaN or Inf")
    return BlockToeplitzMap(np.ascontiguousarray(arr), anticausal=anticausal)


def bt_precompute_fourier(bmap: BlockToeplitzMap, L: int | None = None) -> BlockToeplitzMap:
    return bmap.precompute_fourier(L)


def bt_matvec(bmap: BlockToeplitzMap, x):
    return bmap.matvec(x)


def bt_adjoint_matvec(bmap: BlockToeplitzMap, y):
    return bmap.rmatvec(y)


def bt_to_dense(bmap: BlockToeplitzMap, cap: int = DEFAULT_DENSE_CAP) -> np.ndarray:
    """Expand to a dense ``(n_lag*rows, n_lag*cols)`` matrix (oracle support)."""
    n, r, c = bmap.blocks.shape
    if n * r * n * c > cap:
        raise DenseCapExceeded(f"dense expansion needs {n * r * n * c} entries, cap is {cap}")
    dense = np.zeros((n * r, n * c))
    for i in range(n):
        for j in range(n):
            k = j - i if bmap.anticausal else i - j
            if k >= 0:
                dense[i * r:(i + 1) * r, j * c:(j + 1) * c] = bmap.blocks[k]
    return dense


def bt_singular_spectrum(bmap: BlockToeplitzMap, cap: int = DEFAULT_DENSE_CAP) -> np.ndarray:
    """Descending singular values of the dense expansion."""
    return np.linalg.svd(bt_to_dense(bmap, cap), compute_uv=False)


def spectrum_decay_ratio(sigma: np.ndarray, fraction: float = 0.9) -> float:
    """``sigma[ceil(fraction*n)-1]**2 / sigma[0]**2``: eigenvalue decay of F F*."""
    n = len(sigma)
    if n == 0 or sigma[0] == 0:
        return 0.0
    k = max(1, int(np.ceil(fraction * n)))
    return float(sigma[k - 1] ** 2 / sigma[0] ** 2)


# -- binary container ---------------------------------------------------------

_HEADER = struct.Struct("<4sI")
_DIMS = struct.Struct("<QQQ")
_FLAGS = struct.Struct("<I")


def save_btop(bmap: BlockToeplitzMap, path) -> None:
    """Write ``bmap`` in the BTOP container.

    Causal maps use version 1: ``magic, u32 version, u64 rows, u64 cols,
    u64 n_lag`` then float64 blocks in ``[lag][row][col]`` order.  Anti-causal
    maps use version 2, which appends a u32 flags word after the dimensions.
    """
    version = BTOP_VERSION_FLAGGED if bmap.anticausal else BTOP_VERSION
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(BTOP_MAGIC, version))
        fh.write(_DIMS.pack(bmap.n_row_block, bmap.n_col_block, bmap.n_lag))
        if version == BTOP_VERSION_FLAGGED:
            fh.write(_FLAGS.pack(_FLAG_ANTICAUSAL))
        fh.write(np.ascontiguousarray(bmap.blocks, dtype="<f8").tobytes())


def load_btop(path) -> BlockToeplitzMap:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + _DIMS.size:
        raise ToeplitzError(f"{path}: truncated BTOP header")
    magic, version = _HEADER.unpack_from(raw, 0)
    if magic != BTOP_MAGIC:
        raise ToeplitzError(f"{path}: bad magic {magic!r}")
    if version not in (BTOP_VERSION, BTOP_VERSION_FLAGGED):
        raise ToeplitzError(f"{path}: unsupported BTOP version {version}")
    rows, cols, n_lag = _DIMS.unpack_from(raw, _HEADER.size)
    offset = _HEADER.size + _DIMS.size
    anticausal = False
    if version == BTOP_VERSION_FLAGGED:
        (flags,) = _FLAGS.unpack_from(raw, offset)
        anticausal = bool(flags & _FLAG_ANTICAUSAL)
        offset += _FLAGS.size
    count = rows * cols * n_lag
    if len(raw) - offset != 8 * count:
        raise ToeplitzError(f"{path}: payload size {len(raw) - offset} != {8 * count}")
    blocks = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64)
    return BlockToeplitzMap(blocks.reshape(n_lag, rows, cols), anticausal=anticausal)
