"""Linear acoustic-gravity wave model on a staggered grid.

The ocean occupies ``[0, Lx] x [0, Ly] x [0, H]`` (``Ly`` absent for a
vertical slice).  Pressure lives at cell centres, normal velocities on cell
faces and the surface height on the top face of each surface cell:

* bottom faces carry the prescribed normal velocity (the parameter, the
  vertical seafloor velocity, held constant over each data step);
* top faces are state; the surface pressure is ``rho * g * eta`` half a cell
  above the last pressure node and ``d eta / dt`` equals the top velocity;
* lateral faces are algebraic: ``u . n = p / Z`` using the adjacent cell.

The semi-discrete system ``w' = L w + Bsrc m`` is advanced with classical RK4.
For a linear autonomous right-hand side with frozen forcing RK4 reduces to

    A = I + hL + (hL)^2/2 + (hL)^3/6 + (hL)^4/24
    C = h (I + hL/2 + (hL)^2/6 + (hL)^3/24) Bsrc

which is evaluated in Horner form.  Since both are polynomials in ``L``, the
transposes are the same polynomials in ``L.T``, so every adjoint here is the
exact discrete transpose of the forward march.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .toeplitz import SpaceTimeField

# sqrt(8): RK4 reaches 2*sqrt(2) on the imaginary axis.  The extra margin
# accounts for the half-cell surface stencil (checked against eigenvalues).
_RK4_IMAG_LIMIT = 2.0 * math.sqrt(2.0)
_SURFACE_MARGIN = 1.3


class IntegrationError(RuntimeError):
    """Non-finite values appeared while time stepping."""


@dataclass(frozen=True)
class PhysicalConstants:
    rho: float = 1000.0
    bulk_modulus: float = 2.25e9
    gravity: float = 9.81

    def __post_init__(self):
        for name in ("rho", "bulk_modulus", "gravity"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def sound_speed(self) -> float:
        return math.sqrt(self.bulk_modulus / self.rho)

    @property
    def impedance(self) -> float:
        return self.rho * self.sound_speed


@dataclass(frozen=True)
class GridSpec:
    """Cells ``nx * ny * nz``; ``ny == 1`` for a vertical slice (seafloor_dim 1)."""

    seafloor_dim: int = 1
    nx: int = 65
    ny: int = 1
    nz: int = 9
    dx: float = 250.0
    dy: float = 250.0
    dz: float = 125.0
    max_state: int = 5_000_000

    def __post_init__(self):
        if self.seafloor_dim not in (1, 2):
            raise ValueError("seafloor_dim must be 1 or 2")
        if self.seafloor_dim == 1 and self.ny != 1:
            raise ValueError("ny must be 1 when seafloor_dim is 1")
        if self.nx < 3 or self.nz < 3 or (self.seafloor_dim == 2 and self.ny < 3):
            raise ValueError("nx, nz (and ny in 3-D) must be at least 3")
        if min(self.dx, self.dy, self.dz) <= 0:
            raise ValueError("grid spacings must be positive")
        if self.state_size > self.max_state:
            raise ValueError(f"state size {self.state_size} exceeds cap {self.max_state}")

    @property
    def n_seafloor(self) -> int:
        return self.nx * self.ny

    @property
    def extent(self) -> tuple[float, float, float]:
        return (self.nx * self.dx, self.ny * self.dy if self.seafloor_dim == 2 else 0.0, self.nz * self.dz)

    @property
    def spatial_dim(self) -> int:
        return self.seafloor_dim + 1

    @property
    def h_min(self) -> float:
        hs = [self.dx, self.dz] + ([self.dy] if self.seafloor_dim == 2 else [])
        return min(hs)

    @property
    def layout(self) -> dict[str, tuple[int, ...]]:
        nx, ny, nz = self.nx, self.ny, self.nz
        return {
            "p": (nz, ny, nx),
            "ux": (nz, ny, nx - 1),
            "uy": (nz, ny - 1, nx) if self.seafloor_dim == 2 else (nz, 0, nx),
            "uz": (nz, ny, nx),  # faces k = 1..nz, the last one at the surface
            "eta": (ny, nx),
        }

    @property
    def state_size(self) -> int:
        return sum(int(np.prod(s)) for s in self.layout.values())


@dataclass(frozen=True)
class ObservationSpec:
    """Sensor (pressure, bottom cells) and QoI (surface height) locations.

    Indices are flat into the ``(ny, nx)`` seafloor/surface grid.
    """

    sensor_indices: tuple[int, ...]
    qoi_indices: tuple[int, ...]
    data_dt: float = 0.5
    n_steps: int = 80
    qoi_subsample: int = 2

    def validate(self, grid: GridSpec) -> None:
        n = grid.n_seafloor
        for name, idx in (("sensor_indices", self.sensor_indices), ("qoi_indices", self.qoi_indices)):
            if len(idx) == 0:
                raise ValueError(f"{name} must be nonempty")
            if len(set(idx)) != len(idx):
                raise ValueError(f"{name} must be distinct")
            if min(idx) < 0 or max(idx) >= n:
                raise ValueError(f"{name} out of range [0, {n})")
        if not self.data_dt > 0:
            raise ValueError("data_dt must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.qoi_subsample < 1 or self.n_steps % self.qoi_subsample:
            raise ValueError("qoi_subsample must be >= 1 and divide n_steps")

    @property
    def n_qoi_steps(self) -> int:
        return self.n_steps // self.qoi_subsample


@dataclass
class DiscreteState:
    """Unpacked state vector; field order follows ``GridSpec.layout``."""

    pressure: np.ndarray
    velocity: tuple[np.ndarray, np.ndarray, np.ndarray]
    surface_height: np.ndarray


# The adjoint variables have the same layout as the state.
AdjointState = DiscreteState


@dataclass
class SolverCounters:
    steps: int = 0
    transposed_steps: int = 0
    forward_marches: int = 0
    transposed_marches: int = 0

    def total_steps(self) -> int:
        return self.steps + self.transposed_steps


def cfl_max_dt(grid: GridSpec, constants: PhysicalConstants) -> float:
    """Largest stable RK4 step estimate for the staggered scheme."""
    c = constants.sound_speed
    return _RK4_IMAG_LIMIT * grid.h_min / (2.0 * c * math.sqrt(grid.spatial_dim) * _SURFACE_MARGIN)


def _diff(n: int, h: float) -> sp.csr_matrix:
    """(n-1) x n forward difference ``(v[i] - v[i-1]) / h`` on interior faces."""
    return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n), format="csr") / h


def _boundary_mask(n: int) -> np.ndarray:
    v = np.zeros(n)
    v[0] = v[-1] = 1.0
    return v


def build_generator(grid: GridSpec, constants: PhysicalConstants) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Sparse generator ``L`` and seafloor source operator ``Bsrc``."""
    nx, ny, nz = grid.nx, grid.ny, grid.nz
    rho, K, g, Z = constants.rho, constants.bulk_modulus, constants.gravity, constants.impedance
    lay = grid.layout
    sizes = {k: int(np.prod(v)) for k, v in lay.items()}
    names = ["p", "ux", "uy", "uz", "eta"]
    offs = np.cumsum([0] + [sizes[n] for n in names])
    off = dict(zip(names, offs[:-1]))
    N = int(offs[-1])

    Ix, Iy, Iz = sp.identity(nx), sp.identity(ny), sp.identity(nz)
    kron3 = lambda a, b, c: sp.kron(sp.kron(a, b), c, format="csr")  # noqa: E731  (z, y, x) ordering

    # gradient of p onto interior faces
    Gx = kron3(Iz, Iy, _diff(nx, grid.dx))
    if grid.seafloor_dim == 2:
        Gy = kron3(Iz, _diff(ny, grid.dy), Ix)
    else:
        Gy = sp.csr_matrix((0, sizes["p"]))
    # z faces 1..nz-1 are interior; face nz (surface) differences against
    # the surface pressure rho*g*eta at distance dz/2.
    Dz = sp.lil_matrix((nz, nz))
    for k in range(1, nz):
        Dz[k - 1, k] = 1.0 / grid.dz
        Dz[k - 1, k - 1] = -1.0 / grid.dz
    Dz[nz - 1, nz - 1] = -2.0 / grid.dz
    Gz = kron3(Dz.tocsr(), Iy, Ix)
    # divergence (negated) of faces back onto cells; top face enters with 1/dz
    Mz = sp.lil_matrix((nz, nz))
    for k in range(nz):
        Mz[k, k] = -1.0 / grid.dz  # outflow through face k+1
        if k >= 1:
            Mz[k, k - 1] = 1.0 / grid.dz  # inflow through face k
    negdiv_z = kron3(Mz.tocsr(), Iy, Ix)
    negdiv_x = Gx.T.tocsr()
    negdiv_y = Gy.T.tocsr()

    # lateral impedance: outflow p/Z through each absorbing face
    absorb = kron3(Iz, Iy, sp.diags(_boundary_mask(nx))) / (Z * grid.dx)
    if grid.seafloor_dim == 2:
        absorb = absorb + kron3(Iz, sp.diags(_boundary_mask(ny)), Ix) / (Z * grid.dy)

    surf_rows = np.arange(sizes["uz"]).reshape(nz, ny * nx)[nz - 1]
    eta_to_uz = sp.csr_matrix(
        (np.full(ny * nx, -2.0 * g / grid.dz), (surf_rows, np.arange(ny * nx))), shape=(sizes["uz"], sizes["eta"])
    )
    uz_to_eta = sp.csr_matrix((np.ones(ny * nx), (np.arange(ny * nx), surf_rows)), shape=(sizes["eta"], sizes["uz"]))

    blocks = [[None] * 5 for _ in range(5)]
    ip, iux, iuy, iuz, ieta = range(5)
    blocks[ip][ip] = -K * absorb
    blocks[ip][iux] = K * negdiv_x
    blocks[ip][iuy] = K * negdiv_y
    blocks[ip][iuz] = K * negdiv_z
    blocks[iux][ip] = -Gx / rho
    blocks[iuy][ip] = -Gy / rho
    blocks[iuz][ip] = -Gz / rho
    blocks[iuz][ieta] = eta_to_uz
    blocks[ieta][iuz] = uz_to_eta
    for i, n in enumerate(names):
        if blocks[i][i] is None:
            blocks[i][i] = sp.csr_matrix((sizes[n], sizes[n]))
    L = sp.bmat(blocks, format="csr")
    assert L.shape == (N, N)

    # seafloor velocity m enters the bottom cell pressure as +K m / dz
    nsf = grid.n_seafloor
    Bsrc = sp.csr_matrix((np.full(nsf, K / grid.dz), (off["p"] + np.arange(nsf), np.arange(nsf))), shape=(N, nsf))
    return L, Bsrc


@dataclass
class WaveModel:
    """Discrete LTI system ``w_{k+1} = A w_k + C m_k`` plus observation maps."""

    grid: GridSpec
    constants: PhysicalConstants
    obs: ObservationSpec
    safety: float = 0.5
    counters: SolverCounters = field(default_factory=SolverCounters)

    def __post_init__(self):
        if not 0 < self.safety <= 1:
            raise ValueError("safety must be in (0, 1]")
        self.obs.validate(self.grid)
        self.L, self.Bsrc = build_generator(self.grid, self.constants)
        self.LT = self.L.T.tocsr()
        self.BsrcT = self.Bsrc.T.tocsr()
        limit = self.safety * cfl_max_dt(self.grid, self.constants)
        self.substeps = max(1, math.ceil(self.obs.data_dt / limit * (1 - 1e-12)))
        self.dt = self.obs.data_dt / self.substeps
        lay = self.grid.layout
        sizes = [int(np.prod(lay[k])) for k in ("p", "ux", "uy", "uz", "eta")]
        self._offsets = np.cumsum([0] + sizes)
        self._sensor_rows = np.asarray(self.obs.sensor_indices, dtype=np.intp)  # bottom cells, k=0
        self._qoi_rows = self._offsets[4] + np.asarray(self.obs.qoi_indices, dtype=np.intp)

    # -- sizes ----------------------------------------------------------------
    @property
    def n_state(self) -> int:
        return self.L.shape[0]

    @property
    def n_param(self) -> int:
        return self.grid.n_seafloor

    @property
    def n_data(self) -> int:
        return len(self.obs.sensor_indices)

    @property
    def n_qoi(self) -> int:
        return len(self.obs.qoi_indices)

    # -- state packing ----------------------------------------------------------
    def unpack(self, w: np.ndarray) -> DiscreteState:
        lay, o = self.grid.layout, self._offsets
        part = lambda i, k: w[o[i]:o[i + 1]].reshape(lay[k])  # noqa: E731
        return DiscreteState(part(0, "p"), (part(1, "ux"), part(2, "uy"), part(3, "uz")), part(4, "eta"))

    def pack(self, state: DiscreteState) -> np.ndarray:
        parts = [state.pressure, *state.velocity, state.surface_height]
        return np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1) for a in parts])

    def energy(self, w: np.ndarray) -> float:
        """Discrete acoustic-gravity energy (cell-volume weighted)."""
        s = self.unpack(w)
        g, c = self.grid, self.constants
        vol = g.dx * g.dz * (g.dy if g.seafloor_dim == 2 else 1.0)
        area = vol / g.dz
        e = 0.5 * np.sum(s.pressure**2) / c.bulk_modulus * vol
        e += 0.5 * c.rho * (np.sum(s.velocity[0] ** 2) + np.sum(s.velocity[1] ** 2)) * vol
        uz = s.velocity[2]
        e += 0.5 * c.rho * (np.sum(uz[:-1] ** 2) * vol + np.sum(uz[-1] ** 2) * vol / 2)
        e += 0.5 * c.rho * c.gravity * np.sum(s.surface_height**2) * area
        return float(e)

    # -- single steps -----------------------------------------------------------
    def _horner(self, L, v):
        h = self.dt
        t = v + (h / 4) * (L @ v)
        t = v + (h / 3) * (L @ t)
        t = v + (h / 2) * (L @ t)
        return v + h * (L @ t)

    def _horner_src(self, L, f):
        h = self.dt
        t = f + (h / 4) * (L @ f)
        t = f + (h / 3) * (L @ t)
        t = f + (h / 2) * (L @ t)
        return h * t

    def apply_A(self, w):
        return self._horner(self.L, w)

    def apply_AT(self, lam):
        return self._horner(self.LT, lam)

    def apply_C(self, m):
        return self._horner_src(self.L, self.Bsrc @ m)

    def apply_CT(self, lam):
        return self.BsrcT @ self._horner_src(self.LT, lam)

    def step(self, w, m_k):
        """One RK4 step ``A w + C m_k`` (accepts a flat vector or DiscreteState)."""
        as_state = isinstance(w, DiscreteState)
        v = self.pack(w) if as_state else np.asarray(w, dtype=np.float64)
        m_k = np.asarray(m_k, dtype=np.float64)
        self.counters.steps += 1
        out = self.apply_A(v) + self.apply_C(m_k)
        if not np.all(np.isfinite(out)):
            raise IntegrationError(f"non-finite state after step {self.counters.steps}")
        return self.unpack(out) if as_state else out

    def step_transpose(self, adj):
        """``A^T`` applied to an adjoint state."""
        as_state = isinstance(adj, DiscreteState)
        v = self.pack(adj) if as_state else np.asarray(adj, dtype=np.float64)
        self.counters.transposed_steps += 1
        out = self.apply_AT(v)
        if not np.all(np.isfinite(out)):
            raise IntegrationError(f"non-finite adjoint state after step {self.counters.transposed_steps}")
        return self.unpack(out) if as_state else out

    def collect_source_transpose(self, adj):
        """``C^T`` applied to an adjoint state: a seafloor-sized vector."""
        v = self.pack(adj) if isinstance(adj, DiscreteState) else np.asarray(adj, dtype=np.float64)
        return self.apply_CT(v)

    # -- observations ---------------------------------------------------------------
    def observe(self, w):
        v = self.pack(w) if isinstance(w, DiscreteState) else w
        return v[self._sensor_rows]

    def observe_qoi(self, w):
        v = self.pack(w) if isinstance(w, DiscreteState) else w
        return v[self._qoi_rows]

    def observe_transpose(self, y):
        out = np.zeros(self.n_state)
        out[self._sensor_rows] = y
        return out

    def observe_qoi_transpose(self, y):
        out = np.zeros(self.n_state)
        out[self._qoi_rows] = y
        return out

    # -- coarse (data-step) composites ------------------------------------------
    def _coarse_step(self, w, m_k):
        for _ in range(self.substeps):
            w = self.step(w, m_k)
        return w

    def _coarse_step_transpose(self, lam):
        """Return ``(A_eff^T lam, C_eff^T lam)`` with ``C_eff = sum_s A^s C``."""
        acc = np.zeros(self.n_param)
        for _ in range(self.substeps):
            acc += self.apply_CT(lam)
            lam = self.step_transpose(lam)
        return lam, acc

    def _march(self, m: np.ndarray, record):
        m = _values(m)
        n_t = m.shape[0]
        if m.shape[1] != self.n_param:
            raise ValueError(f"parameter field has {m.shape[1]} nodes, model has {self.n_param}")
        self.counters.forward_marches += 1
        w = np.zeros(self.n_state)
        for k in range(n_t):
            w = self._coarse_step(w, m[k])
            record(k, w)

    def simulate_p2o(self, m):
        """Pressure at the sensors after each data step, shape ``(N_t, N_d)``."""
        vals = _values(m)
        d = np.zeros((vals.shape[0], self.n_data))

        def rec(k, w):
            d[k] = self.observe(w)

        self._march(vals, rec)
        return _like(m, d)

    def simulate_p2q(self, m):
        """Surface heights every ``qoi_subsample`` data steps, shape ``(N_t^q, N_q)``."""
        vals = _values(m)
        r = self.obs.qoi_subsample
        if vals.shape[0] % r:
            raise ValueError("number of time steps must be a multiple of qoi_subsample")
        q = np.zeros((vals.shape[0] // r, self.n_qoi))

        def rec(k, w):
            if (k + 1) % r == 0:
                q[(k + 1) // r - 1] = self.observe_qoi(w)

        self._march(vals, rec)
        return _like(m, q, dt_scale=r)

    def simulate_both(self, m):
        vals = _values(m)
        r = self.obs.qoi_subsample
        d = np.zeros((vals.shape[0], self.n_data))
        q = np.zeros((vals.shape[0] // r, self.n_qoi))

        def rec(k, w):
            d[k] = self.observe(w)
            if (k + 1) % r == 0:
                q[(k + 1) // r - 1] = self.observe_qoi(w)

        self._march(vals, rec)
        return _like(m, d), _like(m, q, dt_scale=r)

    def _transpose_march(self, n_t: int, inject):
        self.counters.transposed_marches += 1
        lam = np.zeros(self.n_state)
        out = np.zeros((n_t, self.n_param))
        for k in range(n_t - 1, -1, -1):
            lam = lam + inject(k)
            lam, out[k] = self._coarse_step_transpose(lam)
        return out

    def simulate_p2o_transpose(self, d_tilde):
        vals = _values(d_tilde)
        zero = np.zeros(self.n_state)
        out = self._transpose_march(vals.shape[0], lambda k: self.observe_transpose(vals[k]) if vals[k].any() else zero)
        return _like(d_tilde, out)

    def simulate_p2q_transpose(self, q_tilde):
        vals = _values(q_tilde)
        r = self.obs.qoi_subsample
        n_t = vals.shape[0] * r
        zero = np.zeros(self.n_state)

        def inject(k):
            if (k + 1) % r == 0 and vals[(k + 1) // r - 1].any():
                return self.observe_qoi_transpose(vals[(k + 1) // r - 1])
            return zero

        out = self._transpose_march(n_t, inject)
        return _like(q_tilde, out, dt_scale=1.0 / r)

    def impulse_response_rows(self, seed: np.ndarray, n_t: int) -> np.ndarray:
        """Transposed march from ``seed`` (a state-space vector) at the final step.

        Returns ``g[k] = C_eff^T (A_eff^T)^k seed`` for ``k = 0..n_t-1``.
        """
        self.counters.transposed_marches += 1
        lam = np.asarray(seed, dtype=np.float64)
        g = np.zeros((n_t, self.n_param))
        for k in range(n_t):
            lam, g[k] = self._coarse_step_transpose(lam)
        return g


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, SpaceTimeField) else np.asarray(x, dtype=np.float64)


def _like(template, values, dt_scale: float = 1.0):
    if isinstance(template, SpaceTimeField):
        return SpaceTimeField(values, template.dt * dt_scale)
    return values


def default_observation(grid: GridSpec, data_dt: float = 0.5, n_steps: int = 80, qoi_subsample: int = 2,
                        sensor_fracs=(0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875),
                        qoi_fracs=(0.5, 0.625, 0.75, 0.875)) -> ObservationSpec:
    """Sensors/QoIs at fixed fractions of the horizontal extent (tensor grid in 3-D)."""

    def idx(fracs, n):
        if any(not 0.0 <= f <= 1.0 for f in fracs):
            raise ValueError(f"location fractions must lie in [0, 1], got {list(fracs)}")
        return [min(n - 1, int(round(f * n - 0.5))) for f in fracs]

    def flat(fracs):
        xs = idx(fracs, grid.nx)
        if grid.seafloor_dim == 1:
            return tuple(xs)
        ys = idx(fracs, grid.ny)
        return tuple(j * grid.nx + i for j in ys for i in xs)

    return ObservationSpec(flat(sensor_fracs), flat(qoi_fracs), data_dt, n_steps, qoi_subsample)
