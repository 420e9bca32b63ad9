import numpy as np
import pytest

from ltitwin.assembly import assemble_p2o, assemble_p2q
from ltitwin.bayes import NoiseModel, run_offline
from ltitwin.prior import EllipticOperator, PriorSpec
from ltitwin.wave import GridSpec, PhysicalConstants, WaveModel, default_observation


def tiny_model(nx=12, nz=4, n_steps=24, r=2, sensors=(0.25, 0.5, 0.75), qois=(0.5, 0.75), data_dt=1.0):
    grid = GridSpec(1, nx, 1, nz, 500.0, 500.0, 250.0)
    obs = default_observation(grid, data_dt, n_steps, r, sensors, qois)
    return WaveModel(grid, PhysicalConstants(), obs)


def tiny_noise(F, level=0.04, rng=0):
    """Per-sensor sigmas from the response to a prior-scale draw."""
    rng = np.random.default_rng(rng)
    d = F.matvec(rng.standard_normal((F.n_lag, F.n_col_block)))
    sig = level * np.abs(d).max(axis=0)
    return NoiseModel.from_sensor_sigmas(sig, F.n_lag, level)


@pytest.fixture(scope="session")
def tiny():
    model = tiny_model()
    F = assemble_p2o(model)
    Fq = assemble_p2q(model)
    prior = EllipticOperator(model.grid, PriorSpec(1.0, 2.0e5))
    noise = tiny_noise(F)
    return {"model": model, "F": F, "Fq": Fq, "prior": prior, "noise": noise}


@pytest.fixture(scope="session")
def tiny_art(tiny):
    rng = np.random.default_rng(7)
    m_prior = 0.2 * tiny["prior"].sample(rng, tiny["F"].n_lag)
    return run_offline(tiny["F"], tiny["Fq"], tiny["prior"], tiny["noise"], m_prior=m_prior)


@pytest.fixture(scope="session")
def tiny_dense(tiny):
    from ltitwin.assembly import forward_assembled_dense
    from ltitwin.oracles import DensePosterior

    model = tiny["model"]
    Fd = forward_assembled_dense(model, "p2o")
    Fqd = forward_assembled_dense(model, "p2q")
    return {"F": Fd, "Fq": Fqd,
            "post": DensePosterior.build(Fd, Fqd, tiny["noise"], tiny["prior"], model.obs.n_steps)}


# -- acceptance summary --------------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    def record(n: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE[n] = f"acceptance {n:>2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(ACCEPTANCE[n])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
