import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from ltitwin import config as C
from ltitwin.assembly import assemble_p2o, assemble_p2q
from ltitwin.bayes import load_dense
from ltitwin.cli import main
from ltitwin.oracles import DensePosterior, rel_err

ROOT = Path(__file__).resolve().parents[1]
TINY = str(ROOT / "configs" / "tiny.json")
DESK = str(ROOT / "configs" / "desk.json")


def run(tmp, cmd, *extra):
    return main([cmd, "--config", TINY, "--set", f"paths.artifact_dir={tmp / 'art'}",
                 "--set", f"paths.output_dir={tmp / 'out'}", *extra])


def digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestConfig:
    def test_defaults_validate(self):
        cfg = C.load_config()
        assert cfg["model"]["grid"]["nx"] == 65 and cfg["seed"] == 0

    def test_shipped_configs_load(self):
        for path in (TINY, DESK):
            C.load_config(path)

    def test_tiny_is_oracle_sized(self):
        m = C.build_model(C.load_config(TINY))
        assert m.n_param * m.obs.n_steps <= 2000

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"noise_levle": 0.1}))
        with pytest.raises(C.ConfigError, match="noise_levle"):
            C.load_config(p)
        with pytest.raises(C.ConfigError):
            C.load_config(None, ["model.grid.nq=3"])

    def test_override_parsing(self):
        cfg = C.load_config(TINY, ["noise_level=0.1", "model.observation.sensor_fracs=[0.5]", "prior.alpha2=1e5"])
        assert cfg["noise_level"] == 0.1 and cfg["model"]["observation"]["sensor_fracs"] == [0.5]
        assert C.build_prior_spec(cfg, C.build_grid(cfg)).alpha2 == 1e5

    @pytest.mark.parametrize("ov", ["noise_level=-1", "seed=-3", "model.grid.nx=0", "threads=0",
                                    "model.observation.sensor_fracs=[1.5]", "prior.alpha1=-1",
                                    "source.preset=\"nope\"", "noise_level=0"])
    def test_invalid_values(self, ov):
        with pytest.raises(C.ConfigError):
            C.load_config(TINY, [ov])

    def test_zero_noise_with_likelihood_level(self):
        cfg = C.load_config(TINY, ["noise_level=0", "likelihood_noise_level=0.04"])
        assert C.likelihood_level(cfg) == 0.04

    def test_seed_streams_independent(self):
        cfg = C.load_config(TINY)
        a = np.random.default_rng(C.seed_sequence(cfg, "noise")).random()
        b = np.random.default_rng(C.seed_sequence(cfg, "bench")).random()
        assert a != b
        assert a == np.random.default_rng(C.seed_sequence(cfg, "noise")).random()

    def test_hashes(self):
        a = C.load_config(TINY)
        b = C.load_config(TINY, ["noise_level=0.06"])
        c = C.load_config(TINY, ["prior.alpha1=2.0"])
        assert C.maps_hash(a) == C.maps_hash(b) != C.maps_hash(c)
        assert C.posterior_hash(a) != C.posterior_hash(b)
        # the seed does not change any artifact
        assert C.posterior_hash(a) == C.posterior_hash(C.load_config(TINY, seed=9))


class TestCliErrors:
    def test_unknown_key_exit_2(self, tmp_path):
        assert run(tmp_path, "assemble", "--set", "bogus=1") == 2

    def test_missing_artifacts_exit_3(self, tmp_path):
        assert run(tmp_path, "factorize") == 3
        assert run(tmp_path, "infer") == 3

    def test_hash_mismatch_exit_3(self, tmp_path):
        assert run(tmp_path, "assemble") == 0
        assert run(tmp_path, "factorize", "--set", "prior.alpha1=2.0") == 3
        assert run(tmp_path, "factorize") == 0
        assert run(tmp_path, "synth") == 0
        assert run(tmp_path, "infer", "--set", "noise_level=0.06") == 3

    def test_oracle_check_rejects_large(self, tmp_path):
        assert main(["oracle-check", "--config", DESK]) == 2

    def test_bad_data_columns(self, tmp_path):
        assert run(tmp_path, "assemble") == 0 and run(tmp_path, "factorize") == 0
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b\n1,2\n")
        assert run(tmp_path, "infer", "--data", str(bad)) == 2


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    for cmd in ("assemble", "factorize", "synth", "infer", "spectrum"):
        assert run(tmp, cmd) == 0, cmd
    assert run(tmp, "bench", "--repeat", "2") == 0
    return tmp


class TestCliPipeline:
    def test_outputs(self, pipeline_dir):
        out = pipeline_dir / "out"
        for name in ("d_obs.csv", "d_true.csv", "q_true.csv", "m_true.d2qm", "m_map.d2qm", "q_map.csv",
                     "q_intervals.csv", "timings.json", "metrics.json", "bench.json", "spectrum.csv",
                     "spectrum.json"):
            assert (out / name).exists(), name
        for name in ("F.btop", "Fq.btop", "G_star.btop", "Gq_star.btop", "maps.json", "posterior.json"):
            assert (pipeline_dir / "art" / name).exists(), name
        header = (out / "d_obs.csv").read_text().splitlines()[0]
        assert header.startswith("sensor_")

    def test_timings_and_metrics(self, pipeline_dir):
        t = json.loads((pipeline_dir / "out" / "timings.json").read_text())
        assert {"load_artifacts", "infer_map", "predict_qoi", "credible_intervals",
                "hessian_matvec_matrix_free", "hessian_matvec_fft"} <= set(t)
        m = json.loads((pipeline_dir / "out" / "metrics.json").read_text())
        assert {"param_err", "qoi_err", "reconstruction_err"} <= set(m)
        assert 0 < m["param_err"] < 2 and 0 < m["qoi_err"] < 1

    def test_intervals_bracket_map(self, pipeline_dir):
        out = pipeline_dir / "out"
        q = np.loadtxt(out / "q_map.csv", delimiter=",", skiprows=1, ndmin=2)
        iv = np.loadtxt(out / "q_intervals.csv", delimiter=",", skiprows=1, ndmin=2)
        nq = q.shape[1]
        assert np.all(iv[:, :nq] <= q) and np.all(q <= iv[:, nq:])

    def test_rerun_is_bitwise(self, pipeline_dir):
        out = pipeline_dir / "out"
        before = {n: digest(out / n) for n in ("d_obs.csv", "m_map.d2qm", "q_map.csv", "q_intervals.csv")}
        assert run(pipeline_dir, "synth") == 0 and run(pipeline_dir, "infer") == 0
        assert {n: digest(out / n) for n in before} == before

    def test_predict_matches_infer(self, pipeline_dir, tmp_path):
        q_infer = np.loadtxt(pipeline_dir / "out" / "q_map.csv", delimiter=",", skiprows=1, ndmin=2)
        for n in ("F.btop", "Fq.btop", "G_star.btop", "Gq_star.btop"):
            (pipeline_dir / "art" / n).rename(tmp_path / n)
        try:
            assert main(["predict", "--config", TINY, "--set", f"paths.artifact_dir={pipeline_dir / 'art'}",
                         "--out", str(tmp_path), "--data", str(pipeline_dir / "out" / "d_obs.csv")]) == 0
        finally:
            for n in ("F.btop", "Fq.btop", "G_star.btop", "Gq_star.btop"):
                (tmp_path / n).rename(pipeline_dir / "art" / n)
        q = np.loadtxt(tmp_path / "q_map.csv", delimiter=",", skiprows=1, ndmin=2)
        np.testing.assert_array_equal(q, q_infer)

    def test_bench_and_spectrum(self, pipeline_dir):
        b = json.loads((pipeline_dir / "out" / "bench.json").read_text())
        assert b["speedup"]["online_vs_hessian_matvec"] > 1
        s = np.loadtxt(pipeline_dir / "out" / "spectrum.csv", delimiter=",", skiprows=1)
        assert np.all(np.diff(s[:, 1]) <= 0)

    def test_oracle_check(self, tmp_path, capsys):
        assert main(["oracle-check", "--config", TINY]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 13 and all(l.startswith("PASS") for l in lines)


def test_noise_free_infer_matches_dense(tmp_path):
    extra = ["--set", "noise_level=0", "--set", "likelihood_noise_level=0.04"]
    for cmd in ("assemble", "factorize", "synth", "infer"):
        assert run(tmp_path, cmd, *extra) == 0, cmd
    out = tmp_path / "out"
    d_obs = np.loadtxt(out / "d_obs.csv", delimiter=",", skiprows=1, ndmin=2)
    d_true = np.loadtxt(out / "d_true.csv", delimiter=",", skiprows=1, ndmin=2)
    np.testing.assert_array_equal(d_obs, d_true)

    cfg = C.load_config(TINY, ["noise_level=0", "likelihood_noise_level=0.04"])
    model = C.build_model(cfg)
    prior = C.build_prior(cfg, model.grid)
    F, Fq = assemble_p2o(model).to_dense(), assemble_p2q(model).to_dense()
    dense = DensePosterior.build(F, Fq, C.build_noise(cfg, model), prior, model.obs.n_steps)
    ref = dense.map_point(d_true, C.prior_mean_field(cfg, model))
    assert rel_err(load_dense(out / "m_map.d2qm").reshape(-1), ref) <= 1e-6
