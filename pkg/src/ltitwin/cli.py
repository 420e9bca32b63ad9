"""``ltitwin`` command line: offline phases, synthetic data, online inference, diagnostics.

Exit codes: 0 ok, 2 configuration error, 3 missing/mismatched files, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import config as C
from .assembly import AssemblyError, assemble_p2o, assemble_p2q, build_G_star, build_Gq_star
from .bayes import (ArtifactMismatch, PosteriorError, conditioning_diagnostics, load_dense, load_maps,
                    load_posterior, posterior_cov_matvec, run_offline, save_dense, save_maps, save_posterior)
from .oracles import run_oracle_suite
from .pipeline import credible_intervals, predict_qoi, relative_errors, run_online, synth_data
from .prior import PriorError
from .toeplitz import ToeplitzError, bt_singular_spectrum, spectrum_decay_ratio
from .wave import IntegrationError

log = logging.getLogger("ltitwin")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


# -- small IO helpers ---------------------------------------------------------------

def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, values: np.ndarray, header: list[str]) -> None:
    np.savetxt(path, np.atleast_2d(values), delimiter=",", header=",".join(header), comments="", fmt="%.17g")


def read_csv(path: Path, expected_header: list[str] | None = None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such data file (run 'synth' or pass --data)")
    with path.open() as fh:
        header = fh.readline().strip().split(",")
    if expected_header is not None and header != expected_header:
        raise CliError(f"{path}: columns {header} do not match configured sensors {expected_header}", EXIT_CONFIG)
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def sensor_header(model) -> list[str]:
    return [f"sensor_{i}" for i in model.obs.sensor_indices]


def qoi_header(model) -> list[str]:
    return [f"qoi_{i}" for i in model.obs.qoi_indices]


def _dirs(cfg, args):
    art_dir = Path(cfg["paths"]["artifact_dir"])
    out_dir = Path(args.out) if args.out else Path(cfg["paths"]["output_dir"])
    return art_dir, out_dir


def _median_time(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


# -- commands ---------------------------------------------------------------------

def cmd_assemble(cfg, args) -> dict:
    art_dir, _ = _dirs(cfg, args)
    model = C.build_model(cfg)
    prior = C.build_prior(cfg, model.grid)
    t0 = time.perf_counter()
    F = assemble_p2o(model)
    Fq = assemble_p2q(model)
    t1 = time.perf_counter()
    G, Gq = build_G_star(F, prior), build_Gq_star(Fq, prior)
    t2 = time.perf_counter()
    meta = {"config_hash": C.maps_hash(cfg), "transposed_marches": model.counters.transposed_marches,
            "substeps": model.substeps, "solver_dt": model.dt,
            "timings": {"adjoint_marches": t1 - t0, "prior_solves": t2 - t1}}
    save_maps(art_dir, {"F": F, "Fq": Fq, "G": G, "Gq": Gq}, meta)
    print(f"assembled F {F.shape} and F_q {Fq.shape} with {meta['transposed_marches']} transposed marches "
          f"({model.substeps} substeps/data step) in {t1 - t0:.2f}s; G*, G_q* in {t2 - t1:.2f}s -> {art_dir}")
    return meta


def _offline(cfg, model, prior, maps):
    noise = C.build_noise(cfg, model)
    return run_offline(maps["F"], maps["Fq"], prior, noise, m_prior=C.prior_mean_field(cfg, model),
                       G=maps["G"], Gq=maps["Gq"],
                       metadata={"config_hash": C.posterior_hash(cfg), "maps_hash": C.maps_hash(cfg),
                                 "noise_level": noise.noise_level})


def cmd_factorize(cfg, args) -> dict:
    art_dir, _ = _dirs(cfg, args)
    model = C.build_model(cfg)
    maps = load_maps(art_dir, C.maps_hash(cfg))
    prior = C.build_prior(cfg, model.grid)
    t0 = time.perf_counter()
    art = _offline(cfg, model, prior, maps)
    elapsed = time.perf_counter() - t0
    diag = conditioning_diagnostics(art)
    art.metadata.update(diag, factorize_seconds=elapsed)
    save_posterior(art_dir, art)
    print(f"factorized K ({art.data_dim}x{art.data_dim}), Gamma_post(q) and Q in {elapsed:.2f}s; "
          f"chol diag min {diag['chol_diag_min']:.3e} max {diag['chol_diag_max']:.3e}")
    return art.metadata


def cmd_synth(cfg, args) -> dict:
    _, out_dir = _dirs(cfg, args)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = C.build_model(cfg)
    source = C.build_source(cfg, model.grid)
    d_obs, d_true, m_true, q_true = synth_data(model, source, cfg["noise_level"], C.seed_sequence(cfg, "noise"))
    write_csv(out_dir / "d_obs.csv", d_obs.values, sensor_header(model))
    write_csv(out_dir / "d_true.csv", d_true.values, sensor_header(model))
    write_csv(out_dir / "q_true.csv", q_true.values, qoi_header(model))
    save_dense(m_true.values, out_dir / "m_true.d2qm")
    rel = float(np.linalg.norm(d_obs.values - d_true.values) / np.linalg.norm(d_true.values))
    print(f"synthetic data at noise level {cfg['noise_level']}: relative perturbation {rel:.4f} -> {out_dir}")
    return {"relative_perturbation": rel}


def cmd_infer(cfg, args) -> dict:
    art_dir, out_dir = _dirs(cfg, args)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = C.build_model(cfg)
    prior = C.build_prior(cfg, model.grid)
    t0 = time.perf_counter()
    art = load_posterior(art_dir, prior, C.posterior_hash(cfg))
    t_load = time.perf_counter() - t0
    d_obs = read_csv(Path(args.data) if args.data else out_dir / "d_obs.csv", sensor_header(model))
    steps = model.counters.total_steps()
    res = run_online(art, d_obs, args.level)
    if model.counters.total_steps() != steps:
        raise CliError("online inference advanced the solver", EXIT_NUMERICAL)

    # comparison column: one Hessian matvec through the solver vs through the FFT maps
    v = prior.sample(C.seed_sequence(cfg, "bench"), model.obs.n_steps)
    t0 = time.perf_counter()
    model.simulate_p2o_transpose(model.simulate_p2o(v) / art.noise.variances.reshape(-1, model.n_data))
    t_mf = time.perf_counter() - t0
    t0 = time.perf_counter()
    art.F.rmatvec(art.F.matvec(v) / art.noise.variances.reshape(-1, model.n_data))
    t_fft = time.perf_counter() - t0

    timings = {"load_artifacts": t_load, **res.timings,
               "hessian_matvec_matrix_free": t_mf, "hessian_matvec_fft": t_fft}
    save_dense(res.m_map, out_dir / "m_map.d2qm")
    n_q = len(model.obs.qoi_indices)
    write_csv(out_dir / "q_map.csv", res.q_map, qoi_header(model))
    write_csv(out_dir / "q_intervals.csv", np.hstack([res.credible_lo, res.credible_hi]),
              [f"{h}_lo" for h in qoi_header(model)] + [f"{h}_hi" for h in qoi_header(model)])
    write_json(out_dir / "timings.json", timings)
    metrics = dict(res.diagnostics)
    if (out_dir / "m_true.d2qm").exists() and (out_dir / "q_true.csv").exists():
        m_true = load_dense(out_dir / "m_true.d2qm")
        q_true = read_csv(out_dir / "q_true.csv").reshape(-1, n_q)
        metrics.update(relative_errors((m_true, q_true), (res.m_map, res.q_map), art.F))
    write_json(out_dir / "metrics.json", metrics)
    print(f"{'stage':<28s}{'seconds':>12s}")
    for k, t in timings.items():
        print(f"{k:<28s}{t:12.6f}")
    for k, val in metrics.items():
        print(f"{k:<28s}{val:12.6f}")
    return {"timings": timings, "metrics": metrics}


def cmd_predict(cfg, args) -> dict:
    """QoI prediction from the dense d2q map alone (Toeplitz maps are not loaded)."""
    art_dir, out_dir = _dirs(cfg, args)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = C.build_model(cfg)
    art = load_posterior(art_dir, None, C.posterior_hash(cfg), with_maps=False)
    d_obs = read_csv(Path(args.data) if args.data else out_dir / "d_obs.csv", sensor_header(model))
    t0 = time.perf_counter()
    q = predict_qoi(art, d_obs)
    lo, hi = credible_intervals(q, art.qoi_cov, args.level)
    elapsed = time.perf_counter() - t0
    write_csv(out_dir / "q_map.csv", q, qoi_header(model))
    write_csv(out_dir / "q_intervals.csv", np.hstack([lo, hi]),
              [f"{h}_lo" for h in qoi_header(model)] + [f"{h}_hi" for h in qoi_header(model)])
    print(f"predicted {q.size} QoI values in {elapsed * 1e3:.3f} ms -> {out_dir}")
    return {"predict_seconds": elapsed}


def cmd_bench(cfg, args) -> dict:
    art_dir, out_dir = _dirs(cfg, args)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = C.build_model(cfg)
    prior = C.build_prior(cfg, model.grid)
    art = load_posterior(art_dir, prior, C.posterior_hash(cfg))
    rng = np.random.default_rng(C.seed_sequence(cfg, "bench"))
    v = prior.sample(rng, model.obs.n_steps)
    d = art.F.matvec(v)
    w = art.noise.variances.reshape(-1, model.n_data)
    k = args.repeat
    t = {
        "F_matvec_matrix_free": _median_time(lambda: model.simulate_p2o(v), k),
        "F_matvec_fft": _median_time(lambda: art.F.matvec(v), k),
        "hessian_matvec_matrix_free": _median_time(
            lambda: model.simulate_p2o_transpose(model.simulate_p2o(v) / w), k),
        "posterior_cov_matvec": _median_time(lambda: posterior_cov_matvec(art, v), k),
        "online_infer_predict": _median_time(lambda: run_online(art, d), k),
    }
    report = {"repeat": k, "median_seconds": t, "speedup": {
        "F_matvec_fft_vs_matrix_free": t["F_matvec_matrix_free"] / t["F_matvec_fft"],
        "online_vs_hessian_matvec": t["hessian_matvec_matrix_free"] / t["online_infer_predict"],
    }}
    write_json(out_dir / "bench.json", report)
    for key, val in t.items():
        print(f"{key:<30s}{val:12.6f} s")
    for key, val in report["speedup"].items():
        print(f"{key:<30s}{val:12.1f} x")
    return report


def cmd_spectrum(cfg, args) -> dict:
    art_dir, out_dir = _dirs(cfg, args)
    out_dir.mkdir(parents=True, exist_ok=True)
    F = load_maps(art_dir, C.maps_hash(cfg))["F"]
    sigma = bt_singular_spectrum(F, cap=int(cfg["dense_cap"]))
    np.savetxt(out_dir / "spectrum.csv", np.column_stack([np.arange(1, sigma.size + 1), sigma]),
               delimiter=",", header="index,singular_value", comments="", fmt=["%d", "%.17g"])
    ratio = spectrum_decay_ratio(sigma, 0.9)
    write_json(out_dir / "spectrum.json", {"n": int(sigma.size), "decay_ratio_0.9": ratio})
    print(f"{sigma.size} singular values; sigma^2 at 90% / sigma_1^2 = {ratio:.3e} -> {out_dir / 'spectrum.csv'}")
    return {"decay_ratio": ratio}


def cmd_oracle_check(cfg, args) -> dict:
    model = C.build_model(cfg)
    if model.n_param * model.obs.n_steps > 5000:
        raise CliError("oracle-check needs a tiny config (N_m * N_t <= 5000), e.g. configs/tiny.json", EXIT_CONFIG)
    checks = run_oracle_suite(model, C.build_prior(cfg, model.grid), C.build_noise(cfg, model),
                              C.seed_sequence(cfg, "oracle"), m_prior=C.prior_mean_field(cfg, model))
    for c in checks:
        print(c.line())
    failed = [c.name for c in checks if not c.passed]
    if failed:
        raise CliError(f"{len(failed)} oracle check(s) failed: {', '.join(failed)}", EXIT_NUMERICAL)
    return {c.name: c.value for c in checks}


COMMANDS = {
    "assemble": cmd_assemble, "factorize": cmd_factorize, "synth": cmd_synth, "infer": cmd_infer,
    "predict": cmd_predict, "bench": cmd_bench, "spectrum": cmd_spectrum, "oracle-check": cmd_oracle_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ltitwin", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", help="output directory (overrides paths.output_dir)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--threads", type=int, help="cap on BLAS/FFT worker threads")
        p.add_argument("--set", action="append", default=[], metavar="K=V", help="dotted config override")
        if name in ("infer", "predict"):
            p.add_argument("--data", help="observed data CSV (default: <out>/d_obs.csv)")
            p.add_argument("--level", type=float, default=0.95, help="credible level")
        if name == "bench":
            p.add_argument("--repeat", type=int, default=5, help="timings are medians of this many runs")
    return parser


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = C.load_config(args.config, args.set, args.seed, args.threads)
        with _thread_limit(cfg["threads"]):
            COMMANDS[args.command](cfg, args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ArtifactMismatch) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (PosteriorError, IntegrationError, AssemblyError, PriorError, ToeplitzError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
