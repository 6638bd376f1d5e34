"""Batch front end: simulate, fit, predict, covariance-surface export and
scaling benchmark, driven by a JSON config file.

Every run writes a manifest (config hash, seed, git revision, wall time)
into its output directory.  All randomness flows from the config seed
through keyed substreams, so reruns with the same config reproduce every
output file byte for byte (manifests and diagnostics record wall times and
are exempt).  Exit codes: 0 success, 2 config/validation error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from .covariance import CovarianceParams
from .dagbag import DirectionBag
from .domain import (NumericalError, ValidationError, build_partition, load_csv,
                     split_reference, write_csv)
from .mcmc import ChainResult, ChainSettings, GibbsSampler, run_chain, substream
from .model import Priors
from .predict import compute_metrics, direction_posterior, predict_at
from .simulate import (PRESET_NAMES, covariance_surface_experiments, generate_gbag_data,
                       preset_scenario)

STEP_HOLDOUT = 301

DEFAULT_BENCH_SIZES = (2048, 4096, 8192, 16384)


def _fmt(v: float) -> str:
    return repr(float(v))


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                             text=True, timeout=10)
        return out.stdout.strip() if out.returncode == 0 else "unknown"
    except OSError:
        return "unknown"


def _write_manifest(out_dir: Path, config: dict, seed: int, t_start: float,
                    extra: dict | None = None) -> None:
    manifest = {
        "config_hash": hashlib.sha256(
            json.dumps(config, sort_keys=True).encode()).hexdigest(),
        "seed": seed,
        "git_revision": _git_revision(),
        "wall_time_s": round(time.time() - t_start, 3),
    }
    manifest.update(extra or {})
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_matrix_csv(path: Path, header: list[str], columns: list[np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in range(len(columns[0])):
            w.writerow([_fmt(c[r]) for c in columns])


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc


def priors_from_config(cfg: dict, p: int) -> Priors:
    pc = cfg.get("priors", {})
    mu = np.full(p, float(pc.get("mu_beta", 0.0)))
    v = np.eye(p) * float(pc.get("v_beta", 100.0))
    return Priors(
        mu_beta=mu, v_beta=v,
        a_tau=float(pc.get("a_tau", 2.0)), b_tau=float(pc.get("b_tau", 0.1)),
        a_sigma=float(pc.get("a_sigma", 2.0)), b_sigma=float(pc.get("b_sigma", 1.0)),
        a_bounds=tuple(pc.get("a_bounds", (0.1, 20.0))),
        c_bounds=tuple(pc.get("c_bounds", (0.1, 20.0))),
        kappa_bounds=tuple(pc.get("kappa_bounds", (0.0, 1.0))),
        alpha=float(pc.get("alpha", 0.25)),
    )


def settings_from_config(cfg: dict, seed: int, threads: int) -> ChainSettings:
    cc = cfg.get("chain", {})
    return ChainSettings(
        n_iter=int(cc.get("n_iter", 1000)),
        n_burn=int(cc.get("n_burn", 500)),
        thin=int(cc.get("thin", 1)),
        seed=seed,
        target_accept=float(cc.get("target_accept", 0.234)),
        ram_scale=float(cc.get("ram_scale", 0.1)),
        ram_decay=float(cc.get("ram_decay", 0.6)),
        threads=threads,
        w_update=cc.get("w_update", "colored"),
    )


def holdout_rows(y: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Deterministic validation split over the observed rows."""
    obs = np.flatnonzero(np.isfinite(y))
    n_hold = int(round(fraction * len(obs)))
    perm = substream(seed, 0, STEP_HOLDOUT).permutation(len(obs))
    return np.sort(obs[perm[:n_hold]])


def save_chain(out_dir: Path, result: ChainResult) -> None:
    it = result.iterations
    _write_matrix_csv(out_dir / "beta.csv",
                      ["iteration"] + [f"beta{j}" for j in range(result.beta.shape[1])],
                      [it.astype(float)] + [result.beta[:, j] for j in range(result.beta.shape[1])])
    _write_matrix_csv(out_dir / "tau2.csv", ["iteration", "tau2"],
                      [it.astype(float), result.tau2])
    _write_matrix_csv(out_dir / "theta.csv",
                      ["iteration", "a", "c", "kappa", "sigma2"],
                      [it.astype(float)] + [result.theta[:, j] for j in range(4)])
    with open(out_dir / "z_samples.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration"] + [f"p{i}" for i in range(result.z.shape[1])])
        for r in range(result.n_samples):
            w.writerow([int(it[r])] + [int(v) for v in result.z[r]])
    with open(out_dir / "w_samples.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"w{i}" for i in range(result.w_s.shape[1])])
        for r in range(result.n_samples):
            w.writerow([_fmt(v) for v in result.w_s[r]])


def load_chain(out_dir: Path, bag: DirectionBag, nu: float | None) -> ChainResult:
    def read(path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])

    _, beta = read(out_dir / "beta.csv")
    _, tau2 = read(out_dir / "tau2.csv")
    _, theta = read(out_dir / "theta.csv")
    _, z = read(out_dir / "z_samples.csv")
    with open(out_dir / "w_samples.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    w_s = np.array([[float(v) for v in r] for r in rows[1:]])
    it = beta[:, 0].astype(int)
    n = len(it)
    return ChainResult(
        iterations=it, beta=beta[:, 1:], tau2=tau2[:, 1], theta=theta[:, 1:5],
        z=z[:, 1:].astype(int), pi=np.zeros((n, z.shape[1] - 1, 0)),
        w_s=w_s, w_u=np.zeros((n, 0)), log_joint=np.zeros(0),
        accept_rate=float("nan"), step_seconds={}, bag=bag, nu=nu,
    )


def cmd_simulate(args) -> int:
    t0 = time.time()
    cfg = load_config(args.config) if args.config else {}
    preset = args.preset or cfg.get("preset")
    if preset not in PRESET_NAMES:
        raise ValidationError(
            f"unknown preset {preset!r}; valid presets: {', '.join(PRESET_NAMES)}")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    out_dir = Path(args.out or cfg.get("out", "."))
    out_dir.mkdir(parents=True, exist_ok=True)
    scenario = preset_scenario(preset, full_lattice=args.full_lattice)
    sim = generate_gbag_data(scenario, seed=seed)
    write_csv(out_dir / "data.csv", sim.locations, sim.y, sim.X)
    write_csv(out_dir / "truth_w.csv", sim.locations, extra={"true_w": sim.w})
    with open(out_dir / "true_z.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["partition", "direction"])
        for i, h in enumerate(sim.z_true):
            w.writerow([i, scenario.bag.names[h]])
    _write_manifest(out_dir, {"preset": preset, "seed": seed}, seed, t0,
                    extra={"preset": preset, "n_rows": len(sim.y),
                           "data_sha256": _sha256(out_dir / "data.csv")})
    print(f"simulate: wrote {len(sim.y)} rows to {out_dir}")
    return 0


def cmd_covsurface(args) -> int:
    t0 = time.time()
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    which = args.preset or "fig2a"
    exps = covariance_surface_experiments()
    if which == "fig2a":
        exp = exps["orientation"]
        g = exp["locations"]
        _write_matrix_csv(out_dir / "fig2a_mixture.csv", ["x", "y", "t", "cov"],
                          [g[:, 0], g[:, 1], g[:, 2], exp["mixture"]])
        _write_matrix_csv(out_dir / "fig2a_stationary.csv", ["x", "y", "t", "cov"],
                          [g[:, 0], g[:, 1], g[:, 2], exp["stationary"]])
    elif which == "fig2b":
        exp = exps["persistence"]
        times = np.sort(np.unique(exp["locations"][:, 2]))
        _write_matrix_csv(out_dir / "fig2b_curves.csv",
                          ["time", "downstream", "upstream",
                           "downstream_stationary", "upstream_stationary"],
                          [times, exp["downstream"], exp["upstream"],
                           exp["downstream_stationary"], exp["upstream_stationary"]])
        g = exp["locations"]
        _write_matrix_csv(out_dir / "fig2b_surface.csv", ["x", "y", "t", "cov"],
                          [g[:, 0], g[:, 1], g[:, 2], exp["surface"]])
    else:
        raise ValidationError(f"unknown covsurface preset {which!r} (fig2a or fig2b)")
    _write_manifest(out_dir, {"covsurface": which}, 0, t0)
    print(f"covsurface: wrote {which} grids to {out_dir}")
    return 0


def _fit_inputs(cfg: dict, args):
    data_path = Path(args.data or cfg.get("data", ""))
    if not data_path.is_file():
        raise ValidationError(f"data file not found: {data_path}")
    locations, y, X = load_csv(data_path)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    frac = args.holdout if args.holdout is not None else float(cfg.get("holdout", 0.0))
    held = holdout_rows(y, frac, seed) if frac > 0 else np.empty(0, int)
    return data_path, locations, y, X, seed, held


def cmd_fit(args) -> int:
    t0 = time.time()
    cfg = load_config(args.config)
    data_path, locations, y, X, seed, held = _fit_inputs(cfg, args)
    out_dir = Path(args.out or cfg.get("out", "."))
    out_dir.mkdir(parents=True, exist_ok=True)
    threads = args.threads if args.threads is not None else int(cfg.get("threads", 1))

    grid_dims = tuple(int(g) for g in cfg["grid_dims"])
    bag = DirectionBag(tuple(cfg.get("bag", ("W", "NW", "N", "NE"))))
    nu = cfg.get("nu")
    nu = float(nu) if nu is not None else None

    # the chain carries observed, non-held rows only; held-out and
    # prediction-only rows are handled post hoc by `predict`
    fit_mask = np.isfinite(y)
    fit_mask[held] = False
    fit_rows = np.flatnonzero(fit_mask)
    if len(fit_rows) == 0:
        raise ValidationError("no observed rows left to fit")
    y_fit = y[fit_rows].copy()
    center = 0.0
    if bool(cfg.get("center_y", False)):
        center = float(np.mean(y_fit))
        y_fit -= center
    scheme = build_partition(locations, grid_dims)
    pdata = split_reference(locations[fit_rows], y_fit, X[fit_rows], scheme)

    priors = priors_from_config(cfg, pdata.p)
    settings = settings_from_config(cfg, seed, threads)
    result = run_chain(pdata, bag, priors, settings, nu=nu)

    save_chain(out_dir, result)
    # per-location latent summaries
    locs_fit = locations[fit_rows][pdata.ref_rows_flat]
    w_mean = result.w_s.mean(axis=0)
    w_lo, w_hi = np.quantile(result.w_s, [0.025, 0.975], axis=0)
    _write_matrix_csv(out_dir / "w_summary.csv",
                      ["x1", "x2", "time", "w_mean", "w_lo95", "w_hi95"],
                      [locs_fit[:, 0], locs_fit[:, 1], locs_fit[:, 2], w_mean, w_lo, w_hi])
    with open(out_dir / "holdout_rows.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row"])
        for r in held:
            w.writerow([int(r)])
    summary = {}
    for j in range(pdata.p):
        lo, hi = np.quantile(result.beta[:, j], [0.025, 0.975])
        summary[f"beta{j}"] = {"mean": float(result.beta[:, j].mean()),
                               "lo95": float(lo), "hi95": float(hi)}
    for name, vals in [("tau2", result.tau2), ("a", result.theta[:, 0]),
                       ("c", result.theta[:, 1]), ("kappa", result.theta[:, 2]),
                       ("sigma2", result.theta[:, 3])]:
        lo, hi = np.quantile(vals, [0.025, 0.975])
        summary[name] = {"mean": float(vals.mean()), "lo95": float(lo), "hi95": float(hi)}
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    diag_rows = [("accept_rate", result.accept_rate)]
    diag_rows += [(f"seconds_{k}", v) for k, v in sorted(result.step_seconds.items())]
    with open(out_dir / "diagnostics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "value"])
        for name, v in diag_rows:
            w.writerow([name, _fmt(v)])
    _write_matrix_csv(out_dir / "logjoint.csv", ["iteration", "log_joint"],
                      [result.iterations.astype(float), result.log_joint])
    _write_manifest(out_dir, cfg, seed, t0, extra={
        "data_sha256": _sha256(data_path),
        "n_fit_rows": len(fit_rows),
        "n_holdout": len(held),
        "center_y": center,
        "threads": threads,
    })
    print(f"fit: {settings.n_iter} iterations, {result.n_samples} retained, "
          f"accept {result.accept_rate:.3f} -> {out_dir}")
    return 0


def cmd_predict(args) -> int:
    t0 = time.time()
    cfg = load_config(args.config)
    data_path, locations, y, X, seed, _ = _fit_inputs(cfg, args)
    out_dir = Path(args.out or cfg.get("out", "."))
    chain_dir = Path(args.chain or cfg.get("out", "."))
    manifest = json.loads((chain_dir / "manifest.json").read_text())
    if manifest.get("data_sha256") != _sha256(data_path):
        raise ValidationError("data file does not match the fitted chain (hash check)")
    center = float(manifest.get("center_y", 0.0))

    held = np.array([int(r[0]) for r in
                     list(csv.reader(open(chain_dir / "holdout_rows.csv")))[1:]],
                    dtype=int)
    grid_dims = tuple(int(g) for g in cfg["grid_dims"])
    bag = DirectionBag(tuple(cfg.get("bag", ("W", "NW", "N", "NE"))))
    nu = cfg.get("nu")
    nu = float(nu) if nu is not None else None
    fit_mask = np.isfinite(y)
    fit_mask[held] = False
    fit_rows = np.flatnonzero(fit_mask)
    y_fit = y[fit_rows] - center
    scheme = build_partition(locations, grid_dims)
    pdata = split_reference(locations[fit_rows], y_fit, X[fit_rows], scheme)
    chain = load_chain(chain_dir, bag, nu)

    target_mask = ~np.isfinite(y)
    target_mask[held] = True
    targets = np.flatnonzero(target_mask)
    out_dir.mkdir(parents=True, exist_ok=True)
    if len(targets) == 0:
        _write_matrix_csv(out_dir / "predictions.csv",
                          ["x1", "x2", "time", "mean", "sd", "lo95", "hi95", "w_mean"],
                          [np.empty(0)] * 8)
        _write_manifest(out_dir, cfg, seed, t0, extra={"n_predicted": 0})
        print("predict: no target locations")
        return 0
    pred = predict_at(locations[targets], chain, pdata, bag,
                      X_new=X[targets], seed=seed)
    mean = pred.mean + center
    lo95, hi95 = pred.lo95 + center, pred.hi95 + center
    _write_matrix_csv(out_dir / "predictions.csv",
                      ["x1", "x2", "time", "mean", "sd", "lo95", "hi95", "w_mean"],
                      [locations[targets, 0], locations[targets, 1], locations[targets, 2],
                       mean, pred.sd, lo95, hi95, pred.w_mean])
    freq, modal = direction_posterior(chain)
    with open(out_dir / "direction_posterior.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["partition"] + [f"dir_{n}" for n in bag.names] + ["mode"])
        for i in range(freq.shape[0]):
            w.writerow([i] + [_fmt(v) for v in freq[i]] + [bag.names[modal[i]]])
    metrics = None
    known = np.isfinite(y[targets])
    if np.any(known):
        from .predict import PredictionResult
        sub = PredictionResult(
            locations=pred.locations[known], mean=mean[known], sd=pred.sd[known],
            lo95=lo95[known], hi95=hi95[known], w_mean=pred.w_mean[known])
        rep = compute_metrics(y[targets][known], sub)
        metrics = {"rmspe": rep.rmspe, "mape": rep.mape,
                   "ci_coverage_95": rep.ci_coverage_95,
                   "ci_width_95": rep.ci_width_95,
                   "n_holdout": int(known.sum())}
        with open(out_dir / "metrics.json", "w") as fh:
            json.dump(metrics, fh, indent=2, sort_keys=True)
            fh.write("\n")
    _write_manifest(out_dir, cfg, seed, t0,
                    extra={"n_predicted": len(targets),
                           "metrics": metrics if metrics else "none"})
    print(f"predict: {len(targets)} locations"
          + (f", holdout rmspe {metrics['rmspe']:.4f}" if metrics else ""))
    return 0


def _bench_dims(n: int) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    if n % 256:
        raise ValidationError("bench sizes must be multiples of 256")
    nt = n // 256
    return (16, 16, nt), (2, 2, nt)


def time_iterations(sampler: GibbsSampler, warmup: int, timed: int) -> np.ndarray:
    """Per-iteration wall seconds of the full update schedule."""
    out = np.empty(timed)
    for it in range(warmup + timed):
        t0 = time.perf_counter()
        sampler.update_beta(it)
        sampler.update_tau2(it)
        sampler.update_z(it)
        sampler.update_pi(it)
        sampler.update_w_reference(it)
        sampler.update_w_nonreference(it)
        sampler.update_theta_ram(it)
        sampler.update_sigma2(it)
        if it >= warmup:
            out[it - warmup] = time.perf_counter() - t0
    return out


def bench_scaling(sizes, seed: int = 0, warmup: int = 3, timed: int = 10,
                  bag_names: tuple[str, ...] = ("W", "NW", "N", "NE")) -> dict:
    """Mean per-iteration time across problem sizes with M proportional to n."""
    from .simulate import SimScenario, THETA1

    rows = []
    for n in sizes:
        grid, parts = _bench_dims(int(n))
        M = int(np.prod(parts))
        layout = np.zeros(M, dtype=int)
        scen = SimScenario(grid=grid, partition_dims=parts, theta=THETA1,
                           layout=layout, bag=DirectionBag(bag_names),
                           beta=np.array([2.0]), tau2=0.01)
        sim = generate_gbag_data(scen, seed=seed)
        priors = Priors(mu_beta=np.zeros(1), v_beta=np.eye(1) * 100.0,
                        a_bounds=(4.0, 8.0), c_bounds=(0.158, 0.789))
        settings = ChainSettings(n_iter=warmup + timed + 1, n_burn=warmup + timed,
                                 seed=seed, log_joint_on_retain=False)
        sampler = GibbsSampler(sim.pdata, DirectionBag(bag_names), priors, settings)
        secs = time_iterations(sampler, warmup, timed)
        rows.append({"n": int(n), "M": M, "mean_iter_s": float(np.mean(secs))})
    times = np.array([r["mean_iter_s"] for r in rows])
    ns = np.array([r["n"] for r in rows], dtype=float)
    ratios = (times[1:] / times[:-1]).tolist() if len(times) > 1 else []
    fit = {}
    if len(times) > 1:
        slope, intercept = np.polyfit(np.log(ns), np.log(times), 1)
        pred = slope * np.log(ns) + intercept
        ss_res = float(np.sum((np.log(times) - pred) ** 2))
        ss_tot = float(np.sum((np.log(times) - np.log(times).mean()) ** 2))
        fit = {"slope": float(slope),
               "r2": 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0}
    return {"rows": rows, "ratios": ratios, "fit": fit}


def cmd_bench(args) -> int:
    t0 = time.time()
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    sizes = ([int(s) for s in args.sizes.split(",")] if args.sizes
             else list(DEFAULT_BENCH_SIZES))
    seed = args.seed if args.seed is not None else 0
    report = bench_scaling(sizes, seed=seed, timed=args.iters)
    with open(out_dir / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "M", "mean_iter_s"])
        for r in report["rows"]:
            w.writerow([r["n"], r["M"], _fmt(r["mean_iter_s"])])
    with open(out_dir / "scaling.json", "w") as fh:
        json.dump({"ratios": report["ratios"], **report["fit"]}, fh,
                  indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out_dir, {"sizes": sizes}, seed, t0)
    for r in report["rows"]:
        print(f"n={r['n']:>6} M={r['M']:>4} {r['mean_iter_s'] * 1e3:8.1f} ms/iter")
    if report["fit"]:
        print(f"ratios: {', '.join(f'{x:.2f}' for x in report['ratios'])}; "
              f"log-log slope {report['fit']['slope']:.2f} (R2 {report['fit']['r2']:.3f})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gbag")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--out", default=None)

    p = sub.add_parser("simulate", help="generate a preset synthetic dataset")
    common(p)
    p.add_argument("--preset", default=None)
    p.add_argument("--full-lattice", action="store_true")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("fit", help="run the posterior sampler on a dataset")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--holdout", type=float, default=None)
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("predict", help="posterior predictions from a fitted chain")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--chain", default=None)
    p.add_argument("--holdout", type=float, default=None)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("covsurface", help="export covariance-surface grids")
    common(p)
    p.add_argument("--preset", default=None, help="fig2a or fig2b")
    p.set_defaults(fn=cmd_covsurface)

    p = sub.add_parser("bench", help="per-iteration scaling benchmark")
    common(p)
    p.add_argument("--sizes", default=None, help="comma-separated sizes")
    p.add_argument("--iters", type=int, default=10)
    p.set_defaults(fn=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
