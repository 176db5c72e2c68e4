"""Experiment runner: JSON config in, CSV/JSON/SVG artifacts out.

Usage: wavephase <config.json> [--out DIR] [--seed N] [--threads N]

Exit codes: 0 success, 1 runtime failure, 2 usage or validation failure.
Results are written atomically and a manifest records the config hash, seed
and library versions; re-running with the same config and seed reproduces
byte-identical CSVs.
"""

import argparse
import hashlib
import json
import os
import sys
import tempfile

import numpy as np

from . import __version__
from .ensemble import run_ensemble
from .grid import Field, Grid
from .isochronal import integrate_isochronal_sde, phase_law_coeffs
from .longtime import (
    exit_probability_experiment,
    fp_mean_drift,
    histogram_vs_density_tv,
    mean_drift,
    occupation_histogram,
    simulate_aux_occupation,
    stationary_density,
    transition_density,
)
from .model import RingModelParams, build_atlas, estimate_semigroup_bound, solve_bump
from .noise import NoiseModel
from .sim import SimConfig, run
from .variational import integrate_phase_sde

KINDS = ("atlas", "phase-compare", "exit-scan", "occupation", "drift", "fp-solve")


class ConfigError(ValueError):
    pass


def _line_of_key(raw: str, key: str) -> int:
    needle = f'"{key}"'
    for i, line in enumerate(raw.splitlines(), start=1):
        if needle in line:
            return i
    return 1


def _require(cond: bool, raw: str, key: str, msg: str):
    if not cond:
        raise ConfigError(f"line {_line_of_key(raw, key)}: {msg}")


def load_config(path: str, seed_override=None, out_override=None):
    with open(path) as fh:
        raw = fh.read()
    try:
        cfg = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ConfigError(f"line {e.lineno}: invalid JSON ({e.msg})")

    _require(cfg.get("schema_version") == 1, raw, "schema_version",
             "schema_version must be 1")
    kind = cfg.get("kind")
    _require(kind in KINDS, raw, "kind",
             f"unknown kind {kind!r}; valid kinds: {', '.join(KINDS)}")

    gridc = cfg.get("grid", {})
    n_points = gridc.get("n_points", 128)
    _require(isinstance(n_points, int) and n_points >= 16 and n_points % 2 == 0,
             raw, "n_points", "grid.n_points must be an even integer >= 16")

    modelc = cfg.get("model", {})
    j_coeffs = modelc.get("j_coeffs", [-1.0, 2.5])
    gain = modelc.get("gain", 5.0)
    threshold = modelc.get("threshold", 0.4)
    _require(isinstance(j_coeffs, list) and len(j_coeffs) >= 1, raw, "j_coeffs",
             "model.j_coeffs must be a non-empty list")
    _require(gain > 0, raw, "gain", "model.gain must be positive")

    noisec = cfg.get("noise", {})
    mode_amps = noisec.get("mode_amps", list(np.exp(-0.1 * np.arange(11) ** 2)))
    _require(isinstance(mode_amps, list) and len(mode_amps) >= 1, raw, "mode_amps",
             "noise.mode_amps must be a non-empty list")
    _require(len(mode_amps) - 1 <= n_points // 2 - 1, raw, "mode_amps",
             "noise.mode_amps max wavenumber must be <= n_points/2 - 1")
    gkind = noisec.get("gain", "none")
    _require(gkind in ("none", "sigmoid", "affine"), raw, "gain",
             "noise.gain must be none|sigmoid|affine")
    gparams = tuple(noisec.get("gain_params", ()))

    simc = cfg.get("sim", {})
    dt = simc.get("dt", 1e-3)
    _require(0 < dt <= 0.1, raw, "dt", "sim.dt must be in (0, 0.1]")
    t_end = simc.get("t_end", 1.0)
    _require(t_end >= dt, raw, "t_end", "sim.t_end must be >= dt")
    epsilon = simc.get("epsilon", 0.0)
    _require(epsilon >= 0, raw, "epsilon", "sim.epsilon must be >= 0")

    seed = int(cfg.get("seed", 0)) if seed_override is None else int(seed_override)
    out_dir = out_override or cfg.get("out_dir", "wavephase_out")

    grid = Grid(n_points)
    window = _build_window(noisec.get("window"), grid, raw)
    return {
        "raw": raw,
        "kind": kind,
        "seed": seed,
        "out_dir": out_dir,
        "grid": grid,
        "params": RingModelParams(j_coeffs=tuple(j_coeffs), gain=float(gain),
                                  threshold=float(threshold)),
        "noise_spec": dict(mode_amps=np.asarray(mode_amps, dtype=float),
                           gain=gkind, gain_params=gparams, window=window),
        "sim": SimConfig(dt=float(dt), t_end=float(t_end), epsilon=float(epsilon),
                         save_stride=int(simc.get("save_stride", 1)),
                         initial_phase=float(simc.get("initial_phase", 0.0))),
        "experiment": cfg.get("experiment", {}),
    }


def _build_window(spec, grid: Grid, raw: str):
    if spec is None or spec.get("kind", "none") == "none":
        return None
    theta = grid.theta
    kind = spec["kind"]
    if kind == "cosine":
        c = float(spec.get("contrast", 0.5))
        center = float(spec.get("center", 0.0))
        return 1.0 + c * np.cos(theta - center)
    if kind == "harmonics":
        w = np.ones(grid.n_points)
        for k, ck, sk in spec.get("coeffs", []):
            w += ck * np.cos(k * theta) + sk * np.sin(k * theta)
        return w
    raise ConfigError(f"line {_line_of_key(raw, 'window')}: unknown window kind {kind!r}")


def make_noise(cfg) -> NoiseModel:
    ns = cfg["noise_spec"]
    return NoiseModel(cfg["grid"], ns["mode_amps"], ns["gain"], ns["gain_params"],
                      ns["window"], seed=cfg["seed"])


# ---------------------------------------------------------------------------
# atomic output helpers

def _atomic_write(path: str, text: str):
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp_", suffix=os.path.basename(path))
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_csv(path: str, header: list, columns: list):
    rows = [",".join(header)]
    n = len(columns[0])
    for i in range(n):
        rows.append(",".join(_fmt(col[i]) for col in columns))
    _atomic_write(path, "\n".join(rows) + "\n")


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


def write_json(path: str, obj):
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# plotting

def plot(csv_path: str, kind: str, out_svg: str, hashsalt: str = "wavephase"):
    """Render a result CSV as a static SVG; the layout depends on the kind."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = hashsalt

    with open(csv_path) as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.size == 0:
        raise ValueError("empty CSV, nothing to plot")
    cols = {name: data[:, i] for i, name in enumerate(header)}

    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    if kind == "occupation":
        width = cols["alpha"][1] - cols["alpha"][0]
        ax.bar(cols["alpha"], cols["histogram"], width=0.9 * width, label="occupation")
        ax.plot(cols["alpha"], cols["p_star"], "k-", lw=1.5, label="stationary density")
        ax.set_xlabel("phase")
        ax.set_ylabel("density")
        ax.legend()
    elif kind == "exit-scan":
        x, y = cols["x_eps2kappa2"], cols["log_p_hat"]
        good = np.isfinite(y)
        ax.plot(x[good], y[good], "o", label="cells")
        if np.sum(good) >= 2:
            sl, ic = np.polyfit(x[good], y[good], 1)
            xs = np.linspace(x[good].min(), x[good].max(), 50)
            ax.plot(xs, sl * xs + ic, "-", label=f"fit slope {sl:.3g}")
        ax.set_xlabel("kappa^2 / eps^2")
        ax.set_ylabel("log p_hat")
        ax.legend()
    elif kind == "phase-compare":
        ax.plot(cols["t"], cols["beta_newton"], label="orthogonality phase")
        ax.plot(cols["t"], cols["beta_sde"], "--", label="phase SDE")
        if "gamma_sde" in cols:
            ax.plot(cols["t"], cols["gamma_sde"], ":", label="isochronal SDE")
        ax.set_xlabel("t")
        ax.set_ylabel("phase")
        ax.legend()
    elif kind == "atlas":
        for name in ("phi", "phi1", "psi", "psi1"):
            ax.plot(cols["theta"], cols[name], label=name)
        ax.set_xlabel("theta")
        ax.legend()
    elif kind == "fp-solve":
        ax.plot(cols["alpha"], cols["density"], label="stationary density")
        ax.set_xlabel("phase")
        ax.set_ylabel("density")
        ax.legend()
    elif kind == "drift":
        ax.hist(cols["estimate"], bins=24)
        ax.set_xlabel("per-trajectory drift estimate")
        ax.set_ylabel("count")
    else:
        plt.close(fig)
        raise ValueError(f"no plot layout for kind {kind!r}")
    fig.tight_layout()
    fig.savefig(out_svg, format="svg", metadata={"Date": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# experiment dispatch

def _threads(args_threads) -> int:
    if args_threads:
        return int(args_threads)
    return int(os.environ.get("WAVEPHASE_THREADS", "1"))


def run_experiment(cfg, threads: int = 1) -> dict:
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    kind = cfg["kind"]
    fn = {
        "atlas": _exp_atlas,
        "phase-compare": _exp_phase_compare,
        "exit-scan": _exp_exit_scan,
        "occupation": _exp_occupation,
        "drift": _exp_drift,
        "fp-solve": _exp_fp_solve,
    }[kind]
    return fn(cfg, out, threads)


def _prep(cfg):
    params = cfg["params"]
    bump = solve_bump(params, cfg["grid"])
    atlas = build_atlas(params, bump)
    return params, atlas, make_noise(cfg)


def _exp_atlas(cfg, out, threads):
    params, atlas, _ = _prep(cfg)
    b_est, c_est = estimate_semigroup_bound(atlas, params)
    path = os.path.join(out, "atlas.csv")
    write_csv(path, ["theta", "phi", "phi1", "phi11", "psi", "psi1", "psi11"],
              [atlas.grid.theta, atlas.profile.values, atlas.profile_deriv.values,
               atlas.profile_deriv2.values, atlas.adjoint.values,
               atlas.adjoint_deriv.values, atlas.adjoint_deriv2.values])
    meta = {"b_spectral": atlas.gap_b, "b_est": b_est, "c_est": c_est,
            "kappa_bar": atlas.kappa_bar(),
            "params": {"j_coeffs": list(params.j_coeffs), "gain": params.gain,
                       "threshold": params.threshold}}
    write_json(os.path.join(out, "atlas_meta.json"), meta)
    plot(path, "atlas", os.path.join(out, "atlas.svg"), hashsalt=str(cfg["seed"]))
    return {"outputs": ["atlas.csv", "atlas_meta.json", "atlas.svg"], **meta}


def _exp_phase_compare(cfg, out, threads):
    params, atlas, noise = _prep(cfg)
    sim = cfg["sim"]
    if sim.save_stride != 1:
        sim = SimConfig(dt=sim.dt, t_end=sim.t_end, epsilon=sim.epsilon,
                        save_stride=1, initial_phase=sim.initial_phase)
    traj = run(sim, noise, params, atlas)
    pp = integrate_phase_sde(traj, atlas, noise, sim.epsilon, params)
    check = cfg["experiment"].get("check_interval", 1.0)
    gp = integrate_isochronal_sde(traj, atlas, noise, sim.epsilon, params,
                                  check_interval=check)
    path = os.path.join(out, "phase_compare.csv")
    write_csv(path, ["t", "beta_newton", "beta_sde", "gamma_sde", "det_M", "amp_norm"],
              [traj.times, pp.beta_newton, pp.beta_sde, gp.gamma_sde, pp.det_M, pp.amp_norm])
    cpath = os.path.join(out, "isochron_checkpoints.csv")
    write_csv(cpath, ["t", "gamma_direct"], [gp.check_times, gp.gamma_direct])
    summary = {"max_beta_dev": pp.max_dev, "max_gamma_dev": gp.max_dev}
    write_json(os.path.join(out, "phase_compare_summary.json"), summary)
    plot(path, "phase-compare", os.path.join(out, "phase_compare.svg"),
         hashsalt=str(cfg["seed"]))
    return {"outputs": ["phase_compare.csv", "isochron_checkpoints.csv",
                        "phase_compare_summary.json", "phase_compare.svg"], **summary}


def _exp_exit_scan(cfg, out, threads):
    params, atlas, noise = _prep(cfg)
    exp = cfg["experiment"]
    stats = exit_probability_experiment(
        params, atlas, noise,
        epsilons=exp["epsilons"], kappas=exp["kappas"],
        horizon=float(exp.get("horizon", 20.0)),
        n_trials=int(exp.get("n_trials", 400)),
        dt=cfg["sim"].dt, initial_phase=cfg["sim"].initial_phase, threads=threads)
    cells = stats.cells
    path = os.path.join(out, "exit_stats.csv")
    write_csv(path,
              ["epsilon", "kappa", "horizon", "n_trials", "n_exits", "p_hat",
               "wilson_low", "wilson_high", "x_eps2kappa2", "log_p_hat"],
              [[c.epsilon for c in cells], [c.kappa for c in cells],
               [c.horizon for c in cells], [c.n_trials for c in cells],
               [c.n_exits for c in cells], [c.p_hat for c in cells],
               [c.wilson_low for c in cells], [c.wilson_high for c in cells],
               [c.kappa**2 / c.epsilon**2 for c in cells],
               [np.log(c.p_hat) if 0 < c.p_hat else np.nan for c in cells]])
    summary = {"slope": stats.slope, "intercept": stats.intercept,
               "r_squared": stats.r_squared}
    write_json(os.path.join(out, "exit_fit.json"), summary)
    plot(path, "exit-scan", os.path.join(out, "exit_scan.svg"), hashsalt=str(cfg["seed"]))
    return {"outputs": ["exit_stats.csv", "exit_fit.json", "exit_scan.svg"], **summary}


def _run_gamma_ensemble(cfg, params, atlas, noise, threads):
    exp = cfg["experiment"]
    sim = cfg["sim"]
    n_traj = int(exp.get("n_traj", 100))
    n_steps = int(round(sim.t_end / sim.dt))
    save_stride = int(exp.get("save_stride", 100))
    coeffs = phase_law_coeffs(atlas, noise, params,
                              phase_grid_size=int(exp.get("phase_grid_size", 64)))
    init = exp.get("initial_phases", "uniform")
    if init == "uniform":
        phases = -np.pi + 2 * np.pi * np.arange(n_traj) / n_traj
    elif init == "fixed":
        phases = np.full(n_traj, sim.initial_phase)
    else:
        phases = np.asarray(init, dtype=float)
    res = run_ensemble(params, atlas, noise, sim.epsilon, sim.dt, n_steps,
                       initial_phases=phases, trajectory_ids=np.arange(n_traj),
                       save_stride=save_stride, gamma_coeffs=coeffs,
                       health_every=int(exp.get("health_every", 500)),
                       amp_limit=exp.get("amp_limit"), threads=threads)
    return coeffs, res


def _exp_occupation(cfg, out, threads):
    params, atlas, noise = _prep(cfg)
    exp = cfg["experiment"]
    coeffs, res = _run_gamma_ensemble(cfg, params, atlas, noise, threads)
    p_star = stationary_density(coeffs)
    burn = float(exp.get("burn_in_time", 0.0))
    keep = res.save_times >= burn
    n_bins = int(exp.get("n_bins", 32))
    hist = occupation_histogram(res.gamma[res.ok][:, keep], n_bins=n_bins)
    tv = histogram_vs_density_tv(hist, p_star)

    edges = np.linspace(-np.pi, np.pi, n_bins + 1)
    p_star_binned = np.interp(hist.phase_nodes,
                              np.append(p_star.phase_nodes, np.pi),
                              np.append(p_star.density, p_star.density[0]))
    path = os.path.join(out, "occupation.csv")
    write_csv(path, ["alpha", "histogram", "stderr", "p_star"],
              [hist.phase_nodes, hist.density, hist.stderr, p_star_binned])
    write_csv(os.path.join(out, "p_star.csv"), ["alpha", "density"],
              [p_star.phase_nodes, p_star.density])
    summary = {"tv_vs_p_star": tv, "n_ok": int(np.sum(res.ok)),
               "n_traj": len(res.ok), "flux": p_star.flux}
    write_json(os.path.join(out, "occupation_summary.json"), summary)
    plot(path, "occupation", os.path.join(out, "occupation.svg"), hashsalt=str(cfg["seed"]))
    return {"outputs": ["occupation.csv", "p_star.csv", "occupation_summary.json",
                        "occupation.svg"], **summary}


def _exp_drift(cfg, out, threads):
    params, atlas, noise = _prep(cfg)
    exp = cfg["experiment"]
    coeffs, res = _run_gamma_ensemble(cfg, params, atlas, noise, threads)
    p_star = stationary_density(coeffs)
    est = mean_drift(res.gamma[res.ok], res.save_times, cfg["sim"].epsilon)
    predicted = fp_mean_drift(coeffs, p_star)
    path = os.path.join(out, "drift.csv")
    write_csv(path, ["trajectory", "estimate"],
              [np.arange(len(est.per_trajectory)), est.per_trajectory])
    summary = {"estimate": est.value, "stderr": est.stderr,
               "ci_low": est.ci_low, "ci_high": est.ci_high,
               "fp_predicted": predicted, "n_ok": int(np.sum(res.ok))}
    write_json(os.path.join(out, "drift_summary.json"), summary)
    plot(path, "drift", os.path.join(out, "drift.svg"), hashsalt=str(cfg["seed"]))
    return {"outputs": ["drift.csv", "drift_summary.json", "drift.svg"], **summary}


def _exp_fp_solve(cfg, out, threads):
    params, atlas, noise = _prep(cfg)
    exp = cfg["experiment"]
    coeffs = phase_law_coeffs(atlas, noise, params,
                              phase_grid_size=int(exp.get("phase_grid_size", 64)))
    p_star = stationary_density(coeffs)
    write_csv(os.path.join(out, "phase_law.csv"),
              ["alpha", "V_tilde", "H", "gamma_qv"],
              [coeffs.alphas, coeffs.V_tilde, coeffs.H, coeffs.gamma_qv])
    path = os.path.join(out, "p_star.csv")
    write_csv(path, ["alpha", "density"], [p_star.phase_nodes, p_star.density])
    summary = {"flux": p_star.flux,
               "V_range": [float(coeffs.V_tilde.min()), float(coeffs.V_tilde.max())],
               "H_range": [float(coeffs.H.min()), float(coeffs.H.max())]}
    if "transition_t" in exp:
        tr = transition_density(coeffs, xi=float(exp.get("transition_xi", 0.0)),
                                t=float(exp["transition_t"]))
        write_csv(os.path.join(out, "p_transition.csv"), ["alpha", "density"],
                  [tr.phase_nodes, tr.density])
        summary["outputs_extra"] = ["p_transition.csv"]
    write_json(os.path.join(out, "fp_summary.json"), summary)
    plot(path, "fp-solve", os.path.join(out, "p_star.svg"), hashsalt=str(cfg["seed"]))
    return {"outputs": ["phase_law.csv", "p_star.csv", "fp_summary.json", "p_star.svg"],
            **summary}


# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="wavephase", description=__doc__)
    ap.add_argument("config", help="experiment config (JSON)")
    ap.add_argument("--out", help="output directory (overrides config)")
    ap.add_argument("--seed", type=int, help="seed (overrides config)")
    ap.add_argument("--threads", type=int, help="trajectory-chunk threads")
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0

    manifest = {"version": __version__, "status": "failed"}
    out_dir = args.out or "."
    try:
        cfg = load_config(args.config, seed_override=args.seed, out_override=args.out)
        out_dir = cfg["out_dir"]
        os.makedirs(out_dir, exist_ok=True)
        manifest.update({
            "config_sha256": hashlib.sha256(cfg["raw"].encode()).hexdigest(),
            "seed": cfg["seed"], "kind": cfg["kind"],
            "versions": {"wavephase": __version__, "numpy": np.__version__,
                         "scipy": __import__("scipy").__version__,
                         "python": sys.version.split()[0]},
        })
        result = run_experiment(cfg, threads=_threads(args.threads))
        manifest.update({"status": "ok", "result": _jsonable(result)})
        write_json(os.path.join(out_dir, "manifest.json"), manifest)
        return 0
    except ConfigError as e:
        manifest["error"] = str(e)
        _try_write_manifest(out_dir, manifest)
        print(f"{args.config}:{e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime/model failures
        manifest["error"] = f"{type(e).__name__}: {e}"
        _try_write_manifest(out_dir, manifest)
        print(f"error: {manifest['error']}", file=sys.stderr)
        return 1


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _try_write_manifest(out_dir, manifest):
    try:
        os.makedirs(out_dir, exist_ok=True)
        write_json(os.path.join(out_dir, "manifest.json"), manifest)
    except OSError:
        pass


if __name__ == "__main__":
    sys.exit(main())
