"""Experiment runner: config validation, chain orchestration, outputs.

A run takes a JSON config, spins up independent chains in worker
processes (seeds derived as seed + chain index), writes one trace CSV
per chain, a merged summary JSON, and plot-data CSVs.  Everything is
deterministic given (config, seed): rerunning produces byte-identical
files.
"""

import csv
import json
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .diagnostics import (
    acceptance_rate_from_flags,
    autocorrelation,
    summarize_chains,
)
from .estimators import (
    AisEstimator,
    CountingEstimator,
    DiIsEstimator,
    GpIsEstimator,
    ToyGaussianEstimator,
)
from .mcmc_core import (
    AdaptationConfig,
    ProposalConfig,
    build_kernel,
    init_chain_state,
    run_chain,
)
from .models.gp_probit import GpProbitModel, gp_synthetic_data, load_csv_dataset
from .models.ising import IsingSpec, cftp_exact_sample
from .random_db import BaseSpace, RandomDb, SeedContext
from .slice_kernels import SliceConfig

EXPERIMENTS = ("toy", "toy-stepsize-sweep", "ising", "gp")
KERNEL_GRAMMAR = "pm-mh | noisy-ss | apm-(mi|ss)+(mh|ss)"
KERNEL_NAMES = (
    "pm-mh", "noisy-ss",
    "apm-mi+mh", "apm-mi+ss", "apm-ss+mh", "apm-ss+ss",
)
PROPOSAL_KERNELS = ("pm-mh", "apm-mi+mh", "apm-ss+mh")

_SLICE_KEYS = {"w", "step_out", "max_shrink", "collapse_width"}
_ADAPT_KEYS = {
    "adapt_iters", "target_low", "target_high",
    "scale_up", "scale_down", "window",
}
_TOP_KEYS = {
    "experiment", "kernel", "seed", "n_iters", "n_chains", "thin",
    "burn_in", "model", "proposal", "slice", "u_slice", "adaptation",
    "theta_slice_mode", "ais_k", "sweep",
}


# -- configuration ----------------------------------------------------------

def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return (_is_int(v) or isinstance(v, float)) and math.isfinite(v)


def _experiment_defaults(experiment):
    if experiment in ("toy", "toy-stepsize-sweep"):
        return {
            "model": {"dim": 5},
            "proposal": {"sigma": 0.85},
            "slice": {"w": 4.0},
            "theta_slice_mode": "random",
        }
    if experiment == "ising":
        return {
            "model": {
                "width": 10, "height": 10,
                "theta_true": [0.3, 0.0],
                "data_seed": 7,
                "j_max": 0.4, "h_max": 1.0,
                "max_depth": 1 << 20,
            },
            "proposal": {"sigma": 0.04},
            "slice": {"w": 0.1},
            "theta_slice_mode": "coordinate",
        }
    return {
        "model": {
            "n": 50, "d": 2,
            "true_sigma": 1.5, "true_tau": 0.8,
            "data_seed": 11,
            "n_importance": 16,
            "prior_shape": 1.0, "prior_rate": 0.1,
            "jitter": 1e-8,
        },
        "proposal": {"sigma": 0.25},
        "slice": {"w": 1.0},
        "theta_slice_mode": "coordinate",
    }


def fill_defaults(config):
    """Return a copy of the config with every omitted key filled in."""
    out = dict(config)
    experiment = out.get("experiment")
    defaults = _experiment_defaults(
        experiment if experiment in EXPERIMENTS else "toy"
    )
    out.setdefault("n_chains", 1)
    out.setdefault("thin", 1)
    out.setdefault("burn_in", 0)
    out.setdefault("ais_k", 0)
    out.setdefault("adaptation", None)
    out.setdefault("theta_slice_mode", defaults["theta_slice_mode"])

    model = dict(defaults["model"])
    user_model = out.get("model") or {}
    if isinstance(user_model, dict):
        if experiment == "gp" and "path" in user_model:
            # a dataset file replaces the synthetic-data keys entirely
            for k in ("n", "d", "true_sigma", "true_tau", "data_seed"):
                model.pop(k, None)
        model.update(user_model)
    else:
        model = user_model
    out["model"] = model

    for key in ("proposal", "slice"):
        sub = dict(defaults[key]) if key == "proposal" else {
            "w": defaults["slice"]["w"], "step_out": False,
            "max_shrink": 100, "collapse_width": None,
        }
        user_sub = out.get(key)
        if isinstance(user_sub, dict):
            sub.update(user_sub)
        elif user_sub is not None:
            sub = user_sub
        out[key] = sub

    u_slice = {"w": 1.0, "step_out": False,
               "max_shrink": 100, "collapse_width": None}
    user_u = out.get("u_slice")
    if isinstance(user_u, dict):
        u_slice.update(user_u)
    elif user_u is not None:
        u_slice = user_u
    out["u_slice"] = u_slice

    if experiment == "toy-stepsize-sweep":
        sweep = {
            "sigmas": [0.05, 0.1, 0.2, 0.4, 0.85, 1.5, 2.0],
            "kernels": ["pm-mh", "apm-mi+mh"],
        }
        user_sweep = out.get("sweep")
        if isinstance(user_sweep, dict):
            sweep.update(user_sweep)
        elif user_sweep is not None:
            sweep = user_sweep
        out["sweep"] = sweep
    else:
        out.setdefault("sweep", None)
    return out


def _check_slice_section(cfg, name, errors):
    sub = cfg.get(name)
    if not isinstance(sub, dict):
        errors.append(f"{name}: must be an object")
        return
    for key in sorted(set(sub) - _SLICE_KEYS):
        errors.append(f"{name}.{key}: unknown key")
    w = sub.get("w")
    if w is not None and (not _is_num(w) or w <= 0):
        errors.append(f"{name}.w: must be a positive number")
    ms = sub.get("max_shrink")
    if ms is not None and (not _is_int(ms) or ms < 1):
        errors.append(f"{name}.max_shrink: must be a positive integer")
    cw = sub.get("collapse_width")
    if cw is not None and (not _is_num(cw) or cw <= 0):
        errors.append(f"{name}.collapse_width: must be positive or null")
    so = sub.get("step_out")
    if so is not None and not isinstance(so, bool):
        errors.append(f"{name}.step_out: must be true or false")


def _check_model_section(cfg, errors):
    experiment = cfg.get("experiment")
    model = cfg.get("model")
    if not isinstance(model, dict):
        errors.append("model: must be an object")
        return

    def want_pos_int(key):
        v = model.get(key)
        if not _is_int(v) or v < 1:
            errors.append(f"model.{key}: must be a positive integer")

    def want_pos_num(key):
        v = model.get(key)
        if not _is_num(v) or v <= 0:
            errors.append(f"model.{key}: must be a positive number")

    if experiment in ("toy", "toy-stepsize-sweep"):
        for key in sorted(set(model) - {"dim"}):
            errors.append(f"model.{key}: unknown key for experiment toy")
        want_pos_int("dim")
    elif experiment == "ising":
        known = {"width", "height", "theta_true", "data_seed",
                 "j_max", "h_max", "max_depth"}
        for key in sorted(set(model) - known):
            errors.append(f"model.{key}: unknown key for experiment ising")
        want_pos_int("width")
        want_pos_int("height")
        want_pos_int("max_depth")
        want_pos_num("j_max")
        want_pos_num("h_max")
        if not _is_int(model.get("data_seed")):
            errors.append("model.data_seed: must be an integer")
        tt = model.get("theta_true")
        if (not isinstance(tt, list) or len(tt) != 2
                or not all(_is_num(v) for v in tt)):
            errors.append(
                "model.theta_true: must be [coupling, field] numbers"
            )
        elif _is_num(model.get("j_max")) and _is_num(model.get("h_max")):
            if not (0.0 < tt[0] < model["j_max"]):
                errors.append(
                    "model.theta_true: coupling must lie inside the prior box"
                )
            if not (abs(tt[1]) < model["h_max"]):
                errors.append(
                    "model.theta_true: field must lie inside the prior box"
                )
    elif experiment == "gp":
        known = {"path", "n", "d", "true_sigma", "true_tau", "data_seed",
                 "n_importance", "prior_shape", "prior_rate", "jitter"}
        for key in sorted(set(model) - known):
            errors.append(f"model.{key}: unknown key for experiment gp")
        if "path" in model:
            if not isinstance(model["path"], str):
                errors.append("model.path: must be a string")
            elif not Path(model["path"]).is_file():
                errors.append(f"model.path: no such file: {model['path']}")
        else:
            want_pos_int("n")
            want_pos_int("d")
            want_pos_num("true_sigma")
            want_pos_num("true_tau")
            if not _is_int(model.get("data_seed")):
                errors.append("model.data_seed: must be an integer")
        want_pos_int("n_importance")
        want_pos_num("prior_shape")
        want_pos_num("prior_rate")
        want_pos_num("jitter")


def validate_config_dict(config):
    """Validate a parsed config, returning (resolved, error list).

    Every violation is reported, not just the first.
    """
    errors = []
    if not isinstance(config, dict):
        return None, ["config: top level must be a JSON object"]
    for key in sorted(set(config) - _TOP_KEYS):
        errors.append(f"{key}: unknown key")

    experiment = config.get("experiment")
    if experiment not in EXPERIMENTS:
        errors.append(
            f"experiment: must be one of {', '.join(EXPERIMENTS)}"
        )
    cfg = fill_defaults(config)

    sweep_mode = experiment == "toy-stepsize-sweep"
    kernel = cfg.get("kernel")
    if sweep_mode:
        if kernel is not None and kernel not in KERNEL_NAMES:
            errors.append(f"kernel: does not match grammar {KERNEL_GRAMMAR}")
    elif kernel not in KERNEL_NAMES:
        errors.append(f"kernel: does not match grammar {KERNEL_GRAMMAR}")

    if not _is_int(cfg.get("seed")):
        errors.append("seed: must be an integer")
    if not _is_int(cfg.get("n_iters")) or cfg.get("n_iters", 0) < 1:
        errors.append("n_iters: must be a positive integer")
    if not _is_int(cfg.get("n_chains")) or cfg.get("n_chains", 0) < 1:
        errors.append("n_chains: must be a positive integer")
    if not _is_int(cfg.get("thin")) or cfg.get("thin", 0) < 1:
        errors.append("thin: must be a positive integer")
    if not _is_int(cfg.get("burn_in")) or cfg.get("burn_in", 0) < 0:
        errors.append("burn_in: must be a nonnegative integer")
    if not _is_int(cfg.get("ais_k")) or cfg.get("ais_k", 0) < 0:
        errors.append("ais_k: must be a nonnegative integer")
    if cfg.get("ais_k", 0) > 0 and experiment != "ising":
        errors.append("ais_k: only meaningful for the ising experiment")
    if cfg.get("theta_slice_mode") not in ("coordinate", "random"):
        errors.append("theta_slice_mode: must be 'coordinate' or 'random'")

    prop = cfg.get("proposal")
    if not isinstance(prop, dict):
        errors.append("proposal: must be an object")
    else:
        for key in sorted(set(prop) - {"sigma"}):
            errors.append(f"proposal.{key}: unknown key")
        sigma = prop.get("sigma")
        if _is_num(sigma):
            if sigma <= 0:
                errors.append("proposal.sigma: must be positive")
        elif isinstance(sigma, list):
            if not sigma or not all(_is_num(v) and v > 0 for v in sigma):
                errors.append("proposal.sigma: entries must be positive")
        else:
            errors.append("proposal.sigma: must be a number or list")

    _check_slice_section(cfg, "slice", errors)
    _check_slice_section(cfg, "u_slice", errors)

    adapt = cfg.get("adaptation")
    if adapt is not None:
        if not isinstance(adapt, dict):
            errors.append("adaptation: must be an object or null")
        else:
            for key in sorted(set(adapt) - _ADAPT_KEYS):
                errors.append(f"adaptation.{key}: unknown key")
            ai = adapt.get("adapt_iters")
            if not _is_int(ai) or ai < 0:
                errors.append(
                    "adaptation.adapt_iters: must be a nonnegative integer"
                )
            elif _is_int(cfg.get("burn_in")) and ai > cfg["burn_in"]:
                errors.append(
                    "adaptation.adapt_iters: must not exceed burn_in"
                )

    _check_model_section(cfg, errors)

    sweep = cfg.get("sweep")
    if sweep_mode:
        if not isinstance(sweep, dict):
            errors.append("sweep: must be an object")
        else:
            for key in sorted(set(sweep) - {"sigmas", "kernels"}):
                errors.append(f"sweep.{key}: unknown key")
            sigmas = sweep.get("sigmas")
            if (not isinstance(sigmas, list) or not sigmas
                    or not all(_is_num(v) and v > 0 for v in sigmas)):
                errors.append("sweep.sigmas: must be positive numbers")
            kernels = sweep.get("kernels")
            if not isinstance(kernels, list) or not kernels:
                errors.append("sweep.kernels: must be a nonempty list")
            else:
                for name in kernels:
                    if name not in KERNEL_NAMES:
                        errors.append(
                            f"sweep.kernels: {name!r} does not match "
                            f"grammar {KERNEL_GRAMMAR}"
                        )
                    elif name not in PROPOSAL_KERNELS:
                        errors.append(
                            f"sweep.kernels: {name!r} has no step size "
                            "to sweep"
                        )
    elif sweep is not None:
        errors.append("sweep: only valid for experiment toy-stepsize-sweep")

    return (cfg if not errors else None), errors


def validate_config(path):
    """Load and validate a JSON config file.

    Parse failures are reported with the line and column from the JSON
    decoder.
    """
    try:
        with open(path) as fh:
            raw = fh.read()
    except OSError as e:
        return None, [f"{path}: {e.strerror or e}"]
    try:
        parsed = json.loads(raw)
    except json.JSONDecodeError as e:
        return None, [f"{path}:{e.lineno}:{e.colno}: {e.msg}"]
    resolved, errors = validate_config_dict(parsed)
    return resolved, [f"{path}: {msg}" for msg in errors]


# -- problem assembly -------------------------------------------------------

class _FiniteOnError:
    """Treat numerical estimator failures as zero density.

    A proposal whose covariance factorization or mode search fails is
    rejected rather than crashing the chain.
    """

    def __init__(self, inner):
        self.inner = inner

    @property
    def base_space(self):
        return self.inner.base_space

    def evaluate(self, theta, db):
        try:
            return self.inner.evaluate(theta, db)
        except RuntimeError:
            return -math.inf


def param_names_for(config):
    experiment = config["experiment"]
    if experiment == "ising":
        return ["theta_J", "theta_h"]
    if experiment == "gp":
        return ["sigma", "tau"]
    return [f"theta_{i}" for i in range(config["model"]["dim"])]


def ising_observation(model):
    """The observed lattice: one exact draw at the generating parameters."""
    db = RandomDb.fresh(SeedContext(model["data_seed"]), BaseSpace.UNIT_UNIFORM)
    return cftp_exact_sample(
        model["width"], model["height"],
        model["theta_true"][0], model["theta_true"][1],
        db, max_depth=model["max_depth"],
    )


def gp_dataset(model):
    if "path" in model:
        return load_csv_dataset(model["path"])
    x, y, _ = gp_synthetic_data(
        model["n"], model["d"],
        model["true_sigma"], model["true_tau"], model["data_seed"],
    )
    return x, y


def build_estimator(config):
    experiment = config["experiment"]
    model = config["model"]
    if experiment in ("toy", "toy-stepsize-sweep"):
        return ToyGaussianEstimator(model["dim"])
    if experiment == "ising":
        y = ising_observation(model)
        spec = IsingSpec(
            model["width"], model["height"], y,
            j_hi=model["j_max"],
            h_lo=-model["h_max"], h_hi=model["h_max"],
        )
        ref = np.asarray(model["theta_true"], dtype=float)
        if config["ais_k"] > 0:
            return AisEstimator(
                spec, ref, config["ais_k"], max_depth=model["max_depth"]
            )
        return DiIsEstimator(spec, ref, max_depth=model["max_depth"])
    x, y = gp_dataset(model)
    gp = GpProbitModel(
        x, y, prior_shape=model["prior_shape"],
        prior_rate=model["prior_rate"], jitter=model["jitter"],
    )
    return _FiniteOnError(GpIsEstimator(gp, n_importance=model["n_importance"]))


def initial_theta(config, rng):
    """Per-chain start point, overdispersed where the prior is proper."""
    experiment = config["experiment"]
    model = config["model"]
    if experiment == "ising":
        j_max, h_max = model["j_max"], model["h_max"]
        return np.array([
            rng.uniform(0.05 * j_max, 0.95 * j_max),
            rng.uniform(-0.9 * h_max, 0.9 * h_max),
        ])
    if experiment == "gp":
        return np.exp(0.25 * rng.standard_normal(2))
    return rng.standard_normal(model["dim"])


def _make_configs(config):
    slice_cfg = SliceConfig(
        w=config["slice"]["w"],
        step_out=config["slice"]["step_out"],
        max_shrink=config["slice"]["max_shrink"],
        collapse_width=config["slice"]["collapse_width"],
    )
    u_cfg = SliceConfig(
        w=config["u_slice"]["w"],
        step_out=config["u_slice"]["step_out"],
        max_shrink=config["u_slice"]["max_shrink"],
        collapse_width=config["u_slice"]["collapse_width"],
    )
    sigma = config["proposal"]["sigma"]
    proposal = ProposalConfig(
        sigma=np.asarray(sigma, dtype=float)
        if isinstance(sigma, list) else float(sigma)
    )
    adapt = config["adaptation"]
    adaptation = None
    if adapt is not None:
        adaptation = AdaptationConfig(
            adapt_iters=adapt["adapt_iters"],
            target_low=adapt.get("target_low", 0.15),
            target_high=adapt.get("target_high", 0.3),
            scale_up=adapt.get("scale_up", 1.1),
            scale_down=adapt.get("scale_down", 0.9),
            window=adapt.get("window", 100),
        )
    return slice_cfg, u_cfg, proposal, adaptation


# -- chain workers ----------------------------------------------------------

def _flag_str(flag):
    return "" if flag is None else str(int(bool(flag)))


def _write_trace_csv(path, param_names, records):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([
            "iter", *param_names, "log_f_hat",
            "accepted_u", "accepted_theta", "cum_estimator_evals",
        ])
        for r in records:
            writer.writerow([
                r.iter,
                *[repr(float(v)) for v in r.theta],
                repr(float(r.log_f_hat)),
                _flag_str(r.accepted_u),
                _flag_str(r.accepted_theta),
                r.n_estimator_evals,
            ])


def _run_single_chain(config, chain_index, out_dir):
    seed = config["seed"] + chain_index
    rng = np.random.default_rng(seed)
    estimator = CountingEstimator(build_estimator(config))
    theta0 = initial_theta(config, rng)
    state = init_chain_state(estimator, theta0, SeedContext(seed))
    slice_cfg, u_cfg, proposal, adaptation = _make_configs(config)
    kernel = build_kernel(
        config["kernel"], u_slice=u_cfg, theta_slice=slice_cfg,
        theta_slice_mode=config["theta_slice_mode"],
    )
    result = run_chain(
        kernel, estimator, state, config["n_iters"], rng,
        thin=config["thin"], burn_in=config["burn_in"],
        proposal=proposal, adaptation=adaptation,
    )
    path = Path(out_dir) / f"chain_{chain_index:02d}.csv"
    _write_trace_csv(path, param_names_for(config), result.records)
    final_sigma = None
    if result.final_proposal is not None:
        s = result.final_proposal.sigma
        final_sigma = (
            [float(v) for v in np.atleast_1d(s)]
            if isinstance(s, np.ndarray) else float(s)
        )
    return {
        "chain": chain_index,
        "theta": np.stack([r.theta for r in result.records])
        if result.records else np.zeros((0, len(theta0))),
        "accepted_u": [r.accepted_u for r in result.records],
        "accepted_theta": [r.accepted_theta for r in result.records],
        "n_evals": estimator.n_evals,
        "final_sigma": final_sigma,
    }


def _chain_worker(config, chain_index, out_dir):
    try:
        payload = _run_single_chain(config, chain_index, out_dir)
        payload["ok"] = True
        return payload
    except Exception as e:  # propagate as data: partial runs survive
        return {
            "chain": chain_index, "ok": False,
            "error": f"{type(e).__name__}: {e}",
            "traceback": traceback.format_exc(),
        }


def _sweep_worker(config, kernel_name, sigma, cell_seed):
    try:
        cell = dict(config)
        cell["kernel"] = kernel_name
        cell["proposal"] = {"sigma": sigma}
        cell["seed"] = cell_seed
        rng = np.random.default_rng(cell_seed)
        estimator = build_estimator(cell)
        theta0 = initial_theta(cell, rng)
        state = init_chain_state(estimator, theta0, SeedContext(cell_seed))
        slice_cfg, u_cfg, proposal, _ = _make_configs(cell)
        kernel = build_kernel(
            kernel_name, u_slice=u_cfg, theta_slice=slice_cfg,
            theta_slice_mode=cell["theta_slice_mode"],
        )
        result = run_chain(
            kernel, estimator, state, cell["n_iters"], rng,
            thin=1, burn_in=cell["burn_in"], proposal=proposal,
        )
        rate = acceptance_rate_from_flags(
            [r.accepted_theta for r in result.records]
        )
        return {
            "ok": True, "kernel": kernel_name, "sigma": sigma,
            "acceptance_rate": rate,
        }
    except Exception as e:
        return {
            "ok": False, "kernel": kernel_name, "sigma": sigma,
            "error": f"{type(e).__name__}: {e}",
            "traceback": traceback.format_exc(),
        }


def _run_parallel(tasks, max_workers):
    """Run (fn, args) tasks, preserving order; inline when singular."""
    if len(tasks) == 1 or max_workers == 1:
        return [fn(*args) for fn, args in tasks]
    workers = min(len(tasks), max_workers)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *args) for fn, args in tasks]
        return [f.result() for f in futures]


# -- experiment drivers -----------------------------------------------------

def _json_dump(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_histogram_csv(path, pooled, n_bins=50):
    density, edges = np.histogram(pooled, bins=n_bins, density=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "density"])
        for i in range(n_bins):
            writer.writerow([
                repr(float(edges[i])), repr(float(edges[i + 1])),
                repr(float(density[i])),
            ])


def _write_autocorr_csv(path, chains_1d, thin, relative_cost):
    n = min(c.size for c in chains_1d)
    max_lag = min(500, n - 1)
    if max_lag < 1:
        return
    rho = np.mean(
        [autocorrelation(c[:n], max_lag) for c in chains_1d], axis=0
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lag", "cost_scaled_lag", "autocorrelation"])
        for k in range(max_lag + 1):
            writer.writerow([
                k * thin,
                repr(float(k * thin * relative_cost)),
                repr(float(rho[k])),
            ])


def _reduce_chain_outputs(config, results, out_dir):
    ok = [r for r in results if r["ok"]]
    names = param_names_for(config)
    thetas = [r["theta"] for r in ok if r["theta"].shape[0] > 0]
    acceptance = {}
    for key in ("u", "theta"):
        flags = [f for r in ok for f in r[f"accepted_{key}"]]
        rate = acceptance_rate_from_flags(flags) if flags else None
        if rate is not None:
            acceptance[key] = rate
    total_evals = sum(r["n_evals"] for r in ok)
    total_iters = config["n_iters"] * max(len(ok), 1)
    relative_cost = total_evals / total_iters if total_iters else 0.0

    summary = {
        "experiment": config["experiment"],
        "kernel": config["kernel"],
        "seed": config["seed"],
        "n_iters": config["n_iters"],
        "burn_in": config["burn_in"],
        "thin": config["thin"],
        "relative_cost_per_iteration": relative_cost,
        "final_sigma": [r["final_sigma"] for r in ok],
        "failed_chains": sorted(r["chain"] for r in results if not r["ok"]),
    }
    if thetas:
        merged = summarize_chains(
            thetas, acceptance_rate=acceptance,
            n_estimator_evals=total_evals, param_names=names,
        )
        summary.update(merged.to_dict())
        for i, name in enumerate(names):
            pooled = np.concatenate([t[:, i] for t in thetas])
            _write_histogram_csv(Path(out_dir) / f"hist_{name}.csv", pooled)
            _write_autocorr_csv(
                Path(out_dir) / f"autocorr_{name}.csv",
                [t[:, i] for t in thetas],
                config["thin"], relative_cost,
            )
    _json_dump(Path(out_dir) / "summary.json", summary)


def _run_standard(config, out_dir, max_workers):
    tasks = [
        (_chain_worker, (config, i, str(out_dir)))
        for i in range(config["n_chains"])
    ]
    results = _run_parallel(tasks, max_workers)
    results.sort(key=lambda r: r["chain"])
    _reduce_chain_outputs(config, results, out_dir)
    return [r for r in results if not r["ok"]]


def _run_sweep(config, out_dir, max_workers):
    sweep = config["sweep"]
    cells = [
        (kernel, sigma)
        for kernel in sweep["kernels"] for sigma in sweep["sigmas"]
    ]
    tasks = [
        (_sweep_worker, (config, kernel, sigma, config["seed"] + i))
        for i, (kernel, sigma) in enumerate(cells)
    ]
    results = _run_parallel(tasks, max_workers)
    curves = {}
    for r in results:
        if r["ok"]:
            curves.setdefault(r["kernel"], []).append(
                (r["sigma"], r["acceptance_rate"])
            )
    for kernel, points in curves.items():
        points.sort()
        path = Path(out_dir) / f"acceptance_curve_{kernel}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sigma", "acceptance_rate"])
            for sigma, rate in points:
                writer.writerow([repr(float(sigma)), repr(float(rate))])
    _json_dump(Path(out_dir) / "summary.json", {
        "experiment": config["experiment"],
        "seed": config["seed"],
        "n_iters": config["n_iters"],
        "burn_in": config["burn_in"],
        "curves": {
            kernel: [
                {"sigma": s, "acceptance_rate": a} for s, a in points
            ]
            for kernel, points in sorted(curves.items())
        },
    })
    return [r for r in results if not r["ok"]]


def run_experiment(config, out_dir, max_workers=None):
    """Run a validated config, writing all outputs under out_dir.

    Returns a dict with ok, out_dir, and any per-chain errors; partial
    outputs stay on disk and failures land in errors.json.
    """
    resolved, errors = validate_config_dict(config)
    if errors:
        raise ValueError("invalid config: " + "; ".join(errors))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _json_dump(out_dir / "config.json", resolved)
    if max_workers is None:
        max_workers = min(os.cpu_count() or 1, resolved["n_chains"] or 1, 8)
        if resolved["experiment"] == "toy-stepsize-sweep":
            max_workers = min(os.cpu_count() or 1, 8)

    if resolved["experiment"] == "toy-stepsize-sweep":
        failures = _run_sweep(resolved, out_dir, max_workers)
    else:
        failures = _run_standard(resolved, out_dir, max_workers)

    if failures:
        _json_dump(out_dir / "errors.json", failures)
    return {
        "ok": not failures,
        "out_dir": str(out_dir),
        "errors": failures,
    }


# -- trace re-analysis ------------------------------------------------------

def _parse_flag(text):
    return None if text == "" else bool(int(text))


def read_trace_csv(path):
    """Read one trace CSV back into arrays (exact float round-trip)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    try:
        lf_col = header.index("log_f_hat")
    except ValueError:
        raise ValueError(f"{path}: not a trace CSV (no log_f_hat column)")
    names = header[1:lf_col]
    theta = np.array(
        [[float(v) for v in row[1:lf_col]] for row in rows]
    ).reshape(len(rows), len(names))
    return {
        "param_names": names,
        "iter": np.array([int(r[0]) for r in rows], dtype=np.int64),
        "theta": theta,
        "log_f_hat": np.array([float(r[lf_col]) for r in rows]),
        "accepted_u": [_parse_flag(r[lf_col + 1]) for r in rows],
        "accepted_theta": [_parse_flag(r[lf_col + 2]) for r in rows],
        "cum_estimator_evals": np.array(
            [int(r[lf_col + 3]) for r in rows], dtype=np.int64
        ),
    }


def diagnose_traces(trace_dir):
    """Recompute the summary JSON from the trace CSVs in a directory."""
    trace_dir = Path(trace_dir)
    paths = sorted(trace_dir.glob("chain_*.csv"))
    if not paths:
        raise FileNotFoundError(f"no chain_*.csv files in {trace_dir}")
    traces = [read_trace_csv(p) for p in paths]
    names = traces[0]["param_names"]
    if any(t["param_names"] != names for t in traces):
        raise ValueError("trace CSVs disagree on parameter columns")
    n = min(t["theta"].shape[0] for t in traces)
    acceptance = {}
    for key in ("u", "theta"):
        flags = [f for t in traces for f in t[f"accepted_{key}"]]
        rate = acceptance_rate_from_flags(flags) if flags else None
        if rate is not None:
            acceptance[key] = rate
    total_evals = sum(
        int(t["cum_estimator_evals"][-1]) for t in traces
        if t["cum_estimator_evals"].size
    )
    merged = summarize_chains(
        [t["theta"][:n] for t in traces],
        acceptance_rate=acceptance,
        n_estimator_evals=total_evals, param_names=names,
    )
    summary = merged.to_dict()
    summary["source"] = [p.name for p in paths]
    _json_dump(trace_dir / "summary.json", summary)
    return summary
