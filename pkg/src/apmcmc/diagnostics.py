"""Chain-quality statistics over completed traces.

All functions are pure and operate on plain arrays so they can be
applied per parameter and per chain independently.
"""

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ChainSummary",
    "acceptance_rate_from_flags",
    "autocorrelation",
    "cost_scaled_lags",
    "ess",
    "is_degenerate_series",
    "max_stick_run",
    "r_hat",
    "summarize_chains",
]


def is_degenerate_series(series):
    """True when the series carries no usable variation."""
    x = np.asarray(series, dtype=float)
    if x.size < 2 or not np.all(np.isfinite(x)):
        return True
    return bool(np.ptp(x) == 0.0)


def autocorrelation(series, max_lag):
    """Biased (divide-by-N) sample autocorrelation at lags 0..max_lag.

    A degenerate series yields 1 at lag 0 and 0 elsewhere so callers
    can still plot something; pair it with is_degenerate_series.
    """
    x = np.asarray(series, dtype=float)
    if max_lag < 0:
        raise ValueError("max_lag must be nonnegative")
    if x.size <= max_lag:
        raise ValueError(
            f"series length {x.size} must exceed max_lag {max_lag}"
        )
    out = np.zeros(max_lag + 1)
    out[0] = 1.0
    if is_degenerate_series(x):
        return out
    xc = x - x.mean()
    # FFT autocovariance; circular wrap removed by zero padding
    m = 1 << int(2 * x.size - 1).bit_length()
    f = np.fft.rfft(xc, m)
    acov = np.fft.irfft(f * np.conj(f), m)[: max_lag + 1] / x.size
    if acov[0] <= 0.0:
        return out
    np.clip(acov / acov[0], -1.0, 1.0, out=out)
    out[0] = 1.0
    return out


def _integrated_autocorr_time(x):
    """Initial-positive-sequence truncation over paired lags.

    Pairs (rho_2k, rho_2k+1) are summed while the pair sums stay
    positive; this keeps the estimate consistent and lets genuinely
    anticorrelated series report a time below 1.
    """
    n = x.size
    rho = autocorrelation(x, n - 1)
    pair_sums = rho[: 2 * (n // 2)].reshape(-1, 2).sum(axis=1)
    bad = np.nonzero(pair_sums <= 0.0)[0]
    cutoff = bad[0] if bad.size else pair_sums.size
    tau = -1.0 + 2.0 * float(pair_sums[:cutoff].sum())
    return max(tau, 1e-12)


def ess(series):
    """Effective sample size N / (1 + 2 * truncated autocorrelations).

    Degenerate series report 0. Anticorrelated series may exceed the
    sample count; that is reported as-is rather than clipped.
    """
    x = np.asarray(series, dtype=float)
    if x.size < 100:
        raise ValueError(f"need at least 100 samples, got {x.size}")
    if is_degenerate_series(x):
        return 0.0
    return x.size / _integrated_autocorr_time(x)


def r_hat(chains):
    """Classic potential scale reduction over >= 2 equal-length chains.

    Returns nan when within-chain variance vanishes (degenerate).
    """
    arrays = [np.asarray(c, dtype=float) for c in chains]
    if len(arrays) < 2:
        raise ValueError("need at least 2 chains")
    n = arrays[0].size
    if any(a.size != n for a in arrays):
        raise ValueError("chains must have equal length")
    if n < 100:
        raise ValueError(f"need at least 100 samples per chain, got {n}")
    w = float(np.mean([a.var(ddof=1) for a in arrays]))
    if w <= 0.0 or not math.isfinite(w):
        return math.nan
    means = np.array([a.mean() for a in arrays])
    b_over_n = float(means.var(ddof=1))
    return math.sqrt(((n - 1) / n * w + b_over_n) / w)


def cost_scaled_lags(autocorr, relative_cost):
    """Pairs (lag * relative_cost, value) for cost-comparable plots.

    relative_cost is the per-iteration estimator-evaluation count of
    this kernel divided by the baseline's.
    """
    if relative_cost <= 0.0:
        raise ValueError("relative_cost must be positive")
    values = np.asarray(autocorr, dtype=float)
    lags = np.arange(values.size) * float(relative_cost)
    return np.column_stack([lags, values])


def max_stick_run(theta_trace):
    """Longest run of consecutive iterations with unchanged parameters."""
    trace = np.asarray(theta_trace)
    if trace.size == 0:
        raise ValueError("empty trace")
    flat = trace.reshape(trace.shape[0], -1)
    if flat.shape[0] == 1:
        return 1
    same = np.all(flat[1:] == flat[:-1], axis=1)
    best = run = 1
    for s in same:
        run = run + 1 if s else 1
        if run > best:
            best = run
    return best


def acceptance_rate_from_flags(flags):
    """Mean of the recorded flags, ignoring iterations without one.

    Returns None when no iteration recorded this flag at all (the
    kernel has no such sub-update).
    """
    seen = [bool(f) for f in flags if f is not None]
    if not seen:
        return None
    return float(np.mean(seen))


@dataclass
class ChainSummary:
    """Merged quality report across chains, JSON-serializable."""

    n_chains: int
    n_samples: int
    param_names: list
    ess: np.ndarray
    r_hat: np.ndarray
    acceptance_rate: dict
    n_estimator_evals: int
    max_stick_run: int
    degenerate_params: list = field(default_factory=list)
    super_efficient_params: list = field(default_factory=list)

    def to_dict(self):
        def opt(v):
            return None if math.isnan(v) else float(v)

        return {
            "n_chains": self.n_chains,
            "n_samples": self.n_samples,
            "parameters": [
                {
                    "name": name,
                    "ess": opt(self.ess[i]),
                    "r_hat": opt(self.r_hat[i]),
                    "degenerate": name in self.degenerate_params,
                }
                for i, name in enumerate(self.param_names)
            ],
            "acceptance_rate": dict(self.acceptance_rate),
            "n_estimator_evals": int(self.n_estimator_evals),
            "max_stick_run": int(self.max_stick_run),
            "super_efficient_params": list(self.super_efficient_params),
        }


def summarize_chains(theta_chains, acceptance_rate=None,
                     n_estimator_evals=0, param_names=None):
    """Build a ChainSummary from per-chain (n_samples, dim) arrays.

    ESS is summed over chains; r_hat needs >= 2 chains and is nan
    otherwise. acceptance_rate is passed through as computed by the
    caller (sub-kernel flags live in the trace records).
    """
    stacks = [np.atleast_2d(np.asarray(c, dtype=float)) for c in theta_chains]
    if not stacks:
        raise ValueError("no chains given")
    dim = stacks[0].shape[1]
    if any(s.shape != stacks[0].shape for s in stacks):
        raise ValueError("chains must share a common shape")
    if param_names is None:
        param_names = [f"theta_{i}" for i in range(dim)]
    if len(param_names) != dim:
        raise ValueError("param_names length must match dimension")

    n_samples = stacks[0].shape[0]
    ess_vals = np.full(dim, math.nan)
    r_hat_vals = np.full(dim, math.nan)
    degenerate = []
    super_eff = []
    for i in range(dim):
        per_chain = [s[:, i] for s in stacks]
        if any(is_degenerate_series(c) for c in per_chain):
            degenerate.append(param_names[i])
            ess_vals[i] = 0.0
            continue
        if n_samples < 100:
            continue  # too short for a meaningful estimate
        ess_vals[i] = sum(ess(c) for c in per_chain)
        if len(per_chain) >= 2:
            r_hat_vals[i] = r_hat(per_chain)
        if ess_vals[i] > n_samples * len(per_chain):
            super_eff.append(param_names[i])

    stick = max(max_stick_run(s) for s in stacks)
    return ChainSummary(
        n_chains=len(stacks),
        n_samples=n_samples,
        param_names=list(param_names),
        ess=ess_vals,
        r_hat=r_hat_vals,
        acceptance_rate=dict(acceptance_rate or {}),
        n_estimator_evals=int(n_estimator_evals),
        max_stick_run=stick,
        degenerate_params=degenerate,
        super_efficient_params=super_eff,
    )
