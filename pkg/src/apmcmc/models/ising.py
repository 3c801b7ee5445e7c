"""Toroidal Ising lattice: heat-bath dynamics and a perfect sampler.

The lattice lives on a width*height torus with spins in {-1, +1}.  The
unnormalised density is

    g(x; theta_j, theta_h) = exp(theta_j * S_J(x) + theta_h * S_h(x))

where S_J sums x_i * x_j over the torus edges and S_h sums the spins.
Edges follow a fixed convention so every routine agrees on S_J: each
site owns its right neighbour edge when width > 1 and its down
neighbour edge when height > 1.  At extent 2 this counts each physical
pair twice, and a 1-wide or 1-tall direction contributes nothing; the
convention is part of the model definition here, not a bug to fix.

Exact samples come from coupling from the past run on summary states:
a third spin value 0 means "could be either".  A site resolves only
when the heat-bath draw lands outside the interval of acceptance
probabilities reachable by any assignment of its unknown neighbours,
so the summary trajectory always contains every true trajectory
started at the same past time.  Coalescence is checked at depths
1, 2, 4, ... with the randomness for sweep t reused across depths,
which is what makes the output a genuine draw from g's normalisation
and lets a caller replay it bit for bit from the same random db.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from apmcmc.random_db import RandomDb

_MAX_ENUM_SITES = 20


class CoalescenceError(RuntimeError):
    """Raised when coupling from the past exceeds its depth budget."""

    def __init__(self, theta_j, theta_h, depth):
        self.theta_j = theta_j
        self.theta_h = theta_h
        self.depth = depth
        super().__init__(
            f"no coalescence within {depth} sweeps at "
            f"theta_j={theta_j!r}, theta_h={theta_h!r}"
        )


@dataclass(frozen=True)
class IsingSpec:
    """Inference problem bundle: lattice size, observed data, prior box.

    ``y`` is the observed configuration, shape (height, width) with
    entries in {-1, +1}.  The prior on (theta_j, theta_h) is uniform
    over the given box.
    """

    width: int
    height: int
    y: np.ndarray
    j_lo: float = 0.0
    j_hi: float = 0.4
    h_lo: float = -1.0
    h_hi: float = 1.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("lattice extents must be >= 1")
        y = np.asarray(self.y, dtype=np.int8)
        if y.shape != (self.height, self.width):
            raise ValueError(
                f"y has shape {y.shape}, expected {(self.height, self.width)}"
            )
        if not np.all(np.abs(y) == 1):
            raise ValueError("y entries must be -1 or +1")
        y.setflags(write=False)
        object.__setattr__(self, "y", y)
        if not (self.j_lo < self.j_hi and self.h_lo < self.h_hi):
            raise ValueError("prior box must have positive extent")

    @property
    def n_sites(self):
        return self.width * self.height

    def in_prior_box(self, theta_j, theta_h):
        return (
            self.j_lo <= theta_j <= self.j_hi
            and self.h_lo <= theta_h <= self.h_hi
        )


def lattice_stats(x):
    """Sufficient statistics (S_J, S_h) of a configuration.

    ``x`` is (height, width) with entries +-1.  Returns plain ints, so
    callers get exact statistics they can feed into ratio computations
    without float noise.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError("expected a 2-d lattice")
    s_j = 0
    if x.shape[1] > 1:
        s_j += int(np.sum(x * np.roll(x, -1, axis=1), dtype=np.int64))
    if x.shape[0] > 1:
        s_j += int(np.sum(x * np.roll(x, -1, axis=0), dtype=np.int64))
    return s_j, int(np.sum(x, dtype=np.int64))


def ising_log_g(x, theta_j, theta_h):
    """Log unnormalised density theta_j * S_J(x) + theta_h * S_h(x)."""
    s_j, s_h = lattice_stats(x)
    return theta_j * s_j + theta_h * s_h


def edge_list(width, height):
    """Torus edges as (site_a, site_b) index pairs into the flat lattice.

    Built independently of the roll-based statistics so the two can be
    cross-checked; both follow the right-if-wide, down-if-tall owner
    convention.
    """
    edges = []
    for r in range(height):
        for c in range(width):
            a = r * width + c
            if width > 1:
                edges.append((a, r * width + (c + 1) % width))
            if height > 1:
                edges.append((a, ((r + 1) % height) * width + c))
    return edges


def heat_bath_prob(neighbour_sum, theta_j, theta_h):
    """P(spin becomes +1 | neighbour spin sum) under heat-bath dynamics."""
    return 1.0 / (1.0 + math.exp(-2.0 * (theta_j * neighbour_sum + theta_h)))


def gibbs_site_update(x, row, col, theta_j, theta_h, u):
    """Heat-bath update of one site in place; returns the new spin.

    Reference scalar form of what the compiled sweep kernels do.  The
    spin flips to +1 exactly when u < P(+1 | neighbours), so equal
    uniforms drive equal updates everywhere in this module.
    """
    h, w = x.shape
    s = 0
    if w > 1:
        s += int(x[row, (col - 1) % w]) + int(x[row, (col + 1) % w])
    if h > 1:
        s += int(x[(row - 1) % h, col]) + int(x[(row + 1) % h, col])
    spin = 1 if u < heat_bath_prob(s, theta_j, theta_h) else -1
    x[row, col] = spin
    return spin


@njit(cache=True, inline="always")
def _p_plus(s, theta_j, theta_h):
    return 1.0 / (1.0 + math.exp(-2.0 * (theta_j * s + theta_h)))


@njit(cache=True)
def _sweep_definite(lat, u_row, width, height, theta_j, theta_h):
    # One raster sweep over a definite lattice (flat int8, entries +-1).
    for r in range(height):
        for c in range(width):
            s = 0
            if width > 1:
                s += lat[r * width + (c - 1) % width]
                s += lat[r * width + (c + 1) % width]
            if height > 1:
                s += lat[((r - 1) % height) * width + c]
                s += lat[((r + 1) % height) * width + c]
            if u_row[r * width + c] < _p_plus(s, theta_j, theta_h):
                lat[r * width + c] = 1
            else:
                lat[r * width + c] = -1


@njit(cache=True)
def _sweep_summary(lat, u_row, width, height, theta_j, theta_h):
    # Raster sweep over a summary lattice (entries -1, 0=unknown, +1).
    # A site resolves only when its uniform clears the acceptance
    # probability for every assignment of the unknown neighbours; the
    # extremes of theta_j * s over those assignments are attained at
    # s_known +- n_unknown, so two probability evaluations bound them.
    for r in range(height):
        for c in range(width):
            s_known = 0
            n_unknown = 0
            if width > 1:
                left = lat[r * width + (c - 1) % width]
                right = lat[r * width + (c + 1) % width]
                s_known += left + right
                n_unknown += (left == 0) + (right == 0)
            if height > 1:
                up = lat[((r - 1) % height) * width + c]
                down = lat[((r + 1) % height) * width + c]
                s_known += up + down
                n_unknown += (up == 0) + (down == 0)
            u = u_row[r * width + c]
            if n_unknown == 0:
                if u < _p_plus(s_known, theta_j, theta_h):
                    lat[r * width + c] = 1
                else:
                    lat[r * width + c] = -1
            else:
                pa = _p_plus(s_known - n_unknown, theta_j, theta_h)
                pb = _p_plus(s_known + n_unknown, theta_j, theta_h)
                if pa > pb:
                    pa, pb = pb, pa
                if u < pa:
                    lat[r * width + c] = 1
                elif u >= pb:
                    lat[r * width + c] = -1
                else:
                    lat[r * width + c] = 0


@njit(cache=True)
def _run_summary(lat, u_rows, depth, width, height, theta_j, theta_h):
    # Sweep from depth steps in the past up to the present.  Row t-1 of
    # u_rows holds the uniforms for the sweep t steps back, so deeper
    # runs extend the past while replaying the recent sweeps verbatim.
    for t in range(depth, 0, -1):
        _sweep_summary(lat, u_rows[t - 1], width, height, theta_j, theta_h)
    for i in range(lat.size):
        if lat[i] == 0:
            return False
    return True


def gibbs_sweep(x, u_row, theta_j, theta_h):
    """One in-place raster heat-bath sweep of a definite lattice.

    ``x`` is (height, width) int8, ``u_row`` a flat array of
    width*height uniforms consumed in raster order.
    """
    h, w = x.shape
    u_row = np.ascontiguousarray(u_row, dtype=np.float64)
    if u_row.size != x.size:
        raise ValueError("need one uniform per site")
    _sweep_definite(x.reshape(-1), u_row, w, h, theta_j, theta_h)


def cftp_exact_sample(
    width, height, theta_j, theta_h, db, key_base=(), max_depth=1 << 20
):
    """Exact draw from the Ising distribution via coupling from the past.

    All randomness comes from ``db``: the uniforms for the sweep t
    steps before the present live under key_base + (t, site), so a
    replay with the same db returns the identical configuration.  The
    depth search always starts at one sweep and doubles; starting
    shallow never changes the draw because once the summary chain
    coalesces by some depth it coalesces from every deeper start, and
    it keeps each call's cost tied to the depth this (theta_j,
    theta_h) actually needs rather than the deepest the db has ever
    materialised.

    Raises CoalescenceError if depth would exceed ``max_depth``.
    """
    n = width * height
    depth = 1
    lat = np.empty(n, dtype=np.int8)
    while True:
        if depth > max_depth:
            raise CoalescenceError(theta_j, theta_h, max_depth)
        u_rows = db.dense2d(key_base, n, depth)
        lat[:] = 0
        if _run_summary(lat, u_rows, depth, width, height, theta_j, theta_h):
            return lat.reshape(height, width)
        depth *= 2


def ising_enumerate_logZ(width, height, theta_j, theta_h):
    """Exact log partition function by enumerating all configurations.

    Only feasible for small lattices; refuses more than 20 sites.
    """
    n = width * height
    if n > _MAX_ENUM_SITES:
        raise ValueError(f"enumeration capped at {_MAX_ENUM_SITES} sites")
    codes = np.arange(1 << n, dtype=np.uint32)
    # bit b of the code gives the spin at flat site b
    spins = np.where(
        (codes[:, None] >> np.arange(n, dtype=np.uint32)) & 1 > 0, 1, -1
    ).astype(np.int8)
    s_j = np.zeros(1 << n, dtype=np.int64)
    for a, b in edge_list(width, height):
        s_j += spins[:, a].astype(np.int64) * spins[:, b]
    s_h = spins.sum(axis=1, dtype=np.int64)
    log_weights = theta_j * s_j + theta_h * s_h
    m = float(np.max(log_weights))
    return m + math.log(float(np.sum(np.exp(log_weights - m))))


def ising_enumerate_probs(width, height, theta_j, theta_h):
    """Probability of every configuration, indexed by its bit code.

    Site b of code k holds spin +1 when bit b of k is set.  Useful as
    an exact reference distribution for goodness-of-fit checks.
    """
    n = width * height
    if n > _MAX_ENUM_SITES:
        raise ValueError(f"enumeration capped at {_MAX_ENUM_SITES} sites")
    codes = np.arange(1 << n, dtype=np.uint32)
    spins = np.where(
        (codes[:, None] >> np.arange(n, dtype=np.uint32)) & 1 > 0, 1, -1
    ).astype(np.int8)
    s_j = np.zeros(1 << n, dtype=np.int64)
    for a, b in edge_list(width, height):
        s_j += spins[:, a].astype(np.int64) * spins[:, b]
    s_h = spins.sum(axis=1, dtype=np.int64)
    log_weights = theta_j * s_j + theta_h * s_h
    log_weights -= np.max(log_weights)
    w = np.exp(log_weights)
    return w / w.sum()


def config_code(x):
    """Bit code of a configuration, matching ising_enumerate_probs."""
    flat = np.asarray(x).reshape(-1)
    code = 0
    for b in range(flat.size):
        if flat[b] > 0:
            code |= 1 << b
    return code
