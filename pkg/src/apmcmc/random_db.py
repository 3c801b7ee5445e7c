"""Keyed store of the random numbers consumed by an unbiased estimator.

A pseudo-marginal chain needs to treat "the randomness inside the estimator"
as a first-class variable: clamp it while the parameters move, perturb it
while the parameters stay fixed, and resample it wholesale. This module
provides that variable. A RandomDb maps variate keys (tuples of non-negative
integers, ordered lexicographically) to float64 draws from a base space,
either Uniform[0,1] or N(0,1). Keys are materialized lazily: the value at a
key is a pure function of (master seed, stream counter, key), so an estimator
may consume a data-dependent number of draws and two evaluations against the
same db state read back bit-identical values, regardless of the order in
which keys were first touched.

Perturbations are lazy views. perturb_reflective composes a uniform db with a
Gaussian direction db through the reflection map (take u + z*nu modulo 2,
fold [1,2) back onto (0,1]); perturb_elliptical rotates one Gaussian db
toward another. Both transformations preserve the base measure key-by-key, so
a view is again a valid db. Views read through to their parents, which means
keys first touched while evaluating a proposal materialize in the parents and
stay fixed for the rest of that update, exactly as the clamping construction
requires. On acceptance a view is flattened into a concrete db so chains
never accumulate transformation chains.

Keys never touched by any evaluation carry no information about the chain's
history; after a flatten or resample they materialize from a fresh stream of
the deterministic counter-based source. Storage is block-granular: a key
(p1, ..., pk, i) lives at index i of the block addressed by (p1, ..., pk),
and touching it materializes the leading slice of that block.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

__all__ = [
    "BaseSpace",
    "SeedContext",
    "RandomDb",
    "ReflectiveView",
    "EllipticalView",
    "reflect",
    "perturb_reflective",
    "perturb_elliptical",
]

_MASK = 0xFFFFFFFFFFFFFFFF
_GOLD = 0x9E3779B97F4A7C15
_SEED_SALT = 0x8E2AC36C05F3A6A7
_U53 = 2.0**-53


class BaseSpace(enum.Enum):
    """Marginal law of every key in a db."""

    UNIT_UNIFORM = "unit_uniform"
    STANDARD_NORMAL = "standard_normal"


def _mix_py(z: int) -> int:
    # splitmix64 finalizer, python-int flavour (used once per block prefix)
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


@njit(cache=True, inline="always")
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _fill_uniform(out, h0, start):
    h = np.uint64(h0)
    g = np.uint64(_GOLD)
    for j in range(out.shape[0]):
        c = np.uint64(start + j + 1)
        out[j] = np.float64(_mix64(h + c * g) >> np.uint64(11)) * _U53


@njit(cache=True)
def _fill_normal(out, h0, start):
    # Box-Muller, cosine branch only; two counter slots per key keep the
    # value at index i independent of how far the block has been extended.
    h = np.uint64(h0)
    g = np.uint64(_GOLD)
    for j in range(out.shape[0]):
        i = start + j
        b1 = _mix64(h + np.uint64(2 * i + 1) * g)
        b2 = _mix64(h + np.uint64(2 * i + 2) * g)
        u1 = (np.float64(b1 >> np.uint64(11)) + 0.5) * _U53
        u2 = (np.float64(b2 >> np.uint64(11)) + 0.5) * _U53
        out[j] = math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


def reflect(x):
    """Fold the real line onto [0, 1] with slope-1 segments.

    Take x modulo 2 (non-negative remainder); a remainder in [1, 2) maps to
    2 - remainder. Piecewise the map has unit Jacobian, so it carries
    Lebesgue measure on any interval of integer length onto Uniform[0,1];
    that is what makes unconstrained Gaussian steps on uniform variates
    legal. Accepts scalars or arrays; rejects non-finite input.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("reflect requires finite input")
    m = np.mod(arr, 2.0)
    out = np.where(m < 1.0, m, 2.0 - m)
    if np.ndim(x) == 0:
        return float(out)
    return out


@njit(cache=True)
def _reflect_combine(u, nu, z, out):
    for j in range(u.shape[0]):
        m = (u[j] + z * nu[j]) % 2.0
        if m < 0.0:
            m += 2.0
        out[j] = m if m < 1.0 else 2.0 - m


def _combine_reflective(u: np.ndarray, nu: np.ndarray, z: float) -> np.ndarray:
    out = np.empty_like(u)
    _reflect_combine(u.reshape(-1), nu.reshape(-1), z, out.reshape(-1))
    return out


def _combine_elliptical(u: np.ndarray, nu: np.ndarray, cos_a: float, sin_a: float) -> np.ndarray:
    return u * cos_a + nu * sin_a


class SeedContext:
    """Master seed plus the monotone stream counter shared by one chain.

    Every resample or flatten claims the next stream id, so no two live dbs
    of a chain ever draw fresh values from the same stream. The counter is
    the only mutable state in the module; db contents themselves are
    append-only.
    """

    __slots__ = ("seed", "_next_stream")

    def __init__(self, seed: int) -> None:
        self.seed = int(seed) & _MASK
        self._next_stream = 0

    def next_stream(self) -> int:
        s = self._next_stream
        self._next_stream += 1
        return s


def _check_key(key: tuple) -> tuple:
    key = tuple(int(c) for c in key)
    if len(key) == 0:
        raise ValueError("variate key must have at least one component")
    if any(c < 0 for c in key):
        raise ValueError(f"variate key components must be non-negative: {key}")
    return key


class _DbReader:
    """Shared read-side API for concrete dbs and perturbed views."""

    space: BaseSpace

    def block(self, prefix: tuple, n: int) -> np.ndarray:
        raise NotImplementedError

    def get(self, key: tuple) -> float:
        key = _check_key(key)
        return float(self.block(key[:-1], key[-1] + 1)[key[-1]])

    def dense2d(self, prefix: tuple, ncols: int, nrows: int) -> np.ndarray:
        """Rows t = 1..nrows of the block family prefix + (t,), stacked.

        The child index is 1-based on purpose: callers use it for
        backward-time and bridging-step indices, which start at 1.
        """
        raise NotImplementedError

    def dense_depth(self, prefix: tuple, ncols: int) -> int:
        """Largest contiguous 1-based child depth already materialized."""
        raise NotImplementedError


class RandomDb(_DbReader):
    """Concrete lazily-materialized variate store."""

    __slots__ = ("space", "_ctx", "_stream", "_blocks", "_folds", "_dense")

    def __init__(self, ctx: SeedContext, space: BaseSpace, stream: int) -> None:
        self.space = space
        self._ctx = ctx
        self._stream = int(stream)
        self._blocks: dict[tuple, np.ndarray] = {}
        self._folds: dict[tuple, int] = {}
        self._dense: dict[tuple, np.ndarray] = {}

    @classmethod
    def fresh(cls, ctx: SeedContext, space: BaseSpace) -> "RandomDb":
        return cls(ctx, space, ctx.next_stream())

    @property
    def stream(self) -> int:
        return self._stream

    @property
    def ctx(self) -> SeedContext:
        return self._ctx

    def _fold(self, prefix: tuple) -> int:
        h = self._folds.get(prefix)
        if h is None:
            h = _mix_py(self._ctx.seed ^ _SEED_SALT)
            h = _mix_py(h ^ (((self._stream + 1) * _GOLD) & _MASK))
            for c in prefix:
                h = _mix_py(h ^ (((c + 1) * _GOLD) & _MASK))
            self._folds[prefix] = h
        return h

    def _fill(self, out: np.ndarray, prefix: tuple, start: int) -> None:
        h0 = np.uint64(self._fold(prefix))
        if self.space is BaseSpace.UNIT_UNIFORM:
            _fill_uniform(out, h0, start)
        else:
            _fill_normal(out, h0, start)

    def block(self, prefix: tuple, n: int) -> np.ndarray:
        prefix = tuple(prefix)
        if prefix and min(prefix) < 0:
            raise ValueError(f"variate key components must be non-negative: {prefix}")
        arr = self._blocks.get(prefix)
        if arr is None:
            arr = np.empty(n, dtype=np.float64)
            self._fill(arr, prefix, 0)
            self._blocks[prefix] = arr
        elif arr.shape[0] < n:
            grown = np.empty(n, dtype=np.float64)
            grown[: arr.shape[0]] = arr
            self._fill(grown[arr.shape[0] :], prefix, arr.shape[0])
            self._blocks[prefix] = grown
            arr = grown
        view = arr[:n]
        view.setflags(write=False)
        return view

    def set_block(self, prefix: tuple, values: np.ndarray) -> None:
        # Used by flatten only; concrete values win over the lazy source.
        # Dense stacks built earlier stay valid: block values never change,
        # and flatten only ever targets a brand-new db.
        prefix = tuple(prefix)
        self._blocks[prefix] = np.array(values, dtype=np.float64, copy=True)

    def dense2d(self, prefix: tuple, ncols: int, nrows: int) -> np.ndarray:
        prefix = tuple(prefix)
        cache_key = prefix + (-1, ncols)  # -1 separates family from children
        stack = self._dense.get(cache_key)
        have = 0 if stack is None else stack.shape[0]
        if have < nrows:
            grown = np.empty((nrows, ncols), dtype=np.float64)
            if have:
                grown[:have] = stack
            for t in range(have + 1, nrows + 1):
                grown[t - 1] = self.block(prefix + (t,), ncols)
            self._dense[cache_key] = grown
            stack = grown
        view = stack[:nrows]
        view.setflags(write=False)
        return view

    def dense_depth(self, prefix: tuple, ncols: int) -> int:
        prefix = tuple(prefix)
        stack = self._dense.get(prefix + (-1, ncols))
        depth = 0 if stack is None else stack.shape[0]
        while True:
            arr = self._blocks.get(prefix + (depth + 1,))
            if arr is None or arr.shape[0] < ncols:
                return depth
            depth += 1

    def resample(self) -> "RandomDb":
        """Fresh-stream db; the receiver is left untouched."""
        return RandomDb(self._ctx, self.space, self._ctx.next_stream())

    def materialized(self) -> dict[tuple, int]:
        return {prefix: arr.shape[0] for prefix, arr in self._blocks.items()}


class _ViewBase(_DbReader):
    __slots__ = ("space", "parent", "direction")

    def _transform(self, u: np.ndarray, nu: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def block(self, prefix: tuple, n: int) -> np.ndarray:
        out = self._transform(self.parent.block(prefix, n), self.direction.block(prefix, n))
        out.setflags(write=False)
        return out

    def dense2d(self, prefix: tuple, ncols: int, nrows: int) -> np.ndarray:
        out = self._transform(
            self.parent.dense2d(prefix, ncols, nrows),
            self.direction.dense2d(prefix, ncols, nrows),
        )
        out.setflags(write=False)
        return out

    def dense_depth(self, prefix: tuple, ncols: int) -> int:
        return self.parent.dense_depth(prefix, ncols)

    def flatten(self) -> RandomDb:
        """Concrete db holding every key the update touched.

        Touched-key values are the transformed parent values, computed with
        the same vectorized expression block() used, so a re-evaluation
        against the flattened db is bit-identical to the view evaluation.
        Untouched keys later materialize from a fresh stream, which is
        distributionally equivalent: they never influenced any accept
        decision through the parent, and the transform preserves the base
        measure key-by-key.
        """
        out = RandomDb(self.parent.ctx, self.space, self.parent.ctx.next_stream())
        for prefix, count in self.parent.materialized().items():
            out.set_block(
                prefix,
                self._transform(
                    self.parent.block(prefix, count), self.direction.block(prefix, count)
                ),
            )
        return out


class ReflectiveView(_ViewBase):
    """u' = reflect(u + z * nu), lazily over a uniform parent db."""

    __slots__ = ("z",)

    def __init__(self, parent: RandomDb, direction: RandomDb, z: float) -> None:
        if parent.space is not BaseSpace.UNIT_UNIFORM:
            raise ValueError("reflective perturbation needs a UNIT_UNIFORM parent")
        if direction.space is not BaseSpace.STANDARD_NORMAL:
            raise ValueError("reflective perturbation needs a STANDARD_NORMAL direction")
        self.space = BaseSpace.UNIT_UNIFORM
        self.parent = parent
        self.direction = direction
        self.z = float(z)

    def _transform(self, u: np.ndarray, nu: np.ndarray) -> np.ndarray:
        return _combine_reflective(u, nu, self.z)


class EllipticalView(_ViewBase):
    """u' = u*cos(angle) + nu*sin(angle) over a Gaussian parent db."""

    __slots__ = ("angle", "_cos", "_sin")

    def __init__(self, parent: RandomDb, direction: RandomDb, angle: float) -> None:
        if parent.space is not BaseSpace.STANDARD_NORMAL:
            raise ValueError("elliptical perturbation needs a STANDARD_NORMAL parent")
        if direction.space is not BaseSpace.STANDARD_NORMAL:
            raise ValueError("elliptical perturbation needs a STANDARD_NORMAL direction")
        self.space = BaseSpace.STANDARD_NORMAL
        self.parent = parent
        self.direction = direction
        self.angle = float(angle)
        self._cos = math.cos(self.angle)
        self._sin = math.sin(self.angle)

    def _transform(self, u: np.ndarray, nu: np.ndarray) -> np.ndarray:
        return _combine_elliptical(u, nu, self._cos, self._sin)


def perturb_reflective(db: RandomDb, direction: RandomDb, z: float) -> ReflectiveView:
    return ReflectiveView(db, direction, z)


def perturb_elliptical(db: RandomDb, nu: RandomDb, angle: float) -> EllipticalView:
    return EllipticalView(db, nu, angle)
