"""Deterministic random streams and small array helpers.

Every stochastic step in the package (splits, sampling, initialisation,
dropout masks, epoch shuffles, t-SNE init) draws from an :class:`Rng`.
The generator is SplitMix64: the stream of a generator with state ``s`` is
``mix(s + i * GAMMA)`` for ``i = 1, 2, ...``, so draws can be produced in
vectorised blocks and are identical on every platform.

Child streams follow one project-wide convention: client ``k`` at round
``r`` uses ``derive(derive(root, k), r)``, and inside that stream index 0
feeds data sampling, index 1 dropout masks and index 2 epoch shuffles.
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_DERIVE_KEY = 0xD1B54A32D192ED03

_U_GAMMA = np.uint64(GAMMA)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def mix64(z: int) -> int:
    """SplitMix64 finaliser on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


class Rng:
    """A single-owner SplitMix64 stream.

    ``path`` records the derivation indices from the root seed; it is kept
    for audit output only and has no influence on the stream.
    """

    __slots__ = ("state", "path")

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.state = int(seed) & MASK64
        self.path = tuple(path)

    def __repr__(self):
        return f"Rng(state=0x{self.state:016x}, path={self.path})"

    def copy(self) -> "Rng":
        return Rng(self.state, self.path)

    def next_u64(self, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError("n must be non-negative")
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            out = _mix64_array(np.uint64(self.state) + steps * _U_GAMMA)
        self.state = (self.state + n * GAMMA) & MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        """``n`` floats in [0, 1) with 53 random bits each."""
        return (self.next_u64(n) >> _S11).astype(np.float64) * (1.0 / (1 << 53))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        """Standard normals via Box-Muller, scaled by ``std``."""
        shape = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        radius = np.sqrt(-2.0 * np.log1p(-u[:m]))  # 1 - u lies in (0, 1]
        theta = 2.0 * np.pi * u[m:]
        z = np.concatenate([radius * np.cos(theta), radius * np.sin(theta)])[:n]
        return (z * std).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of ``0..n-1``."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        # j_i uniform on 0..i for i = n-1 down to 1
        bounds = np.arange(n - 1, 0, -1)
        js = np.minimum((u * (bounds + 1)).astype(np.int64), bounds)
        for i, j in zip(bounds.tolist(), js.tolist()):
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def bernoulli_mask(self, shape, keep: float) -> np.ndarray:
        shape = tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        return (self.uniform(n) < keep).reshape(shape)


def derive(parent: Rng, index: int) -> Rng:
    """Child stream that depends only on ``(parent.state, index)``."""
    if index < 0:
        raise ValueError("derivation index must be non-negative")
    state = mix64(parent.state ^ mix64(index + _DERIVE_KEY))
    return Rng(mix64(state + GAMMA), parent.path + (int(index),))


def derive_path(root: Rng, *indices: int) -> Rng:
    rng = root
    for i in indices:
        rng = derive(rng, i)
    return rng


def uniform(rng: Rng, n: int) -> np.ndarray:
    return rng.uniform(n)


def shuffle(rng: Rng, n: int) -> np.ndarray:
    return rng.permutation(n)


def check_shape(name: str, array: np.ndarray, expected: tuple) -> None:
    """Raise ShapeMismatch unless ``array.shape`` matches ``expected``.

    ``None`` entries in ``expected`` match any size.
    """
    shape = np.shape(array)
    if len(shape) != len(expected) or any(
        e is not None and s != e for s, e in zip(shape, expected)
    ):
        raise ShapeMismatch(f"{name}: expected shape {expected}, got {shape}")


def check_finite(name: str, array: np.ndarray) -> None:
    if not np.all(np.isfinite(array)):
        raise FloatingPointError(f"{name}: non-finite values")
