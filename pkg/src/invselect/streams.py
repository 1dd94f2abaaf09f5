"""Deterministic random streams and scalar distribution helpers.

Every stochastic step in the pipeline draws from a :class:`SeededStream`
keyed by ``(root_seed, path)``.  The key is hashed into a Philox
(counter-based) generator, so a stream's draws depend only on where it
sits in the derivation tree, never on the order in which siblings were
created or on how work is split between processes.
"""
from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np
from scipy import special

__all__ = [
    "InvalidParameterError",
    "SeededStream",
    "derive_stream",
    "sample_dirichlet",
    "std_normal_cdf",
    "std_normal_inverse_cdf",
    "empirical_quantile",
]

_U64 = (1 << 64) - 1


class InvalidParameterError(ValueError):
    """Raised when a distribution parameter or argument is out of range."""


class SeededStream:
    """A reproducible random stream identified by a root seed and a label path.

    Parameters
    ----------
    root_seed : int
        Unsigned 64-bit seed shared by every stream in one run.
    path : sequence of str
        Labels from the root to this stream, e.g.
        ``("model=3", "site=7", "stage=resample")``.
    """

    __slots__ = ("root_seed", "path", "_generator")

    def __init__(self, root_seed: int, path: Sequence[str] = ()):
        self.root_seed = int(root_seed) & _U64
        self.path = tuple(str(p) for p in path)
        self._generator: np.random.Generator | None = None

    def __repr__(self) -> str:
        return f"SeededStream({self.root_seed}, {'/'.join(self.path)!r})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SeededStream):
            return NotImplemented
        return (self.root_seed, self.path) == (other.root_seed, other.path)

    def __hash__(self) -> int:
        return hash((self.root_seed, self.path))

    def __getstate__(self):
        # generator state is rebuilt from the key; drawn-from streams are not meant to be shipped
        return {"root_seed": self.root_seed, "path": self.path}

    def __setstate__(self, state):
        self.root_seed = state["root_seed"]
        self.path = state["path"]
        self._generator = None

    def _key(self) -> int:
        h = hashlib.blake2b(digest_size=16)
        h.update(self.root_seed.to_bytes(8, "little"))
        for label in self.path:
            encoded = label.encode("utf-8")
            h.update(len(encoded).to_bytes(4, "little"))
            h.update(encoded)
        return int.from_bytes(h.digest(), "little")

    @property
    def generator(self) -> np.random.Generator:
        if self._generator is None:
            self._generator = np.random.Generator(np.random.Philox(key=self._key()))
        return self._generator

    def derive(self, label: str) -> "SeededStream":
        return derive_stream(self, label)

    # thin conveniences so callers rarely touch the generator directly
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)


def derive_stream(parent: SeededStream, label: str) -> SeededStream:
    """Child stream whose path is ``parent.path + (label,)``."""
    label = str(label)
    if not label:
        raise InvalidParameterError("stream label must be nonempty")
    return SeededStream(parent.root_seed, parent.path + (label,))


def sample_dirichlet(stream: SeededStream, alpha: Sequence[float]) -> np.ndarray:
    """One draw from Dirichlet(alpha), returned as a probability vector."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim != 1 or alpha.size < 1:
        raise InvalidParameterError("alpha must be a nonempty 1-D sequence")
    if not np.all(np.isfinite(alpha)) or np.any(alpha <= 0):
        raise InvalidParameterError(f"Dirichlet parameters must be positive, got {alpha}")
    if alpha.size == 1:
        return np.ones(1)
    g = stream.generator.standard_gamma(alpha)
    total = g.sum()
    if total <= 0.0:
        # every gamma underflowed (tiny alphas); fall back to the largest coordinate
        out = np.zeros_like(alpha)
        out[np.argmax(alpha)] = 1.0
        return out
    return g / total


def std_normal_cdf(x):
    """Standard normal CDF, Phi(x)."""
    return special.ndtr(x)


def std_normal_inverse_cdf(p):
    """Standard normal quantile function, Phi^{-1}(p), for 0 < p < 1."""
    arr = np.asarray(p, dtype=float)
    if np.any(~((arr > 0.0) & (arr < 1.0))):
        raise InvalidParameterError(f"probability must lie in (0, 1), got {p}")
    out = special.ndtri(arr)
    return float(out) if np.ndim(p) == 0 else out


def empirical_quantile(samples: Sequence[float], p: float) -> float:
    """Linear-interpolation quantile (order statistic k at probability (k-1)/(N-1))."""
    arr = np.asarray(samples, dtype=float).ravel()
    if arr.size == 0:
        raise InvalidParameterError("cannot take a quantile of an empty sample")
    if not 0.0 <= p <= 1.0:
        raise InvalidParameterError(f"quantile level must lie in [0, 1], got {p}")
    return float(np.quantile(arr, p, method="linear"))
