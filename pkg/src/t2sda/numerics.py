"""Deterministic math substrate: 2D DFT, percentile, softmax, normalization, seeded RNG.

All grids are numpy float64 arrays; spectra are complex128. Everything here is
a pure function so callers may share inputs across threads freely.
"""
from __future__ import annotations

import hashlib
import warnings

import numpy as np

from .errors import DegenerateVectorWarning, EmptyInput, SpectralResidue

IGNORE = 255


def _dft_matrix(n: int) -> np.ndarray:
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n)


def dft2(plane: np.ndarray) -> np.ndarray:
    """Unnormalized forward 2D DFT of a single-channel real plane.

    Separable: a DFT matrix per axis. Exact for arbitrary sizes; toy planes
    are small enough that O(N^2) per axis is fine.
    """
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2 or plane.shape[0] < 1 or plane.shape[1] < 1:
        raise EmptyInput(f"expected a non-empty 2D plane, got shape {plane.shape}")
    h, w = plane.shape
    return _dft_matrix(h) @ plane.astype(np.complex128) @ _dft_matrix(w)


def idft2(spec: np.ndarray, imag_tol: float = 1e-6) -> np.ndarray:
    """Inverse 2D DFT with the 1/(H*W) factor; asserts the result is real."""
    spec = np.asarray(spec, dtype=np.complex128)
    h, w = spec.shape
    out = np.conj(_dft_matrix(h)) @ spec @ np.conj(_dft_matrix(w)) / (h * w)
    resid = float(np.max(np.abs(out.imag))) if out.size else 0.0
    if resid > imag_tol:
        raise SpectralResidue(f"imaginary residue {resid:.3e} exceeds {imag_tol:.1e}")
    return out.real.copy()


def percentile(values, p: float) -> float:
    """Linear-interpolation percentile of a non-empty collection.

    With sorted v and virtual index i = (p/100)*(len-1):
    v[floor(i)] + frac(i) * (v[ceil(i)] - v[floor(i)]).
    """
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise EmptyInput("percentile of empty input")
    i = (p / 100.0) * (v.size - 1)
    lo = int(np.floor(i))
    hi = int(np.ceil(i))
    return float(v[lo] + (i - lo) * (v[hi] - v[lo]))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable softmax along `axis`; entries in (0,1), summing to 1."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def l2_normalize(v: np.ndarray, axis: int = -1, eps: float = 1e-12) -> np.ndarray:
    """Scale to unit L2 norm; near-zero vectors pass through (with a warning)."""
    v = np.asarray(v, dtype=np.float64)
    n = np.sqrt(np.sum(v * v, axis=axis, keepdims=True))
    if np.any(n < 1e-8):
        warnings.warn("normalizing a near-zero vector", DegenerateVectorWarning)
    return v / (n + eps)


class Rng:
    """Counter-based RNG with named, mutually independent sub-streams.

    `stream(label)` returns a fresh numpy Generator whose Philox key is
    derived from (seed, label), so draws in one subsystem never perturb
    another and any stream can be re-opened at will (e.g. per training step).
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, label: str) -> np.random.Generator:
        digest = hashlib.sha256(f"{self.seed}:{label}".encode()).digest()
        key = int.from_bytes(digest[:16], "little")
        return np.random.Generator(np.random.Philox(key=key))

    def namespaced(self, prefix: str) -> "Rng":
        """An Rng whose streams live under `prefix/`, independent of ours."""
        child = Rng(self.seed)
        parent_stream = self.stream
        child.stream = lambda label: parent_stream(f"{prefix}/{label}")
        return child

    def __repr__(self):
        return f"Rng(seed={self.seed})"
