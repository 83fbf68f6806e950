"""Fourier spectra of flattened weight vectors.

The DFT here works for any length ``d``. Powers of two go through a vectorised
radix-2 Cooley-Tukey; every other length is reduced to a power-of-two circular
convolution with Bluestein's chirp-z identity, so the output always has exactly
``d`` bins and no zero padding leaks into the spectrum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

EPS = 1e-12

_DIRECT_SIZE = 16


def _as_param_vector(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1:
        raise ValueError(f"expected a 1-D parameter vector, got shape {w.shape}")
    if w.size == 0:
        raise ValueError("parameter vector is empty")
    if not np.all(np.isfinite(w)):
        raise ValueError("parameter vector contains NaN or Inf")
    return w


@lru_cache(maxsize=None)
def _direct_matrix(n: int) -> np.ndarray:
    k = np.arange(n)
    m = np.exp(-2j * np.pi * ((k[:, None] * k[None, :]) % n) / n)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=None)
def _twiddle(m: int) -> np.ndarray:
    t = np.exp(-1j * np.pi * np.arange(m) / m)[:, None]
    t.setflags(write=False)
    return t


def _fft_pow2(x: np.ndarray) -> np.ndarray:
    # iterative decimation in time; each pass doubles the transform length
    n = x.shape[0]
    n0 = min(n, _DIRECT_SIZE)
    X = _direct_matrix(n0) @ x.reshape(n0, -1)
    while X.shape[0] < n:
        half = X.shape[1] // 2
        even = X[:, :half]
        odd = _twiddle(X.shape[0]) * X[:, half:]
        X = np.concatenate([even + odd, even - odd])
    return X.ravel()


def _ifft_pow2(x: np.ndarray) -> np.ndarray:
    return np.conj(_fft_pow2(np.conj(x))) / x.shape[0]


@lru_cache(maxsize=64)
def _bluestein_plan(d: int) -> tuple[np.ndarray, np.ndarray, int]:
    m = 1 << (2 * d - 1 - 1).bit_length()
    k = np.arange(d, dtype=np.int64)
    # k^2 mod 2d keeps the chirp phase exact for large d
    chirp = np.exp(-1j * np.pi * ((k * k) % (2 * d)) / d)
    b = np.zeros(m, dtype=np.complex128)
    b[:d] = np.conj(chirp)
    b[m - d + 1:] = np.conj(chirp[1:][::-1])
    b_hat = _fft_pow2(b)
    chirp.setflags(write=False)
    b_hat.setflags(write=False)
    return chirp, b_hat, m


def _dft_any(x: np.ndarray) -> np.ndarray:
    d = x.shape[0]
    if d & (d - 1) == 0:
        return _fft_pow2(x.astype(np.complex128))
    chirp, b_hat, m = _bluestein_plan(d)
    a = np.zeros(m, dtype=np.complex128)
    a[:d] = x * chirp
    conv = _ifft_pow2(_fft_pow2(a) * b_hat)
    return chirp * conv[:d]


def dft(w) -> np.ndarray:
    """Discrete Fourier transform ``z_k = sum_j w_j exp(-2 pi i k j / d)``.

    Runs in O(d log d) for arbitrary ``d``. Accepts real or complex input.
    """
    x = np.asarray(w)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("dft needs a non-empty 1-D vector")
    if not np.all(np.isfinite(x)):
        raise ValueError("dft input contains NaN or Inf")
    return _dft_any(x.astype(np.complex128, copy=False))


def naive_dft(w) -> np.ndarray:
    """O(d^2) reference DFT, used only as a test oracle."""
    x = np.asarray(w, dtype=np.complex128)
    d = x.shape[0]
    j = np.arange(d)
    phase = (np.outer(j, j) % d) / d
    return np.exp(-2j * np.pi * phase) @ x


@dataclass(frozen=True)
class Spectrum:
    """Magnitude spectrum of a length-``d`` parameter vector.

    ``tau == 1.0`` marks the full spectrum; anything smaller is the leading
    ``ceil(tau * d)`` bins.
    """

    values: np.ndarray
    d: int
    tau: float = 1.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if values.ndim != 1 or np.any(values < 0):
            raise ValueError("spectrum values must be a non-negative 1-D vector")
        if values.shape[0] != truncated_length(self.d, self.tau):
            raise ValueError(
                f"spectrum length {values.shape[0]} does not match "
                f"ceil({self.tau} * {self.d})"
            )

    @property
    def kind(self) -> str:
        return "full" if self.tau == 1.0 else f"truncated({self.tau:g})"

    @property
    def is_full(self) -> bool:
        return self.tau == 1.0

    def __len__(self) -> int:
        return self.values.shape[0]


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not (0.0 < tau <= 1.0):
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    return tau


def truncated_length(d: int, tau: float) -> int:
    # round first so that e.g. 0.3 * 10 does not become ceil(3.0000000000000004)
    return max(1, math.ceil(round(_check_tau(tau) * d, 9)))


def spectrum(w) -> Spectrum:
    """Full magnitude spectrum ``|DFT(w)|``."""
    w = _as_param_vector(w)
    return Spectrum(np.abs(dft(w)), d=w.shape[0])


def truncate(s: Spectrum, tau: float) -> Spectrum:
    """Keep the first ``ceil(tau * d)`` bins of a full spectrum, in DFT order."""
    tau = _check_tau(tau)
    if not s.is_full:
        raise ValueError(f"can only truncate a full spectrum, got {s.kind}")
    k = truncated_length(s.d, tau)
    return Spectrum(s.values[:k].copy(), d=s.d, tau=tau)


def spectrum_tau(w, tau: float) -> Spectrum:
    """Spectrum of ``w`` truncated to ``tau`` (full when ``tau == 1``)."""
    full = spectrum(w)
    return full if _check_tau(tau) == 1.0 else truncate(full, tau)


def _divergence_terms(p: np.ndarray, q: np.ndarray, eps: float) -> np.ndarray:
    pf = np.maximum(p, eps)
    qf = np.maximum(q, eps)
    terms = pf * (np.log(pf) - np.log(qf))
    return np.where(p == 0.0, 0.0, terms)


def _normalized(v: np.ndarray) -> np.ndarray:
    total = v.sum()
    return v / total if total > 0 else v


def divergence(p: Spectrum, q: Spectrum, eps: float = EPS, normalize: bool = False) -> float:
    """``sum_i p_i log p_i - p_i log q_i`` on raw (or optionally sum-normalised) spectra.

    Both arguments are floored at ``eps`` inside the logs; entries where
    ``p_i == 0`` contribute exactly zero.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if len(p) != len(q) or p.tau != q.tau:
        raise ValueError(f"spectrum mismatch: {p.kind}[{len(p)}] vs {q.kind}[{len(q)}]")
    pv, qv = p.values, q.values
    if normalize:
        pv, qv = _normalized(pv), _normalized(qv)
    return float(_divergence_terms(pv, qv, eps).sum())


def divergence_and_grad(w, q: Spectrum, tau: float, eps: float = EPS,
                        normalize: bool = False) -> tuple[float, np.ndarray]:
    """Value and gradient of ``divergence(spectrum_tau(w, tau), q)``, sharing one forward DFT."""
    w = _as_param_vector(w)
    tau = _check_tau(tau)
    d = w.shape[0]
    if q.tau != tau or q.d != d:
        raise ValueError(f"teacher spectrum {q.kind} (d={q.d}) does not match tau={tau}, d={d}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    z = dft(w)
    mag = np.abs(z)
    k = len(q)
    p = mag[:k]
    qv = q.values
    if normalize:
        total = p.sum()
        if total <= 0:
            return 0.0, np.zeros(d)
        p_hat = p / total
        q_hat = _normalized(qv)
        value = float(_divergence_terms(p_hat, q_hat, eps).sum())
        h = np.log(np.maximum(p_hat, eps)) + 1.0 - np.log(np.maximum(q_hat, eps))
        h = np.where(p_hat >= eps, h, 0.0)
        g_head = (h - np.dot(p_hat, h)) / total
    else:
        value = float(_divergence_terms(p, qv, eps).sum())
        g_head = np.log(np.maximum(p, eps)) + 1.0 - np.log(np.maximum(qv, eps))
        g_head = np.where(p >= eps, g_head, 0.0)
    g = np.zeros(d)
    g[:k] = g_head
    live = mag >= eps
    v = np.zeros(d, dtype=np.complex128)
    v[live] = g[live] * np.conj(z[live]) / mag[live]
    return value, dft(v).real


def divergence_grad(w, q: Spectrum, tau: float, eps: float = EPS, normalize: bool = False) -> np.ndarray:
    """Gradient of ``divergence(spectrum_tau(w, tau), q)`` with respect to ``w``.

    With ``z = DFT(w)`` and per-bin sensitivity ``g_k = dD/d|z_k|`` the gradient is
    ``Re(DFT(g * conj(z) / |z|))``. Bins with ``|z_k| < eps`` get subgradient 0.
    """
    return divergence_and_grad(w, q, tau, eps, normalize)[1]
