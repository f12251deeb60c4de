"""Multilevel discrete wavelet transform (Mallat cascade) and band reconstruction.

All transforms act on the last axis, so a ``(segments, time)`` matrix is
decomposed row by row in one call.

Conventions
-----------
``FilterBank.lowpass`` is the orthonormal scaling filter ``h`` in the usual
published order (``h[0] = 0.2303...`` for DB4) and
``highpass[k] = (-1)**k * h[L-1-k]``. One analysis step is::

    A[i] = sum_k h[k] * x[2i + k + s]
    D[i] = sum_k g[k] * x[2i + k + s]

with ``s = 1 - L/2`` under periodic extension and ``s = 2 - L`` under
half-sample symmetric extension. These match PyWavelets' ``periodization``
and ``symmetric`` modes coefficient for coefficient.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache
from math import comb, sqrt

import numpy as np


class WaveletError(ValueError):
    pass


class BoundaryMode(str, enum.Enum):
    PERIODIC = "periodic"
    SYMMETRIC = "symmetric"


@dataclass(frozen=True)
class FilterBank:
    lowpass: np.ndarray
    highpass: np.ndarray
    name: str = "DB4"

    def __post_init__(self):
        lo = np.asarray(self.lowpass, dtype=float)
        hi = np.asarray(self.highpass, dtype=float)
        if lo.ndim != 1 or lo.shape != hi.shape or len(lo) % 2:
            raise WaveletError("filters must be 1-D with equal even length")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lowpass", lo)
        object.__setattr__(self, "highpass", hi)

    @property
    def length(self) -> int:
        return len(self.lowpass)


def _qmf(lowpass: np.ndarray) -> np.ndarray:
    n = len(lowpass)
    return np.array([(-1) ** k * lowpass[n - 1 - k] for k in range(n)])


@lru_cache(maxsize=None)
def _daubechies_lowpass(p: int) -> tuple[float, ...]:
    if p == 1:
        return (1 / sqrt(2), 1 / sqrt(2))
    # Spectral factorisation: the roots y_k of sum_k C(p-1+k, k) y^k, with
    # y = (2 - z - 1/z) / 4, each give a reciprocal pair in z; keeping the root
    # outside the unit circle yields the extremal-phase filter.
    poly = [comb(p - 1 + k, k) for k in range(p)][::-1]
    q = np.poly1d([1.0])
    for y in np.roots(poly):
        part = 2 * np.sqrt(y * (y - 1))
        const = 1 - 2 * y
        z = const + part
        if abs(z) < 1:
            z = const - part
        q = q * np.poly1d([1, -z])
    full = np.poly1d([1, 1]) ** p * np.real(q)
    coeffs = full.c / full.c.sum() * sqrt(2)
    return tuple(coeffs[::-1].tolist())


def daubechies_filters(vanishing_moments: int) -> FilterBank:
    """Orthonormal Daubechies filter pair with ``vanishing_moments`` vanishing moments.

    ``vanishing_moments=1`` is Haar; ``4`` is the 8-tap "DB4".
    """
    if not isinstance(vanishing_moments, (int, np.integer)) or not 1 <= vanishing_moments <= 10:
        raise WaveletError(f"unsupported Daubechies order {vanishing_moments!r}; expected 1..10")
    lo = np.array(_daubechies_lowpass(int(vanishing_moments)))
    return FilterBank(lo, _qmf(lo), name=f"DB{vanishing_moments}")


def filter_bank(name: str) -> FilterBank:
    """Look up a bank by name: ``haar`` or ``dbN``/``DBN`` for N in 1..10."""
    key = name.strip().lower()
    if key == "haar":
        return daubechies_filters(1)
    if key.startswith("db") and key[2:].isdigit():
        return daubechies_filters(int(key[2:]))
    raise WaveletError(f"unknown wavelet {name!r}")


@dataclass(frozen=True)
class WaveletDecomposition:
    level: int
    approximation: np.ndarray
    details: tuple[np.ndarray, ...]  # D_1 (finest) ... D_level
    original_length: int
    boundary_mode: BoundaryMode
    wavelet: str = "DB4"

    def with_coefficients(self, approximation, details) -> "WaveletDecomposition":
        return WaveletDecomposition(self.level, approximation, tuple(details),
                                    self.original_length, self.boundary_mode, self.wavelet)


@dataclass(frozen=True)
class BandComponents:
    low_frequency: np.ndarray
    high_frequency: tuple[np.ndarray, ...]  # rD_1 ... rD_level

    @property
    def bands(self) -> list[np.ndarray]:
        return [self.low_frequency, *self.high_frequency]

    def total(self) -> np.ndarray:
        return self.low_frequency + sum(self.high_frequency)


def coefficient_length(n: int, filter_length: int, mode: BoundaryMode) -> int:
    mode = BoundaryMode(mode)
    if mode is BoundaryMode.PERIODIC:
        return (n + 1) // 2
    return (n + filter_length - 1) // 2


def length_schedule(n: int, level: int, filter_length: int, mode: BoundaryMode) -> list[int]:
    """Input lengths at each level followed by the final coefficient length."""
    out = [n]
    for _ in range(level):
        out.append(coefficient_length(out[-1], filter_length, mode))
    return out


def _symmetric_index(idx: np.ndarray, n: int) -> np.ndarray:
    period = 2 * n
    m = np.mod(idx, period)
    return np.where(m < n, m, period - 1 - m)


def _analysis_step(x: np.ndarray, bank: FilterBank, mode: BoundaryMode):
    n = x.shape[-1]
    L = bank.length
    if mode is BoundaryMode.PERIODIC:
        if n % 2:
            x = np.concatenate([x, x[..., -1:]], axis=-1)
            n += 1
        n_out = n // 2
        base = 2 * np.arange(n_out) + (1 - L // 2)
        wrap = lambda idx: np.mod(idx, n)  # noqa: E731
    else:
        n_out = (n + L - 1) // 2
        base = 2 * np.arange(n_out) + (2 - L)
        wrap = lambda idx: _symmetric_index(idx, n)  # noqa: E731
    a = np.zeros(x.shape[:-1] + (n_out,))
    d = np.zeros_like(a)
    for k in range(L):
        taps = x[..., wrap(base + k)]
        a += bank.lowpass[k] * taps
        d += bank.highpass[k] * taps
    return a, d


def _synthesis_step(a: np.ndarray, d: np.ndarray, bank: FilterBank, mode: BoundaryMode, n: int):
    L = bank.length
    n_coef = a.shape[-1]
    if mode is BoundaryMode.PERIODIC:
        n_ext = 2 * n_coef
        out = np.zeros(a.shape[:-1] + (n_ext,))
        base = 2 * np.arange(n_coef) + (1 - L // 2)
        for k in range(L):
            # For fixed k the positions are distinct, so fancy-index += is safe.
            pos = np.mod(base + k, n_ext)
            out[..., pos] += bank.lowpass[k] * a + bank.highpass[k] * d
        return out[..., :n]
    out = np.zeros(a.shape[:-1] + (n,))
    base = 2 * np.arange(n_coef) + (2 - L)
    for k in range(L):
        pos = base + k
        keep = (pos >= 0) & (pos < n)
        out[..., pos[keep]] += bank.lowpass[k] * a[..., keep] + bank.highpass[k] * d[..., keep]
    return out


def dwt_decompose(signal, bank: FilterBank | None = None, level: int = 3,
                  mode: BoundaryMode | str = BoundaryMode.PERIODIC) -> WaveletDecomposition:
    """Run ``level`` Mallat analysis steps along the last axis of ``signal``."""
    bank = bank or daubechies_filters(4)
    mode = BoundaryMode(mode)
    x = np.asarray(signal, dtype=float)
    if x.ndim == 0:
        raise WaveletError("signal must be at least 1-D")
    n = x.shape[-1]
    if level < 1:
        raise WaveletError(f"level must be >= 1, got {level}")
    if n < 2 ** level:
        raise WaveletError(f"signal length {n} is shorter than 2**level = {2 ** level}")
    if not np.isfinite(x).all():
        raise WaveletError("signal contains non-finite samples")
    details = []
    a = x
    for _ in range(level):
        a, d = _analysis_step(a, bank, mode)
        details.append(d)
    return WaveletDecomposition(level, a, tuple(details), n, mode, bank.name)


def idwt_reconstruct(decomp: WaveletDecomposition, bank: FilterBank | None = None) -> np.ndarray:
    """Invert :func:`dwt_decompose`; returns ``original_length`` samples."""
    bank = bank or daubechies_filters(4)
    if bank.name.lower() != decomp.wavelet.lower():
        raise WaveletError(f"decomposition used {decomp.wavelet}, got filter bank {bank.name}")
    if len(decomp.details) != decomp.level:
        raise WaveletError("number of detail arrays does not match level")
    sizes = length_schedule(decomp.original_length, decomp.level, bank.length, decomp.boundary_mode)
    a = np.asarray(decomp.approximation, dtype=float)
    for lvl in range(decomp.level, 0, -1):
        d = np.asarray(decomp.details[lvl - 1], dtype=float)
        if a.shape[-1] != sizes[lvl] or d.shape[-1] != sizes[lvl]:
            raise WaveletError(f"coefficient length mismatch at level {lvl}")
        a = _synthesis_step(a, d, bank, decomp.boundary_mode, sizes[lvl - 1])
    return a


def band_components(signal, bank: FilterBank | None = None, level: int = 3,
                    mode: BoundaryMode | str = BoundaryMode.PERIODIC) -> BandComponents:
    """Reconstruct one full-length series per coefficient set.

    Each band comes from the inverse transform with every other coefficient
    set zeroed, so the bands add up to the input.
    """
    bank = bank or daubechies_filters(4)
    dec = dwt_decompose(signal, bank, level, mode)
    zeros_d = [np.zeros_like(d) for d in dec.details]
    low = idwt_reconstruct(dec.with_coefficients(dec.approximation, zeros_d), bank)
    highs = []
    for i, d in enumerate(dec.details):
        ds = list(zeros_d)
        ds[i] = d
        highs.append(idwt_reconstruct(dec.with_coefficients(np.zeros_like(dec.approximation), ds), bank))
    return BandComponents(low, tuple(highs))


def endpoint_kernels(window: int, bank: FilterBank | None = None, level: int = 3,
                     mode: BoundaryMode | str = BoundaryMode.SYMMETRIC) -> np.ndarray:
    """Weights mapping a length-``window`` segment to the band values at its last sample.

    Row 0 is the low band, row ``i`` the ``D_i`` band; the rows sum to a unit
    impulse on the last sample because the bands add up to the input.
    """
    comps = band_components(np.eye(window), bank, level, mode)
    return np.stack([b[:, -1] for b in comps.bands])


def causal_band_components(signal, window: int, bank: FilterBank | None = None, level: int = 3,
                           mode: BoundaryMode | str = BoundaryMode.SYMMETRIC) -> BandComponents:
    """Band values read at the end of a trailing window, for every sample.

    ``out[..., t]`` equals the last sample of ``band_components`` applied to
    ``signal[..., t - window + 1 : t + 1]``, so it depends on no later sample.
    Samples before the first full window see the series padded on the left
    with its first value.
    """
    x = np.asarray(signal, dtype=float)
    if x.shape[-1] < 1:
        raise WaveletError("empty signal")
    if not np.isfinite(x).all():
        raise WaveletError("signal contains non-finite values")
    kern = endpoint_kernels(window, bank, level, mode)
    pad = np.concatenate([np.repeat(x[..., :1], window - 1, axis=-1), x], axis=-1)
    frames = np.lib.stride_tricks.sliding_window_view(pad, window, axis=-1)
    bands = [frames @ k for k in kern]
    return BandComponents(bands[0], tuple(bands[1:]))


def write_components_csv(components: BandComponents, path, start: int = 0) -> None:
    """Single-series export: columns ``t, rA, rD1, ..., rDj``."""
    low = np.asarray(components.low_frequency)
    if low.ndim != 1:
        raise WaveletError("per-series export expects 1-D components")
    cols = [np.arange(start, start + len(low)), low, *components.high_frequency]
    header = "t,rA," + ",".join(f"rD{i + 1}" for i in range(len(components.high_frequency)))
    table = np.column_stack(cols)
    fmt = ["%d"] + ["%.17g"] * (table.shape[1] - 1)
    np.savetxt(path, table, delimiter=",", header=header, comments="", fmt=fmt)
