"""Spectral denoising, delay-and-sum enhancement, and PSD utilities.

The enhancement chain mirrors how the capture hardware is used: each channel
is divided in the frequency domain by the magnitude spectrum of a background
capture (with a unity floor so quiet bins pass through untouched), channels
are aligned to the first one by cross-correlation, and the aligned channels
are summed.  Welch power spectra then feed the detector and estimator stages.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import correlate, resample_poly

from .signals import SensorTrace

SPECTRAL_FLOOR = 1.0

_WINDOWS = ("hann", "hamming", "blackman", "rectangular")


@dataclass
class NoiseReference:
    """Magnitude spectrum of a background capture, one value per rfft bin."""

    magnitudes: np.ndarray

    def __post_init__(self):
        self.magnitudes = np.asarray(self.magnitudes, dtype=np.float64)
        if self.magnitudes.ndim != 1 or self.magnitudes.size < 1:
            raise ValueError("magnitudes must be a non-empty 1-D array")
        if np.any(self.magnitudes < 0) or not np.all(np.isfinite(self.magnitudes)):
            raise ValueError("magnitudes must be finite and non-negative")

    @property
    def n_bins(self) -> int:
        return self.magnitudes.size

    @classmethod
    def from_signal(cls, background: np.ndarray) -> "NoiseReference":
        """Build a reference from a noise-only capture.

        The capture's spectrum is averaged over overlapping segments before
        being interpolated back onto the full transform grid: a single
        transform of a random capture has near-zero bins, and dividing by
        those would spray spurious peaks across the whitened spectrum.
        """
        x = np.asarray(background, dtype=np.float64)
        if x.ndim != 1 or x.size < 2:
            raise ValueError("background must be a 1-D signal")
        n = x.size
        out_bins = n // 2 + 1
        # an eighth of the capture, as a power of two, gives ~15 overlapped
        # segments; too-short captures fall back to the raw transform
        segment = 2 ** int(math.floor(math.log2(max(n // 8, 1)))) if n >= 16 else 1
        if segment < 4:
            return cls(magnitudes=np.abs(np.fft.rfft(x)))
        spec = welch_psd(x, 2.0, segment_len=segment)
        # expected squared transform magnitude of a stationary capture is
        # density * fs * n / 2, and the fs factors cancel
        mags = np.sqrt(spec.densities * 2.0 * n / 2.0)
        grid_out = np.linspace(0.0, 1.0, out_bins)
        grid_in = np.linspace(0.0, 1.0, mags.size)
        return cls(magnitudes=np.interp(grid_out, grid_in, mags))

    @classmethod
    def unity(cls, n_samples: int) -> "NoiseReference":
        """A no-op reference for a signal of ``n_samples`` samples."""
        return cls(magnitudes=np.ones(n_samples // 2 + 1))

    def save_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["bin_index", "magnitude"])
            for i, m in enumerate(self.magnitudes):
                writer.writerow([i, repr(float(m))])

    @classmethod
    def load_csv(cls, path: str | Path) -> "NoiseReference":
        with Path(path).open("r", newline="") as handle:
            reader = csv.reader(handle)
            header = next(reader, None)
            if header != ["bin_index", "magnitude"]:
                raise ValueError(f"{path}: expected 'bin_index,magnitude' header")
            mags = [float(row[1]) for row in reader if row]
        return cls(magnitudes=np.asarray(mags))


@dataclass
class PowerSpectrum:
    """One-sided PSD on a uniform frequency grid."""

    frequencies: np.ndarray
    densities: np.ndarray
    resolution_df: float
    normalized: bool = False

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=np.float64)
        self.densities = np.asarray(self.densities, dtype=np.float64)
        if self.frequencies.shape != self.densities.shape:
            raise ValueError("frequencies and densities must have equal shape")
        if self.frequencies.ndim != 1 or self.frequencies.size < 2:
            raise ValueError("spectrum needs at least two bins")
        df = float(self.resolution_df)
        spacing = np.diff(self.frequencies)
        if not np.allclose(spacing, df, rtol=1e-9, atol=1e-12):
            raise ValueError("frequency grid spacing must equal resolution_df")
        self.resolution_df = df

    @property
    def n_bins(self) -> int:
        return self.frequencies.size

    def band(self, lo_hz: float, hi_hz: float) -> "PowerSpectrum":
        sel = (self.frequencies >= lo_hz) & (self.frequencies <= hi_hz)
        if sel.sum() < 2:
            raise ValueError("band selects fewer than two bins")
        return PowerSpectrum(
            frequencies=self.frequencies[sel],
            densities=self.densities[sel],
            resolution_df=self.resolution_df,
            normalized=self.normalized,
        )

    def save_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["frequency_hz", "density"])
            for f, d in zip(self.frequencies, self.densities):
                writer.writerow([repr(float(f)), repr(float(d))])

    @classmethod
    def load_csv(cls, path: str | Path, normalized: bool = False) -> "PowerSpectrum":
        with Path(path).open("r", newline="") as handle:
            reader = csv.reader(handle)
            header = next(reader, None)
            if header != ["frequency_hz", "density"]:
                raise ValueError(f"{path}: expected 'frequency_hz,density' header")
            rows = [(float(r[0]), float(r[1])) for r in reader if r]
        if len(rows) < 2:
            raise ValueError(f"{path}: spectrum needs at least two bins")
        freqs = np.asarray([r[0] for r in rows])
        dens = np.asarray([r[1] for r in rows])
        return cls(
            frequencies=freqs,
            densities=dens,
            resolution_df=float(freqs[1] - freqs[0]),
            normalized=normalized,
        )


# ---------------------------------------------------------------------------
# Denoising and alignment
# ---------------------------------------------------------------------------


def spectral_denoise(channel: np.ndarray, reference: NoiseReference) -> np.ndarray:
    """Divide a channel's spectrum by the floored background magnitudes.

    Bins whose background magnitude is below 1 are divided by 1 instead, so
    the floor never amplifies.  Only magnitudes are divided; the channel's
    phase is preserved exactly.  A unity reference is an identity within FFT
    round-off.
    """
    x = np.asarray(channel, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("channel must be a 1-D signal")
    expected = x.size // 2 + 1
    if reference.n_bins != expected:
        raise ValueError(
            f"noise reference has {reference.n_bins} bins, signal needs {expected}"
        )
    spectrum = np.fft.rfft(x)
    floored = np.maximum(reference.magnitudes, SPECTRAL_FLOOR)
    return np.fft.irfft(spectrum / floored, n=x.size)


def estimate_delay(s_i: np.ndarray, s_ref: np.ndarray, max_lag: int) -> int:
    """Lag (samples) that best aligns ``s_i`` to ``s_ref``.

    Returns the integer lag L in [-max_lag, max_lag] maximizing
    sum_t s_i[t + L] * s_ref[t]; shifting s_i by the result lines it up with
    the reference.  Ties resolve to the smallest |L| (then the smaller L).
    """
    a = np.asarray(s_i, dtype=np.float64)
    b = np.asarray(s_ref, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.size != b.size:
        raise ValueError("sequences must be 1-D and of equal length")
    n = a.size
    if not 0 <= max_lag < n // 2:
        raise ValueError("max_lag must satisfy 0 <= max_lag < len/2")
    if not (np.any(a) and np.any(b)):
        raise ValueError("cannot estimate a delay from zero-energy input")
    # full correlation index k corresponds to lag k - (n - 1)
    c = correlate(a, b, mode="full", method="fft")
    lags = np.arange(-max_lag, max_lag + 1)
    window = c[(n - 1) - max_lag : (n - 1) + max_lag + 1]
    peak = window.max()
    hits = np.flatnonzero(window == peak)
    best = min(hits, key=lambda idx: (abs(int(lags[idx])), int(lags[idx])))
    return int(lags[best])


def shift_signal(x: np.ndarray, lag: int) -> np.ndarray:
    """Return x advanced by ``lag`` samples (out[t] = x[t + lag]), zero-filled
    at the edges."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    out = np.zeros_like(x)
    if lag >= n or lag <= -n:
        return out
    if lag >= 0:
        out[: n - lag] = x[lag:]
    else:
        out[-lag:] = x[: n + lag]
    return out


def delay_and_sum(
    trace: SensorTrace, reference: NoiseReference, max_lag: int
) -> np.ndarray:
    """Denoise every channel, align each to channel 0, and sum.

    A single-channel trace returns its denoised channel.  Coherent content
    gains a factor of n_channels in amplitude while independent noise gains
    only sqrt(n_channels).
    """
    denoised = [spectral_denoise(trace.channels[i], reference) for i in range(trace.n_channels)]
    out = denoised[0].copy()
    for ch in denoised[1:]:
        lag = estimate_delay(ch, denoised[0], max_lag)
        out += shift_signal(ch, lag)
    return out


# ---------------------------------------------------------------------------
# Spectra
# ---------------------------------------------------------------------------


def _window(name: str, n: int) -> np.ndarray:
    if name == "rectangular":
        return np.ones(n)
    k = np.arange(n)
    if name == "hann":
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)
    if name == "hamming":
        return 0.54 - 0.46 * np.cos(2.0 * np.pi * k / n)
    if name == "blackman":
        return (
            0.42
            - 0.5 * np.cos(2.0 * np.pi * k / n)
            + 0.08 * np.cos(4.0 * np.pi * k / n)
        )
    raise ValueError(f"unknown window '{name}' (choose from {_WINDOWS})")


def _is_pow2(n: int) -> bool:
    return n >= 2 and (n & (n - 1)) == 0


def default_segment_len(fs: float, n_samples: int) -> int:
    """Coarse segment policy: about one second of samples, as a power of two,
    never longer than the signal."""
    target = 2 ** int(math.ceil(math.log2(fs)))
    while target > n_samples:
        target //= 2
    if target < 2:
        raise ValueError("signal too short for any power-of-two segment")
    return target


def welch_psd(
    signal: np.ndarray,
    fs: float,
    segment_len: int,
    overlap_fraction: float = 0.5,
    window: str = "hann",
    nfft: int | None = None,
) -> PowerSpectrum:
    """Averaged-periodogram PSD (one-sided, density scaling).

    Segments of ``segment_len`` samples (a power of two) advance by
    segment_len * (1 - overlap_fraction); each is tapered and transformed,
    and the squared magnitudes are averaged and scaled by 1/(fs * sum(w^2)).
    ``nfft`` >= segment_len zero-pads each segment, which refines the bin
    grid without changing the underlying spectral window.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("signal must be 1-D")
    if fs <= 0:
        raise ValueError("fs must be positive")
    if not _is_pow2(segment_len):
        raise ValueError("segment_len must be a power of two")
    if segment_len > x.size:
        raise ValueError(
            f"signal of {x.size} samples is shorter than one segment ({segment_len})"
        )
    if not 0.0 <= overlap_fraction < 1.0:
        raise ValueError("overlap_fraction must be in [0, 1)")
    if nfft is None:
        nfft = segment_len
    if nfft < segment_len:
        raise ValueError("nfft must be >= segment_len")

    w = _window(window, segment_len)
    hop = max(1, int(round(segment_len * (1.0 - overlap_fraction))))
    starts = range(0, x.size - segment_len + 1, hop)
    scale = 1.0 / (fs * float(np.sum(w * w)))

    acc = np.zeros(nfft // 2 + 1, dtype=np.float64)
    count = 0
    for s0 in starts:
        seg = x[s0 : s0 + segment_len] * w
        spec = np.fft.rfft(seg, n=nfft)
        acc += (spec.real**2 + spec.imag**2) * scale
        count += 1
    psd = acc / count
    # one-sided: double everything except DC and (for even nfft) Nyquist
    last = psd.size - 1 if nfft % 2 == 0 else psd.size
    psd[1:last] *= 2.0
    df = fs / nfft
    freqs = np.arange(psd.size) * df
    return PowerSpectrum(frequencies=freqs, densities=psd, resolution_df=df)


def log_normalize(spectrum: PowerSpectrum) -> PowerSpectrum:
    """Map densities to [0, 1] via log compression then min-max scaling.

    The log offset is 1e-12 of the peak density, keeping the mapping
    invariant to overall scale.  A constant spectrum maps to all zeros.
    """
    d = spectrum.densities
    if np.any(d < 0):
        raise ValueError("densities must be non-negative")
    peak = float(d.max(initial=0.0))
    if peak == 0.0:
        values = np.zeros_like(d)
    else:
        logd = np.log(d + 1e-12 * peak)
        lo, hi = float(logd.min()), float(logd.max())
        values = np.zeros_like(d) if hi == lo else (logd - lo) / (hi - lo)
    return PowerSpectrum(
        frequencies=spectrum.frequencies.copy(),
        densities=values,
        resolution_df=spectrum.resolution_df,
        normalized=True,
    )


def resample(signal: np.ndarray, factor: float) -> np.ndarray:
    """Band-limited (windowed-sinc) resampling by a positive real factor.

    The output has round(len * factor) samples; read at the original sample
    rate it is the input stretched in time by ``factor``, so a tone at f
    appears at f / factor.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("signal must be a 1-D array of at least 2 samples")
    if not (factor > 0 and math.isfinite(factor)):
        raise ValueError("factor must be positive and finite")
    target = int(round(x.size * factor))
    if target < 1:
        raise ValueError("factor is too small for this signal length")
    if factor == 1.0:
        return x.copy()
    frac = Fraction(factor).limit_denominator(1000)
    y = resample_poly(x, frac.numerator, frac.denominator)
    if y.size >= target:
        return y[:target]
    return np.pad(y, (0, target - y.size))
