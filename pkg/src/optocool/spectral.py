"""Spectral estimators and the measurement observables built on them.

All spectra are one-sided densities in (unit of the series)^2/Hz.  Hann windows
are density-calibrated, so a white floor reads its true level and the power of
a tone is recovered by integrating over its bins (:func:`band_power`), not by
reading the peak value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .model import K_B, MembraneParams

# segments processed per block by welch_psd, keeps the FFT workspace bounded
_WELCH_BLOCK = 64
# stopband attenuation of the decimation filters (dB)
_FIR_ATTEN = 90.0


@dataclass(frozen=True)
class Spectrum:
    """One-sided PSD on a uniform, strictly increasing grid.

    Attributes
    ----------
    freq : ndarray
        Frequencies (Hz).
    psd : ndarray
        Density (m^2/Hz for displacement series).
    n_averages : int
        Number of segments averaged (summed over runs for ensemble averages).
    resolution_bw : float
        Equivalent noise bandwidth of one bin (Hz).
    """

    freq: np.ndarray
    psd: np.ndarray
    n_averages: int
    resolution_bw: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        freq = np.asarray(self.freq, dtype=float)
        psd = np.asarray(self.psd, dtype=float)
        if freq.shape != psd.shape or freq.ndim != 1 or freq.size < 2:
            raise ValueError("freq and psd must be 1-D arrays of equal length >= 2")
        if np.any(np.diff(freq) <= 0):
            raise ValueError("freq must be strictly increasing")
        if np.any(psd < 0) or not np.all(np.isfinite(psd)):
            raise ValueError("psd must be finite and >= 0")
        object.__setattr__(self, "freq", freq)
        object.__setattr__(self, "psd", psd)

    @property
    def omega(self):
        return 2 * np.pi * self.freq

    @property
    def df(self):
        return float(self.freq[1] - self.freq[0])

    def select(self, f_lo, f_hi):
        """Bins with ``f_lo <= f <= f_hi``."""
        keep = (self.freq >= f_lo) & (self.freq <= f_hi)
        if keep.sum() < 2:
            raise ValueError("band contains fewer than two bins")
        return Spectrum(self.freq[keep], self.psd[keep], self.n_averages, self.resolution_bw,
                        dict(self.metadata))


@dataclass(frozen=True)
class ZeroSpanTrace:
    """Band temperature versus time around a fixed centre frequency."""

    t: np.ndarray
    temperature: np.ndarray
    center_freq: float
    bandwidth: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        temp = np.asarray(self.temperature, dtype=float)
        if t.shape != temp.shape or t.ndim != 1:
            raise ValueError("t and temperature must be 1-D arrays of equal length")
        if np.any(temp < 0):
            raise ValueError("temperature must be >= 0")
        if t.size > 2 and not np.allclose(np.diff(t), t[1] - t[0], rtol=1e-6, atol=0):
            raise ValueError("time grid must be uniform")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "temperature", temp)

    def shifted(self, t_offset):
        """Same trace with ``t_offset`` added to the time axis."""
        return ZeroSpanTrace(self.t + t_offset, self.temperature, self.center_freq,
                             self.bandwidth, dict(self.metadata))


def _hann_enbw(n):
    w = signal.get_window("hann", n)
    return float(np.sum(w**2) / np.sum(w) ** 2) * n


def welch_psd(series, sample_rate, segment_len=None, overlap_frac=0.5, window="hann"):
    """Averaged-periodogram PSD estimate.

    Parameters
    ----------
    series : array_like
        Real samples.
    sample_rate : float
        Hz.
    segment_len : int, optional
        Samples per segment; defaults to ``len(series) // 8``.
    overlap_frac : float
        Fractional overlap of consecutive segments, in [0, 0.9].
    window : {"hann"}

    Returns
    -------
    Spectrum
        Mean-removed, one-sided, density-scaled.  The DC bin is dropped so the
        frequency grid starts at ``sample_rate / segment_len``.
    """
    x = np.asarray(series, dtype=float)
    if window != "hann":
        raise ValueError("only the hann window is supported")
    if not 0 <= overlap_frac <= 0.9:
        raise ValueError("overlap_frac must lie in [0, 0.9]")
    if segment_len is None:
        segment_len = len(x) // 8
    segment_len = int(segment_len)
    if segment_len < 4 or segment_len > len(x):
        raise ValueError(f"series too short: {len(x)} samples for segments of {segment_len}")
    noverlap = int(round(overlap_frac * segment_len))
    step = segment_len - noverlap
    n_seg = (len(x) - noverlap) // step
    # Block the segments so long records never materialise all FFTs at once;
    # each block is an exact sub-series, so the mean equals a single welch call.
    acc = None
    for s0 in range(0, n_seg, _WELCH_BLOCK):
        k = min(_WELCH_BLOCK, n_seg - s0)
        chunk = x[s0 * step: s0 * step + (k - 1) * step + segment_len]
        f, pxx = signal.welch(chunk, fs=sample_rate, window="hann", nperseg=segment_len,
                              noverlap=noverlap, detrend="constant", scaling="density",
                              return_onesided=True)
        acc = pxx * k if acc is None else acc + pxx * k
    psd = acc / n_seg
    rbw = _hann_enbw(segment_len) * sample_rate / segment_len
    return Spectrum(f[1:], psd[1:], n_seg, rbw,
                    dict(estimator="welch", segment_len=segment_len, overlap_frac=overlap_frac))


def average_spectra(spectra):
    """Mean of spectra on an identical grid, weighted by their averaging counts."""
    spectra = list(spectra)
    if not spectra:
        raise ValueError("no spectra to average")
    f0 = spectra[0].freq
    for s in spectra[1:]:
        if s.freq.shape != f0.shape or not np.allclose(s.freq, f0, rtol=1e-12, atol=0):
            raise ValueError("spectra must share one frequency grid")
    w = np.array([s.n_averages for s in spectra], dtype=float)
    psd = np.sum([wi * s.psd for wi, s in zip(w, spectra)], axis=0) / w.sum()
    return Spectrum(f0, psd, int(w.sum()), spectra[0].resolution_bw,
                    dict(spectra[0].metadata, n_runs=len(spectra)))


def _lowpass_fir(sample_rate, cutoff, transition, q):
    """Kaiser low-pass whose group delay is a whole number of decimated samples."""
    numtaps, beta = signal.kaiserord(_FIR_ATTEN, transition / (0.5 * sample_rate))
    half = max(int(math.ceil((numtaps - 1) / (2 * q))), 1)
    numtaps = 2 * half * q + 1
    taps = signal.firwin(numtaps, cutoff, window=("kaiser", beta), fs=sample_rate)
    return taps, half


def _baseband(x, sample_rate, f_shift, cutoff, transition, q):
    """Mix ``x`` down by ``f_shift``, low-pass and decimate by ``q``.

    Returns the complex samples free of filter edge effects and the index
    (at the input rate) of the first one.
    """
    n = np.arange(len(x))
    z = x * np.exp(-2j * np.pi * f_shift / sample_rate * n)
    taps, half = _lowpass_fir(sample_rate, cutoff, transition, q)
    full = signal.upfirdn(taps, z, up=1, down=q)
    # output k is centred on input sample (k - half) q; keep fully supported ones
    last = (len(x) - 1) // q
    zd = full[2 * half: last + 1]
    if zd.size == 0:
        raise ValueError("series too short for the requested filter bandwidth")
    return zd, half * q


def zoom_psd(series, sample_rate, f_center, span, resolution_bw, overlap_frac=0.5):
    """High-resolution PSD of the band ``f_center +- span / 2``.

    The series is heterodyned to baseband, low-pass filtered, decimated to a rate
    of about twice the span and Welch-averaged as a complex signal.  The mixing
    frequency is snapped to the bin grid so zoom and full-rate Welch bins line up.

    Parameters
    ----------
    f_center, span : float
        Band centre and full width (Hz).
    resolution_bw : float
        Target noise bandwidth per bin (Hz); the achieved value is reported.

    Returns
    -------
    Spectrum
        One-sided density (twice the baseband density).
    """
    x = np.asarray(series, dtype=float)
    nyq = sample_rate / 2
    if span <= 0 or resolution_bw <= 0:
        raise ValueError("span and resolution_bw must be > 0")
    if f_center - span / 2 <= 0 or f_center + span / 2 >= nyq:
        raise ValueError("zoom band must lie strictly inside (0, Nyquist)")
    q = max(int(sample_rate // (2 * span)), 1)
    fs_d = sample_rate / q
    nperseg = int(math.ceil(1.5 * fs_d / resolution_bw))
    df = fs_d / nperseg
    f_mix = round(f_center / df) * df
    # flat to span/2, stopband before anything aliases into the kept band
    transition = min(span, fs_d - span) if fs_d > 1.5 * span else span / 2
    zd, i0 = _baseband(x - x.mean(), sample_rate, f_mix, 0.5 * span + 0.5 * transition,
                       transition, q)
    if nperseg > len(zd):
        raise ValueError(
            f"span too small for series length: need {nperseg} decimated samples, have {len(zd)}")
    noverlap = int(round(overlap_frac * nperseg))
    # no per-segment detrend: baseband DC is the bin at f_mix, not an offset
    f, pzz = signal.welch(zd, fs=fs_d, window="hann", nperseg=nperseg, noverlap=noverlap,
                          detrend=False, scaling="density", return_onesided=False)
    f = np.fft.fftshift(f)
    pzz = np.fft.fftshift(pzz)
    keep = np.abs(f) <= span / 2 + 1e-9 * df
    n_seg = (len(zd) - noverlap) // (nperseg - noverlap)
    rbw = _hann_enbw(nperseg) * fs_d / nperseg
    return Spectrum(f_mix + f[keep], 2.0 * pzz[keep], n_seg, rbw,
                    dict(estimator="zoom", decimation=q, f_mix=f_mix, t_offset=i0 / sample_rate))


def zero_span_trace(series, sample_rate, f_center, bandwidth, time_resolution,
                    p: MembraneParams, noise_floor=None, t0=0.0):
    """Band temperature of ``series`` around ``f_center`` as a function of time.

    The band ``f_center +- bandwidth / 2`` is isolated by heterodyning and
    low-pass filtering, the envelope power is averaged in bins of
    ``time_resolution`` and converted with T = m omega_m^2 <x^2>_band / k_B.

    Parameters
    ----------
    noise_floor : float, optional
        One-sided density (m^2/Hz) to subtract as ``noise_floor * bandwidth``
        before conversion.  Off by default; negative results are clipped to 0.
    t0 : float
        Time of the first sample of ``series``.

    Returns
    -------
    ZeroSpanTrace
        Time stamps are bin centres.
    """
    x = np.asarray(series, dtype=float)
    if bandwidth <= 0:
        raise ValueError("bandwidth must be > 0")
    if bandwidth < 2 * p.gamma_m / (2 * np.pi):
        raise ValueError("bandwidth must cover several mechanical linewidths")
    if time_resolution < 2.0 / bandwidth:
        raise ValueError(f"time_resolution must be >= 2/bandwidth = {2.0 / bandwidth:g} s")
    if f_center - bandwidth / 2 <= 0 or f_center + bandwidth / 2 >= sample_rate / 2:
        raise ValueError("band must lie strictly inside (0, Nyquist)")
    q = max(int(sample_rate // (4 * bandwidth)), 1)
    fs_d = sample_rate / q
    transition = 0.2 * bandwidth
    zd, i0 = _baseband(x, sample_rate, f_center, 0.5 * bandwidth + 0.5 * transition,
                       transition, q)
    power = 2.0 * np.abs(zd) ** 2
    n_bin = max(int(round(time_resolution * fs_d)), 1)
    n_full = len(power) // n_bin
    if n_full < 1:
        raise ValueError("series shorter than one time bin")
    band = power[: n_full * n_bin].reshape(n_full, n_bin).mean(axis=1)
    if noise_floor is not None:
        band = np.clip(band - noise_floor * bandwidth, 0.0, None)
    t = t0 + i0 / sample_rate + (np.arange(n_full) + 0.5) * n_bin / fs_d - 0.5 / fs_d
    temp = p.k_m * band / K_B
    return ZeroSpanTrace(t, temp, f_center, bandwidth,
                         dict(time_resolution=n_bin / fs_d, noise_subtracted=noise_floor))


def _hann_kernel(n_side=4, oversample=16):
    """Normalised |W|^2 of a long Hann window, sampled in units of one bin."""
    nu = np.arange(-n_side * oversample, n_side * oversample + 1) / oversample
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.sinc(nu) / (1 - nu**2)
    w[np.isclose(np.abs(nu), 1.0)] = 0.5
    k = w**2
    return nu, k / k.sum()


def expected_spectrum(psd_fn, s: Spectrum):
    """What a Hann-window estimator with the bins of ``s`` would read for ``psd_fn``.

    ``psd_fn(freq_hz) -> density`` is averaged over each bin's spectral window,
    which matters wherever the true PSD bends on the scale of a bin (a narrow
    peak, or the dip of a squashed in-loop spectrum).
    """
    nu, k = _hann_kernel()
    f = s.freq[:, None] + nu[None, :] * s.df
    vals = np.asarray(psd_fn(np.abs(f).ravel()), dtype=float).reshape(f.shape)
    return vals @ k


def band_power(s: Spectrum, f_lo, f_hi):
    """Trapezoidal integral of ``s.psd`` over ``[f_lo, f_hi]`` (edges interpolated)."""
    if f_hi < f_lo:
        raise ValueError("empty band: f_hi < f_lo")
    if f_lo < s.freq[0] - 1e-9 * s.df or f_hi > s.freq[-1] + 1e-9 * s.df:
        raise ValueError("band outside the spectrum grid")
    f_lo = max(f_lo, s.freq[0])
    f_hi = min(f_hi, s.freq[-1])
    if f_hi == f_lo:
        return 0.0
    inside = (s.freq > f_lo) & (s.freq < f_hi)
    f = np.concatenate(([f_lo], s.freq[inside], [f_hi]))
    y = np.interp(f, s.freq, s.psd)
    return float(np.trapezoid(y, f))


def band_temperature(s: Spectrum, p: MembraneParams, f_lo=None, f_hi=None):
    """Mode temperature from the band power of a displacement spectrum."""
    f_lo = s.freq[0] if f_lo is None else f_lo
    f_hi = s.freq[-1] if f_hi is None else f_hi
    return p.k_m * band_power(s, f_lo, f_hi) / K_B
