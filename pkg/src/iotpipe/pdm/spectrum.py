"""Welch-averaged periodogram and the spectral feature block.

Windows are 2048 samples with 50 % overlap; each window has its mean removed
and is multiplied by a periodic Hann taper before the FFT. The trailing
partial window is dropped. Power is one-sided and normalised so a bin-centred
sine of amplitude A reads A**2 / 2 at its bin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WINDOW = 2048
HOP = WINDOW // 2
N_BANDS = 16
BAND_LOW_HZ = 1.0
ENERGY_FLOOR = 1e-20

SPECTRAL_STATS = tuple(f"band{b:02d}" for b in range(N_BANDS)) + (
    "dominant_freq_hz", "dominant_magnitude", "spectral_centroid_hz", "spectral_entropy")


class SpectrumError(ValueError):
    pass


def hann(n: int = WINDOW) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def prepared_windows(values, window: int = WINDOW) -> np.ndarray:
    """Detrended, tapered analysis windows, shape (n_windows, window)."""
    x = np.asarray(values, dtype=np.float64)
    if x.size < window:
        raise SpectrumError(f"need at least {window} samples, got {x.size}")
    n_win = 1 + (x.size - window) // (window // 2)
    idx = np.arange(window)[None, :] + (window // 2) * np.arange(n_win)[:, None]
    frames = x[idx]
    frames = frames - frames.mean(axis=1, keepdims=True)
    return frames * hann(window)[None, :]


def one_sided_scale(spectrum_sq: np.ndarray, window: int = WINDOW) -> np.ndarray:
    """|X|^2 -> one-sided power with coherent-gain normalisation."""
    w = hann(window)
    p = spectrum_sq / (w.sum() ** 2)
    p[..., 1:] *= 2.0
    if window % 2 == 0:
        p[..., -1] /= 2.0
    return p


def periodogram(values, rate_hz: float, window: int = WINDOW) -> tuple[np.ndarray, np.ndarray]:
    """Averaged one-sided power per frequency bin, DC bin included."""
    frames = prepared_windows(values, window)
    spec = np.fft.rfft(frames, axis=1)
    power = one_sided_scale((spec.real**2 + spec.imag**2), window).mean(axis=0)
    freqs = np.arange(window // 2 + 1) * (float(rate_hz) / window)
    return freqs, power


def band_edges(rate_hz: float) -> np.ndarray:
    # power form keeps edges that are exact powers of two exact (32 Hz at 2048 Hz)
    ratio = (rate_hz / 2.0) / BAND_LOW_HZ
    return BAND_LOW_HZ * ratio ** (np.arange(N_BANDS + 1) / N_BANDS)


def band_index(freqs: np.ndarray, rate_hz: float) -> np.ndarray:
    """Band of each bin, -1 for bins outside [1 Hz, Nyquist] and for DC.

    Band b covers [edge_b, edge_b+1); the last band also includes Nyquist.
    """
    edges = band_edges(rate_hz)
    b = np.searchsorted(edges, freqs, side="right") - 1
    b[freqs == edges[-1]] = N_BANDS - 1
    b[(freqs < edges[0]) | (freqs > edges[-1])] = -1
    b[0] = -1
    return b


def band_powers(freqs: np.ndarray, power: np.ndarray, rate_hz: float) -> np.ndarray:
    """Unnormalised power summed per band."""
    b = band_index(freqs, rate_hz)
    keep = b >= 0
    return np.bincount(b[keep], weights=power[keep], minlength=N_BANDS)


@dataclass
class SpectrumFeatures:
    band_energies: np.ndarray
    dominant_freq_hz: float
    dominant_magnitude: float
    spectral_centroid_hz: float
    spectral_entropy: float

    def as_list(self) -> list[float]:
        return [*map(float, self.band_energies), self.dominant_freq_hz, self.dominant_magnitude,
                self.spectral_centroid_hz, self.spectral_entropy]


def entropy_bits(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum()) + 0.0


def spectrum_features(values, rate_hz: float) -> SpectrumFeatures:
    x = np.asarray(values, dtype=np.float64)
    freqs, power = periodogram(x, rate_hz)
    ac = power[1:]
    total_ac = float(ac.sum())
    bands = band_powers(freqs, power, rate_hz)
    band_total = float(bands.sum())
    scale = max(1.0, float(np.mean(x * x)))
    if band_total <= ENERGY_FLOOR * scale:
        normalized = np.full(N_BANDS, 1.0 / N_BANDS)
    else:
        normalized = bands / band_total
    if total_ac <= ENERGY_FLOOR * scale:
        dom_f = dom_mag = centroid = 0.0
    else:
        k = int(np.argmax(ac)) + 1
        dom_f, dom_mag = float(freqs[k]), float(power[k])
        centroid = float((freqs[1:] * ac).sum() / total_ac)
    return SpectrumFeatures(normalized, dom_f, dom_mag, centroid, entropy_bits(normalized))
