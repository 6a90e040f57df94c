"""Additive white Gaussian noise at a target per-sample SNR.

The Gaussian stream is reproducible across platforms and languages:

* uniform ``u_i`` for ``i = 0, 1, ...`` is SplitMix64 output number ``i``
  for the given seed (state starts at ``seed``, increments by
  ``0x9E3779B97F4A7C15``, finalised with the standard mix), mapped to
  ``((z >> 11) + 0.5) * 2**-53`` so it lies strictly inside (0, 1);
* pairs ``(u_2k, u_2k+1)`` go through Box-Muller:
  ``g_2k = sqrt(-2 ln u_2k) cos(2 pi u_2k+1)``,
  ``g_2k+1 = sqrt(-2 ln u_2k) sin(2 pi u_2k+1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from heartsig.errors import EmptyInput
from heartsig.ingest import EcgRecord

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def splitmix64(seed: int, n: int) -> np.ndarray:
    """First ``n`` SplitMix64 outputs for ``seed``."""
    state = np.uint64(seed & _MASK64)
    with np.errstate(over="ignore"):
        z = state + _GOLDEN * np.arange(1, n + 1, dtype=np.uint64)
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def uniforms(seed: int, n: int) -> np.ndarray:
    z = splitmix64(seed, n)
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def gaussian(seed: int, n: int) -> np.ndarray:
    """Standard-normal vector of length ``n`` (Box-Muller on the SplitMix64 stream)."""
    m = (n + 1) // 2
    u = uniforms(seed, 2 * m)
    r = np.sqrt(-2.0 * np.log(u[0::2]))
    theta = 2.0 * np.pi * u[1::2]
    out = np.empty(2 * m)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n]


def signal_power(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise EmptyInput("signal power of an empty vector")
    return float(np.mean(np.abs(x) ** 2))


def snr_to_linear(snr_db: float) -> float:
    return 10.0 ** (snr_db / 10.0)


@dataclass(frozen=True)
class NoisyResult:
    signal: np.ndarray
    noise_std: float
    degenerate: bool = False


def add_awgn(x, snr_db: float, seed: int) -> NoisyResult:
    """Return ``x + sqrt(E_s / SNR_lin) * g``; a zero-power input is returned unchanged."""
    x = np.asarray(x, dtype=np.float64)
    es = signal_power(x)
    if es == 0.0:
        return NoisyResult(x.copy(), 0.0, True)
    std = float(np.sqrt(es / snr_to_linear(snr_db)))
    return NoisyResult(x + std * gaussian(seed, x.size), std)


def derive_seed(seed: int, snr_db: float) -> int:
    """Per-SNR seed; equal SNR values map to equal seeds."""
    return (seed ^ int(round(snr_db * 1000)) * 0x9E3779B1) & _MASK64


def noisy_record(record: EcgRecord, snr_db: float, seed: int, channel: int = 0) -> EcgRecord:
    """Copy of ``record`` with AWGN added to one channel in millivolts (stored back as float adu)."""
    spec = record.header.signals[channel]
    noisy_mv = add_awgn(record.millivolts(channel), snr_db, seed).signal
    channels = record.channels.astype(np.float64)
    channels[channel] = noisy_mv * spec.gain + spec.baseline
    return replace(record, channels=channels)
