# utils/waveform.py

from __future__ import annotations

import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Tuple

import numpy as np
from scipy import signal as sps

# Largest denominator accepted when turning a rate ratio into up/down factors
MAX_RATIO_DENOMINATOR = 1000
KAISER_BETA = 5.0


class DegenerateSignalWarning(UserWarning):
    """Raised through warnings.warn when a signal carries no usable range"""


@dataclass(frozen=True, eq=False)
class Waveform:
    """One-channel sampled signal. Samples are copied and made read-only."""

    samples: np.ndarray
    rate: float

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be one channel, got shape {samples.shape}")
        if samples.size == 0:
            raise ValueError("waveform has no samples")
        if not self.rate > 0:
            raise ValueError(f"sample rate must be positive, got {self.rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "rate", float(self.rate))

    def __len__(self):
        return int(self.samples.size)

    @property
    def duration(self) -> float:
        return len(self) / self.rate


@dataclass(frozen=True)
class SpeedGrid:
    n: int
    s: float
    factors: Tuple[float, ...]

    def index_of_unity(self) -> int:
        return self.n // 2


def minmax_normalize(x: Waveform) -> Waveform:
    """Affine map of the samples onto [-1, 1]; a flat signal becomes zeros"""
    lo = x.samples.min()
    hi = x.samples.max()
    if hi == lo:
        warnings.warn(
            f"constant signal (value {lo:g}) cannot be min-max normalized; returning zeros",
            DegenerateSignalWarning,
            stacklevel=2,
        )
        return Waveform(np.zeros_like(x.samples), x.rate)
    if lo == -1.0 and hi == 1.0:
        return x
    y = 2.0 * (x.samples - lo) / (hi - lo) - 1.0
    return Waveform(np.clip(y, -1.0, 1.0), x.rate)


def _target_length(length, from_rate, to_rate):
    return max(1, int(round(length * to_rate / from_rate)))


def resample(x: Waveform, to_rate: float) -> Waveform:
    """
    Band-limited rate conversion with a Kaiser-windowed sinc (polyphase) filter.
    Output length is round(len * to_rate / rate).
    """
    if not to_rate > 0:
        raise ValueError(f"target rate must be positive, got {to_rate}")
    if to_rate == x.rate:
        return x

    ratio = Fraction(to_rate / x.rate).limit_denominator(MAX_RATIO_DENOMINATOR)
    out = sps.resample_poly(
        x.samples, ratio.numerator, ratio.denominator, window=("kaiser", KAISER_BETA)
    )
    length = _target_length(len(x), x.rate, to_rate)
    if out.size >= length:
        out = out[:length]
    else:
        out = np.pad(out, (0, length - out.size), mode="edge")
    return Waveform(out, to_rate)


def fit_length(x: Waveform, length: int) -> Waveform:
    """Loop-pad (tile) short signals, center-crop long ones"""
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    n = len(x)
    if n == length:
        return x
    if n < length:
        return Waveform(np.resize(x.samples, length), x.rate)
    start = (n - length) // 2
    return Waveform(x.samples[start:start + length], x.rate)


def speed_perturb(x: Waveform, factor: float) -> Waveform:
    """
    Play the signal `factor` times faster: a tone at f comes out at f * factor.
    Rate and length are kept, so the feature geometry does not move.
    """
    if not factor > 0:
        raise ValueError(f"speed factor must be positive, got {factor}")
    if factor == 1.0:
        return x
    stretched = resample(x, x.rate / factor)
    return fit_length(Waveform(stretched.samples, x.rate), len(x))


def speed_grid(n: int, s: float) -> SpeedGrid:
    """Symmetric grid of n speed factors 1 + k*s around 1.0"""
    if not isinstance(n, (int, np.integer)) or n < 1 or n % 2 == 0:
        raise ValueError(f"number of speed categories must be a positive odd integer, got {n}")
    if not s > 0:
        raise ValueError(f"speed step must be positive, got {s}")
    half = (n - 1) // 2
    if half * s >= 1:
        raise ValueError(f"grid ({n}, {s}) would produce a non-positive speed factor")
    factors = tuple(1.0 + k * s for k in range(-half, half + 1))
    return SpeedGrid(n=int(n), s=float(s), factors=factors)


def virtual_label(base_label: int, speed_index: int, n: int) -> int:
    """Label of a speed-perturbed copy: each (class, speed) pair is its own class"""
    if base_label < 0:
        raise ValueError(f"base label must be >= 0, got {base_label}")
    if not 0 <= speed_index < n:
        raise ValueError(f"speed index {speed_index} outside 0..{n - 1}")
    return base_label * n + speed_index


def base_label(virtual, n: int):
    """Inverse of virtual_label; works on ints and integer tensors alike"""
    return virtual // n
