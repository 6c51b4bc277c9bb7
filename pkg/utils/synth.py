# utils/synth.py

from __future__ import annotations

import math
import os
import zlib
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal as sps
from tqdm import tqdm

from utils.datasets import (
    CLASS_NAMES,
    CORPUS_COUNTS,
    NUM_CLASSES,
    SampleRecord,
    write_manifest,
    write_vibration_text,
    write_wav,
)
from utils.waveform import Waveform

MANIFEST_NAME = "manifest.jsonl"
# Ring-down is cut after this many time constants (exp(-8) ~ 3e-4)
RINGDOWN_SPAN = 8.0
PEAK_LEVEL = 0.9


@dataclass(frozen=True)
class SynthProfile:
    """One machine / sensor setup of the synthetic bearing test rig"""

    name: str
    shaft_rate: float
    resonance: float
    decay: float
    snr_db: float
    hum_frequency: float
    acoustic_rate: int
    vibration_rate: int
    duration: float
    vibration_format: str = "text"
    amplitude: float = 1.0
    amplitude_jitter: float = 0.1
    hum_amplitude: float = 0.2
    fir_length: int = 64
    # multiples of the shaft rate for outer race, inner race, ball, cage
    multipliers: Tuple[float, float, float, float] = (3.6, 5.4, 2.4, 0.4)

    def __post_init__(self):
        if self.vibration_format not in ("text", "wav"):
            raise ValueError(f"vibration_format must be 'text' or 'wav', got {self.vibration_format!r}")
        for key in ("shaft_rate", "resonance", "decay", "acoustic_rate", "vibration_rate", "duration",
                    "amplitude", "hum_frequency"):
            if not getattr(self, key) > 0:
                raise ValueError(f"{key} must be positive, got {getattr(self, key)}")
        if not math.isfinite(self.snr_db):
            raise ValueError("SNR must be finite")
        if self.fir_length < 1:
            raise ValueError(f"fir_length must be >= 1, got {self.fir_length}")
        if self.resonance >= self.acoustic_rate / 2 or self.hum_frequency >= self.acoustic_rate / 2:
            raise ValueError(f"{self.name}: acoustic frequencies must stay below {self.acoustic_rate / 2} Hz")
        top = max(self.characteristic_frequency(c) for c in range(1, NUM_CLASSES))
        if top >= self.vibration_rate / 2:
            raise ValueError(f"{self.name}: fault rate {top} Hz exceeds vibration Nyquist")

    @property
    def vibration_resonance(self) -> float:
        """The accelerometer channel cannot carry the acoustic resonance above its Nyquist"""
        return min(self.resonance, 0.4 * self.vibration_rate)

    def characteristic_frequency(self, label: int) -> Optional[float]:
        if label == 0:
            return None
        return self.shaft_rate * self.multipliers[label - 1]

    def reference_power(self) -> float:
        """Mean power of an outer-race impulse train; noise is set against it for every class"""
        return self.amplitude ** 2 * self.characteristic_frequency(1) / (4.0 * self.decay)

    def noise_sigma(self) -> float:
        return math.sqrt(self.reference_power() / 10 ** (self.snr_db / 10.0))


PROFILES = {
    "source": SynthProfile(
        name="source", shaft_rate=30.0, resonance=4000.0, decay=800.0, snr_db=10.0,
        hum_frequency=50.0, acoustic_rate=48000, vibration_rate=5120, duration=4.0,
        vibration_format="text",
    ),
    "target": SynthProfile(
        name="target", shaft_rate=25.0, resonance=3200.0, decay=800.0, snr_db=6.0,
        hum_frequency=60.0, acoustic_rate=42000, vibration_rate=42000, duration=1.0,
        vibration_format="wav",
    ),
}


def _salt(profile):
    return zlib.crc32(profile.name.encode("utf-8"))


def _ringdown(rate, resonance, decay):
    t = np.arange(int(math.ceil(RINGDOWN_SPAN / decay * rate))) / rate
    return np.exp(-decay * t) * np.sin(2 * np.pi * resonance * t)


def _impulse_response(times, amplitudes, rate, resonance, decay, length):
    train = np.zeros(length)
    idx = np.round(np.asarray(times) * rate).astype(np.int64)
    keep = idx < length
    np.add.at(train, idx[keep], np.asarray(amplitudes)[keep])
    return sps.fftconvolve(train, _ringdown(rate, resonance, decay))[:length]


def fault_events(profile: SynthProfile, label: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Impulse times and amplitudes; empty for the healthy class"""
    f_c = profile.characteristic_frequency(label)
    if f_c is None:
        return np.zeros(0), np.zeros(0)
    period = 1.0 / f_c
    count = int(math.ceil(profile.duration * f_c)) + 1
    times = rng.uniform(0.0, period) + np.arange(count) * period
    times = times[times < profile.duration]
    amps = profile.amplitude * (1.0 + profile.amplitude_jitter * rng.standard_normal(times.size))
    amps = np.maximum(amps, 0.0)
    if CLASS_NAMES[label] == "inner_race":
        # the defect rotates with the shaft and passes in and out of the load zone
        amps = amps * np.abs(np.cos(2 * np.pi * profile.shaft_rate * times))
    return times, amps


def acoustic_path(profile: SynthProfile, seed: int) -> np.ndarray:
    """Seeded unit-energy FIR standing in for the air path to the microphone"""
    rng = np.random.default_rng(np.random.SeedSequence([seed, _salt(profile)]))
    taps = rng.standard_normal(profile.fir_length) * np.exp(-np.arange(profile.fir_length) / (profile.fir_length / 4))
    return taps / np.sqrt(np.sum(taps ** 2))


def render_sample(profile: SynthProfile, label: int, rng: np.random.Generator,
                  fir: np.ndarray) -> Tuple[Waveform, Waveform]:
    """Raw (acoustic, vibration) pair of one synthetic recording"""
    if not 0 <= label < NUM_CLASSES:
        raise ValueError(f"label must be in 0..{NUM_CLASSES - 1}, got {label}")
    times, amps = fault_events(profile, label, rng)
    sigma = profile.noise_sigma()

    n_v = int(round(profile.duration * profile.vibration_rate))
    t_v = np.arange(n_v) / profile.vibration_rate
    vibration = _impulse_response(times, amps, profile.vibration_rate, profile.vibration_resonance,
                                  profile.decay, n_v)
    vibration += profile.hum_amplitude * np.sin(2 * np.pi * profile.shaft_rate * t_v + rng.uniform(0, 2 * np.pi))
    vibration += sigma * rng.standard_normal(n_v)

    n_a = int(round(profile.duration * profile.acoustic_rate))
    t_a = np.arange(n_a) / profile.acoustic_rate
    mechanical = _impulse_response(times, amps, profile.acoustic_rate, profile.resonance, profile.decay, n_a)
    acoustic = sps.fftconvolve(mechanical, fir)[:n_a]
    acoustic += profile.hum_amplitude * np.sin(2 * np.pi * profile.hum_frequency * t_a + rng.uniform(0, 2 * np.pi))
    acoustic += sigma * rng.standard_normal(n_a)

    return Waveform(acoustic, profile.acoustic_rate), Waveform(vibration, profile.vibration_rate)


def _peak_scaled(x):
    peak = np.max(np.abs(x.samples))
    if peak == 0:
        return x
    return Waveform(x.samples * (PEAK_LEVEL / peak), x.rate)


def uo_shaped_counts(per_class: int) -> Dict[int, int]:
    """Per-class counts in the UO corpus proportions (healthy class doubled)"""
    unit = min(CORPUS_COUNTS["uo"])
    return {label: int(round(count * per_class / unit)) for label, count in enumerate(CORPUS_COUNTS["uo"])}


def synth_dataset(profile: SynthProfile, out_dir, per_class: int, seed: int,
                  classes: Optional[Iterable[int]] = None,
                  counts: Optional[Dict[int, int]] = None,
                  verbose: bool = False) -> List[SampleRecord]:
    """
    Write WAV / text files plus manifest.jsonl into out_dir and return the records.
    Every sample draws from its own stream keyed by (seed, profile, class, index),
    so the output is bitwise reproducible.
    """
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    classes = list(range(NUM_CLASSES) if classes is None else classes)
    for label in classes:
        if not 0 <= label < NUM_CLASSES:
            raise ValueError(f"class {label} outside 0..{NUM_CLASSES - 1}")
    counts = counts or {}
    os.makedirs(out_dir, exist_ok=True)

    fir = acoustic_path(profile, seed)
    jobs = [(label, i) for label in classes for i in range(counts.get(label, per_class))]
    records = []
    for label, i in tqdm(jobs, desc=f"synth {profile.name}", disable=not verbose):
        rng = np.random.default_rng(np.random.SeedSequence([seed, _salt(profile), label, i]))
        acoustic, vibration = render_sample(profile, label, rng, fir)

        stem = f"{profile.name}_{label}_{i:04d}"
        a_path = os.path.join(out_dir, f"{stem}_a.wav")
        write_wav(a_path, _peak_scaled(acoustic))
        if profile.vibration_format == "wav":
            v_path = os.path.join(out_dir, f"{stem}_v.wav")
            write_wav(v_path, _peak_scaled(vibration))
        else:
            v_path = os.path.join(out_dir, f"{stem}_v.txt")
            write_vibration_text(v_path, vibration)

        records.append(SampleRecord(
            id=f"{profile.name}-{CLASS_NAMES[label]}-{i:04d}",
            acoustic_path=os.path.abspath(a_path),
            vibration_path=os.path.abspath(v_path),
            acoustic_rate=float(profile.acoustic_rate),
            vibration_rate=float(profile.vibration_rate),
            label=label,
        ))

    write_manifest(records, os.path.join(out_dir, MANIFEST_NAME))
    if verbose:
        print(f"✅ {len(records)} {profile.name} samples written to {out_dir}")
    return records


def resonance_band(profile: SynthProfile, rate: float) -> Tuple[float, float]:
    """Band around the ring-down carrier of the stream sampled at `rate`"""
    res = profile.resonance if rate == profile.acoustic_rate else profile.vibration_resonance
    return 0.6 * res, min(1.4 * res, 0.45 * rate)


def envelope_spectrum(samples: Sequence[float], rate: float,
                      band: Optional[Tuple[float, float]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Band-pass (optional), Hilbert envelope, DFT magnitude of the mean-removed envelope.
    Returns (frequencies, magnitudes).
    """
    x = np.asarray(samples, dtype=np.float64)
    if band is not None:
        sos = sps.butter(4, band, btype="bandpass", fs=rate, output="sos")
        x = sps.sosfiltfilt(sos, x)
    envelope = np.abs(sps.hilbert(x))
    envelope -= envelope.mean()
    magnitudes = np.abs(np.fft.rfft(envelope)) / envelope.size
    return np.fft.rfftfreq(envelope.size, 1.0 / rate), magnitudes
