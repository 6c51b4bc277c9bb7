#!/usr/bin/env python3
"""
Tests for the synthetic bearing rig: fault signatures, determinism, profiles
and the manifest it writes
"""

import os

import numpy as np
import pytest

from conftest import TINY_SOURCE, TINY_TARGET
from utils.datasets import CLASS_NAMES, NUM_CLASSES, class_counts, load_manifest, load_sample
from utils.synth import (
    MANIFEST_NAME,
    PROFILES,
    SynthProfile,
    acoustic_path,
    envelope_spectrum,
    render_sample,
    resonance_band,
    synth_dataset,
    uo_shaped_counts,
)


def vibration_envelope(profile, label, seed):
    rng = np.random.default_rng(seed)
    _, vibration = render_sample(profile, label, rng, acoustic_path(profile, 0))
    band = resonance_band(profile, profile.vibration_rate)
    return envelope_spectrum(vibration.samples, vibration.rate, band)


@pytest.mark.parametrize("label", range(1, NUM_CLASSES))
def test_fault_class_envelope_peaks_at_its_rate(label):
    profile = PROFILES["source"]
    f_c = profile.characteristic_frequency(label)
    freqs, mags = vibration_envelope(profile, label, seed=label)
    window = (freqs >= 0.5 * f_c) & (freqs <= 1.5 * f_c)
    peak = freqs[window][np.argmax(mags[window])]
    assert abs(peak - f_c) <= 0.02 * f_c, CLASS_NAMES[label]


def test_healthy_envelope_has_no_fault_peaks():
    profile = PROFILES["source"]
    lo, hi = resonance_band(profile, profile.vibration_rate)
    freqs = vibration_envelope(profile, 0, 0)[0]
    mean = np.mean([vibration_envelope(profile, 0, seed)[1] for seed in range(8)], axis=0)
    # a band-limited signal's envelope has no content above the band width
    level = np.median(mean[(freqs > 0) & (freqs <= hi - lo)])
    for label in range(1, NUM_CLASSES):
        f_c = profile.characteristic_frequency(label)
        near = (freqs >= 0.98 * f_c) & (freqs <= 1.02 * f_c)
        assert mean[near].max() <= 3 * level, CLASS_NAMES[label]


def test_characteristic_frequencies():
    profile = PROFILES["source"]
    assert profile.characteristic_frequency(0) is None
    assert [profile.characteristic_frequency(c) for c in range(1, 5)] == pytest.approx([108, 162, 72, 12])
    assert profile.vibration_resonance == pytest.approx(2048.0)
    assert PROFILES["target"].vibration_resonance == PROFILES["target"].resonance


def test_profiles_describe_different_machines():
    source, target = PROFILES["source"], PROFILES["target"]
    assert source.shaft_rate != target.shaft_rate
    assert source.resonance != target.resonance
    assert (source.acoustic_rate, source.vibration_rate, source.duration) == (48000, 5120, 4.0)
    assert (target.acoustic_rate, target.vibration_rate, target.duration) == (42000, 42000, 1.0)


@pytest.mark.parametrize("changes", [
    dict(vibration_format="csv"),
    dict(resonance=5000.0),
    dict(snr_db=float("inf")),
    dict(decay=0.0),
    dict(shaft_rate=1000.0),
])
def test_invalid_profiles_rejected(changes):
    values = dict(
        name="bad", shaft_rate=30.0, resonance=1500.0, decay=800.0, snr_db=10.0,
        hum_frequency=50.0, acoustic_rate=8000, vibration_rate=4000, duration=0.25,
    )
    values.update(changes)
    with pytest.raises(ValueError):
        SynthProfile(**values)


def test_acoustic_path_has_unit_energy():
    fir = acoustic_path(TINY_SOURCE, 3)
    assert fir.shape == (TINY_SOURCE.fir_length,)
    assert np.sum(fir ** 2) == pytest.approx(1.0)
    np.testing.assert_array_equal(fir, acoustic_path(TINY_SOURCE, 3))
    assert not np.array_equal(fir, acoustic_path(TINY_TARGET, 3))


def test_render_sample_lengths_and_label_check():
    rng = np.random.default_rng(0)
    fir = acoustic_path(TINY_SOURCE, 0)
    acoustic, vibration = render_sample(TINY_SOURCE, 2, rng, fir)
    assert (len(acoustic), acoustic.rate) == (2000, 8000)
    assert (len(vibration), vibration.rate) == (1000, 4000)
    with pytest.raises(ValueError):
        render_sample(TINY_SOURCE, NUM_CLASSES, rng, fir)


def test_synth_is_bitwise_reproducible(tmp_path):
    first = synth_dataset(TINY_TARGET, tmp_path / "a", per_class=2, seed=5)
    second = synth_dataset(TINY_TARGET, tmp_path / "b", per_class=2, seed=5)
    assert [r.id for r in first] == [r.id for r in second]
    for a, b in zip(first, second):
        for key in ("acoustic_path", "vibration_path"):
            with open(getattr(a, key), "rb") as fa, open(getattr(b, key), "rb") as fb:
                assert fa.read() == fb.read()

    other = synth_dataset(TINY_TARGET, tmp_path / "c", per_class=2, seed=6)
    with open(first[0].acoustic_path, "rb") as fa, open(other[0].acoustic_path, "rb") as fc:
        assert fa.read() != fc.read()


def test_synth_manifest_loads_back(source_records):
    directory = os.path.dirname(source_records[0].acoustic_path)
    loaded = load_manifest(os.path.join(directory, MANIFEST_NAME))
    assert loaded == source_records
    assert class_counts(loaded) == {c: 4 for c in range(NUM_CLASSES)}
    assert loaded[0].id == "tiny-source-normal-0000"
    assert loaded[0].vibration_path.endswith("_v.txt")


def test_target_samples_use_wav_vibration(target_records):
    acoustic, vibration = load_sample(target_records[-1])
    assert target_records[-1].vibration_path.endswith("_v.wav")
    assert acoustic.rate == vibration.rate == 7000
    assert np.max(np.abs(acoustic.samples)) == pytest.approx(0.9, abs=1 / 32768)


def test_uo_shaped_counts():
    assert uo_shaped_counts(190) == {0: 380, 1: 190, 2: 190, 3: 190, 4: 190}
    assert uo_shaped_counts(2) == {0: 4, 1: 2, 2: 2, 3: 2, 4: 2}


def test_synth_honours_classes_and_counts(tmp_path):
    records = synth_dataset(TINY_SOURCE, tmp_path, per_class=1, seed=0, classes=[0, 3], counts={0: 2})
    assert class_counts(records) == {0: 2, 3: 1}
    with pytest.raises(ValueError):
        synth_dataset(TINY_SOURCE, tmp_path, per_class=1, seed=0, classes=[5])
    with pytest.raises(ValueError):
        synth_dataset(TINY_SOURCE, tmp_path, per_class=0, seed=0)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
