"""
Shared fixtures: a pocket-sized synthetic rig and matching feature geometry
so pipeline tests train in seconds.
"""

import pytest

from utils.config import DataConfig, FeatureConfig, ModelConfig, TrainConfig
from utils.synth import SynthProfile, synth_dataset

TINY_SOURCE = SynthProfile(
    name="tiny-source", shaft_rate=30.0, resonance=1500.0, decay=800.0, snr_db=15.0,
    hum_frequency=50.0, acoustic_rate=8000, vibration_rate=4000, duration=0.25,
    vibration_format="text",
)
TINY_TARGET = SynthProfile(
    name="tiny-target", shaft_rate=25.0, resonance=1200.0, decay=800.0, snr_db=10.0,
    hum_frequency=60.0, acoustic_rate=7000, vibration_rate=7000, duration=0.25,
    vibration_format="wav",
)

# 4 kHz, 0.25 s: 8 mel bins x 16 frames, one bottleneck stage
TINY_FEATURES = dict(
    sample_rate=4000, duration=0.25, n_fft=128, win_length=128, hop=64, n_mels=8,
    tgram_kernel=128, tgram_stride=64, tgram_pad=64,
)
TINY_MODEL = dict(stem_channels=8, stages=[[2, 8, 1, 2]], conv_channels=16, embedding=8)


def tiny_config(**overrides) -> TrainConfig:
    values = dict(
        epochs=2, batch=8, base_lr=0.005, seed=0, variant="MAV",
        features=FeatureConfig(**TINY_FEATURES),
        model=ModelConfig(**TINY_MODEL),
        data=DataConfig(percent=25.0),
    )
    values.update(overrides)
    return TrainConfig(**values)


TINY_YAML = """\
epochs: 1
batch: 8
base_lr: 0.005
variant: MAV
features:
  sample_rate: 4000
  duration: 0.25
  n_fft: 128
  win_length: 128
  hop: 64
  n_mels: 8
  tgram_kernel: 128
  tgram_stride: 64
  tgram_pad: 64
model:
  stem_channels: 8
  stages: [[2, 8, 1, 2]]
  conv_channels: 16
  embedding: 8
data:
  source: manifest
  percent: 25.0
"""


@pytest.fixture(scope="session")
def source_records(tmp_path_factory):
    out = tmp_path_factory.mktemp("source")
    return synth_dataset(TINY_SOURCE, out, per_class=4, seed=0)


@pytest.fixture(scope="session")
def target_records(tmp_path_factory):
    out = tmp_path_factory.mktemp("target")
    return synth_dataset(TINY_TARGET, out, per_class=4, seed=0)


@pytest.fixture
def tiny_yaml(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY_YAML)
    return str(path)
