# utils/config.py

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import yaml
from dotenv import load_dotenv

from utils.errors import ConfigError
from utils.features import VARIANTS, MelConfig, StftConfig, TgramConfig
from utils.network import MfnSpec

load_dotenv()

FULL_EPOCHS = 200


@dataclass
class FeatureConfig:
    sample_rate: int = 48000
    duration: float = 4.0
    n_fft: int = 1024
    win_length: int = 1024
    hop: int = 512
    window: str = "hann"
    n_mels: int = 64
    fmin: float = 0.0
    fmax: Optional[float] = None
    log_floor: float = 1e-10
    tgram_kernel: int = 1024
    tgram_stride: int = 512
    tgram_pad: int = 512
    tgram_blocks: int = 3
    tgram_block_kernel: int = 3
    leaky_slope: float = 0.01

    @property
    def length(self) -> int:
        return int(round(self.sample_rate * self.duration))

    def stft(self) -> StftConfig:
        return StftConfig(self.n_fft, self.win_length, self.hop, self.window, True)

    def mel(self) -> MelConfig:
        return MelConfig(self.n_mels, self.fmin, self.fmax, self.log_floor)

    def tgram(self) -> TgramConfig:
        return TgramConfig(
            self.tgram_kernel, self.tgram_stride, self.tgram_pad, self.n_mels,
            self.tgram_blocks, self.tgram_block_kernel, self.leaky_slope,
        )

    @property
    def frames(self) -> int:
        return self.stft().frame_count(self.length)


@dataclass
class SpeedConfig:
    n: int = 3
    s: float = 0.1


@dataclass
class ArcFaceConfig:
    margin: float = 0.7
    scale: float = 30.0


@dataclass
class ModelConfig:
    stem_channels: int = 64
    stages: List[List[int]] = field(default_factory=lambda: [[2, 64, 2, 2], [4, 128, 2, 2], [4, 128, 2, 2]])
    conv_channels: int = 512
    embedding: int = 128


@dataclass
class DataConfig:
    # "synth": generate profiles into the run directory; "manifest": read the given files
    source: str = "synth"
    source_manifest: Optional[str] = None
    target_manifest: Optional[str] = None
    per_class: int = 40
    target_per_class: int = 40
    percent: float = 15.0


@dataclass
class TrainConfig:
    epochs: int = FULL_EPOCHS
    batch: int = 32
    base_lr: float = 0.0005
    min_lr: float = 0.0
    seed: int = 0
    variant: str = "MAV"
    features: FeatureConfig = field(default_factory=FeatureConfig)
    speed: SpeedConfig = field(default_factory=SpeedConfig)
    arcface: ArcFaceConfig = field(default_factory=ArcFaceConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {sorted(VARIANTS)}, got {self.variant!r}")
        for key in ("epochs", "batch", "base_lr"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if self.seed < 0 or self.min_lr < 0:
            raise ConfigError("seed and min_lr must be non-negative")
        if self.speed.n < 1 or self.speed.n % 2 == 0 or not self.speed.s > 0:
            raise ConfigError(f"speed.n must be odd and positive, speed.s positive; got {self.speed}")
        if not 0 <= self.arcface.margin < math.pi or not self.arcface.scale > 0:
            raise ConfigError(f"arcface margin must lie in [0, pi) and scale be positive; got {self.arcface}")
        if self.data.source not in ("synth", "manifest"):
            raise ConfigError(f"data.source must be 'synth' or 'manifest', got {self.data.source!r}")
        if not 0 < self.data.percent <= 25:
            raise ConfigError(f"data.percent must lie in (0, 25], got {self.data.percent}")
        try:
            self.mfn_spec()
            self.features.stft()
            self.features.tgram()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.features.tgram().frame_count(self.features.length) != self.features.frames:
            raise ConfigError(
                "TgramNet frame count "
                f"{self.features.tgram().frame_count(self.features.length)} != Mgram frames {self.features.frames}"
            )

    @property
    def num_virtual(self) -> int:
        from utils.datasets import NUM_CLASSES
        return NUM_CLASSES * self.speed.n

    def mfn_spec(self) -> MfnSpec:
        return MfnSpec(
            in_channels=len(VARIANTS[self.variant]),
            mel_bins=self.features.n_mels,
            frames=self.features.frames,
            stem_channels=self.model.stem_channels,
            stages=tuple(tuple(st) for st in self.model.stages),
            conv_channels=self.model.conv_channels,
            embedding=self.model.embedding,
        )

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        """Hash of everything that fixes feature geometry and network shape"""
        shape = self.to_dict()
        shaping = {k: shape[k] for k in ("variant", "features", "speed", "arcface", "model")}
        blob = json.dumps(shaping, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


SECTIONS = {
    "features": FeatureConfig,
    "speed": SpeedConfig,
    "arcface": ArcFaceConfig,
    "model": ModelConfig,
    "data": DataConfig,
}


def _field_names(cls) -> List[str]:
    return [f.name for f in dataclasses.fields(cls)]


def _coerce(cls, values: Dict[str, Any]) -> Dict[str, Any]:
    """YAML 1.1 reads 1e-10 as a string; numbers are cast to the declared field type"""
    types = {f.name: str(f.type) for f in dataclasses.fields(cls)}
    out = dict(values)
    for key, value in values.items():
        declared = types.get(key, "")
        try:
            if "float" in declared and isinstance(value, (str, int)) and not isinstance(value, bool):
                out[key] = float(value)
            elif declared == "int" and isinstance(value, float) and value.is_integer():
                out[key] = int(value)
        except ValueError as e:
            raise ConfigError(f"{key}: expected a number, got {value!r}") from e
    return out


def config_from_dict(raw: Dict[str, Any]) -> TrainConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of keys and sections")
    top = {}
    sections = {}
    top_names = [n for n in _field_names(TrainConfig) if n not in SECTIONS]
    for key, value in raw.items():
        if key in SECTIONS:
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            unknown = set(value) - set(_field_names(SECTIONS[key]))
            if unknown:
                raise ConfigError(f"unknown key(s) in section {key!r}: {sorted(unknown)}")
            sections[key] = SECTIONS[key](**_coerce(SECTIONS[key], value))
        elif key in top_names:
            top[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return TrainConfig(**_coerce(TrainConfig, top), **sections)


def parse_override(text: str):
    """'section.key=value' or 'key=value'; the value is read as YAML"""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, value = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    return key.split("."), yaml.safe_load(value)


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    raw = json.loads(json.dumps(raw))
    for text in overrides:
        path, value = parse_override(text)
        if len(path) > 2:
            raise ConfigError(f"override key {'.'.join(path)!r} is nested too deeply")
        if len(path) == 2:
            section = raw.setdefault(path[0], {})
            if section is None:
                section = raw[path[0]] = {}
            if not isinstance(section, dict):
                raise ConfigError(f"{path[0]!r} is not a section")
            section[path[1]] = value
        else:
            raw[path[0]] = value
    return raw


def load_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> TrainConfig:
    """File (optional) first, then overrides; unknown keys raise ConfigError"""
    raw: Dict[str, Any] = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path} is not valid YAML: {e}") from e
    try:
        return config_from_dict(apply_overrides(raw, overrides))
    except TypeError as e:
        raise ConfigError(str(e)) from e


def write_effective_config(cfg: TrainConfig, out_dir: str, source_path: Optional[str] = None,
                           overrides: Sequence[str] = ()) -> None:
    """Echo the effective config, the verbatim source file and overrides for provenance"""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.yaml"), "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
    if source_path:
        with open(source_path, "r", encoding="utf-8") as src, \
                open(os.path.join(out_dir, "config.source.yaml"), "w", encoding="utf-8") as dst:
            dst.write(src.read())
    with open(os.path.join(out_dir, "overrides.txt"), "w", encoding="utf-8") as fh:
        for text in overrides:
            fh.write(text + "\n")


def worker_count() -> int:
    """MAVGRAM_WORKERS from the environment (.env honoured); 0 = in-process"""
    try:
        return max(0, int(os.getenv("MAVGRAM_WORKERS", "0")))
    except ValueError:
        print(f"⚠️ MAVGRAM_WORKERS={os.getenv('MAVGRAM_WORKERS')!r} is not an integer; using 0")
        return 0
