# utils/features.py

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Mapping, Optional, Sequence, Tuple

import librosa
import numpy as np
import torch
import torch.nn as nn

from utils.errors import CheckpointError
from utils.waveform import Waveform

# Channel order of every fused feature map
VARIANTS = {
    "MAV": ("M", "A", "V"),
    "ST": ("M", "A"),
    "MV": ("M", "V"),
    "AV": ("A", "V"),
}

CACHE_MAGIC = b"MAVF"
CACHE_VERSION = 1


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 1024
    win_length: int = 1024
    hop: int = 512
    window: str = "hann"
    center: bool = True

    def __post_init__(self):
        if not 0 < self.hop <= self.win_length <= self.n_fft:
            raise ValueError(
                f"need hop <= win_length <= n_fft, got {self.hop}/{self.win_length}/{self.n_fft}"
            )

    @property
    def bins(self) -> int:
        return self.n_fft // 2 + 1

    def frame_count(self, length: int) -> int:
        if self.center:
            return length // self.hop + 1
        return 1 + (length - self.n_fft) // self.hop


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 64
    fmin: float = 0.0
    fmax: Optional[float] = None  # None -> rate / 2
    log_floor: float = 1e-10


@dataclass(frozen=True)
class TgramConfig:
    in_kernel: int = 1024
    in_stride: int = 512
    in_pad: int = 512
    out_channels: int = 64
    block_count: int = 3
    block_kernel: int = 3
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.block_kernel % 2 == 0:
            raise ValueError(f"block kernel must be odd to keep frame count, got {self.block_kernel}")

    def frame_count(self, length: int) -> int:
        return (length + 2 * self.in_pad - self.in_kernel) // self.in_stride + 1


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """(..., channels, mel bins, frames) grid with one tag per channel"""

    data: torch.Tensor
    channel_tags: Tuple[str, ...]

    def __post_init__(self):
        if self.data.dim() < 3:
            raise ValueError(f"feature map needs (channels, M, N) dims, got {tuple(self.data.shape)}")
        if self.data.shape[-3] != len(self.channel_tags):
            raise ValueError(
                f"{self.data.shape[-3]} channels but {len(self.channel_tags)} tags {self.channel_tags}"
            )

    @property
    def grid(self) -> Tuple[int, int]:
        return tuple(self.data.shape[-2:])


def stft_power(x: Waveform, cfg: StftConfig) -> np.ndarray:
    """B x N power spectrogram |STFT|^2, reflect padding when centered"""
    spec = librosa.stft(
        x.samples,
        n_fft=cfg.n_fft,
        hop_length=cfg.hop,
        win_length=cfg.win_length,
        window=cfg.window,
        center=cfg.center,
        pad_mode="reflect",
    )
    return np.abs(spec) ** 2


@lru_cache(maxsize=16)
def _mel_matrix(mel_cfg: MelConfig, n_fft: int, rate: float) -> np.ndarray:
    fmax = rate / 2 if mel_cfg.fmax is None else mel_cfg.fmax
    if mel_cfg.n_mels < 2:
        raise ValueError(f"need at least 2 mel bins, got {mel_cfg.n_mels}")
    if not 0 <= mel_cfg.fmin < fmax <= rate / 2:
        raise ValueError(f"invalid mel range [{mel_cfg.fmin}, {fmax}] for rate {rate}")

    weights = librosa.filters.mel(
        sr=rate, n_fft=n_fft, n_mels=mel_cfg.n_mels,
        fmin=mel_cfg.fmin, fmax=fmax, htk=True, norm=None,
    )
    peaks = weights.max(axis=1)
    if np.any(peaks <= 0):
        empty = int(np.argmin(peaks))
        raise ValueError(f"mel filter {empty} covers no STFT bin; lower n_mels or raise n_fft")
    weights = weights / peaks[:, None]
    weights.setflags(write=False)
    return weights


def mel_weights(mel_cfg: MelConfig, stft_cfg: StftConfig, rate: float) -> np.ndarray:
    """M x B matrix of HTK-scale triangles, each peaking at exactly 1"""
    return _mel_matrix(mel_cfg, stft_cfg.n_fft, float(rate))


def log_mel(x_a: Waveform, stft_cfg: StftConfig, mel_cfg: MelConfig) -> FeatureMap:
    """Mgram: log of mel-weighted power, floored so silence stays finite"""
    power = stft_power(x_a, stft_cfg)
    mel = mel_weights(mel_cfg, stft_cfg, x_a.rate) @ power
    data = np.log(np.maximum(mel, mel_cfg.log_floor)).astype(np.float32)
    return FeatureMap(torch.from_numpy(data)[None], ("M",))


class ChannelLayerNorm(nn.Module):
    """Layer norm across channels, applied at each frame of a (B, C, T) input"""

    def __init__(self, channels):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x):
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class TgramBlock(nn.Module):
    def __init__(self, channels, kernel, slope):
        super().__init__()
        self.norm = ChannelLayerNorm(channels)
        self.act = nn.LeakyReLU(slope)
        self.conv = nn.Conv1d(channels, channels, kernel, stride=1, padding=kernel // 2)

    def forward(self, x):
        return self.conv(self.act(self.norm(x)))


class TgramNet(nn.Module):
    """Large-kernel strided 1-D conv followed by [norm, leaky ReLU, conv] blocks"""

    def __init__(self, cfg: TgramConfig = TgramConfig()):
        super().__init__()
        self.cfg = cfg
        self.front = nn.Conv1d(
            1, cfg.out_channels, cfg.in_kernel, stride=cfg.in_stride, padding=cfg.in_pad
        )
        self.blocks = nn.Sequential(
            *[TgramBlock(cfg.out_channels, cfg.block_kernel, cfg.leaky_slope)
              for _ in range(cfg.block_count)]
        )

    def forward(self, wave):
        # (B, L) -> (B, C, N)
        return self.blocks(self.front(wave.unsqueeze(1)))


def _check_tgram(net, cfg):
    front = net.front
    got = (front.kernel_size[0], front.stride[0], front.padding[0], front.out_channels, len(net.blocks))
    want = (cfg.in_kernel, cfg.in_stride, cfg.in_pad, cfg.out_channels, cfg.block_count)
    if got != want:
        raise ValueError(f"TgramNet parameters {got} do not match config {want}")
    for block in net.blocks:
        if block.conv.kernel_size[0] != cfg.block_kernel:
            raise ValueError(
                f"TgramNet block kernel {block.conv.kernel_size[0]} != config {cfg.block_kernel}"
            )


def tgram_forward(net: TgramNet, x: Waveform, cfg: TgramConfig, tag: str = "A") -> FeatureMap:
    """Agram / Vgram of one waveform: a 1 x C x N map"""
    _check_tgram(net, cfg)
    wave = torch.as_tensor(x.samples, dtype=next(net.parameters()).dtype)
    return FeatureMap(net(wave[None]), (tag,))


def assemble(maps: Sequence[FeatureMap], variant: str) -> FeatureMap:
    """Concatenate single-stream maps along the channel axis in the variant's order"""
    if variant not in VARIANTS:
        raise ValueError(f"unknown feature variant {variant!r}; choose from {sorted(VARIANTS)}")
    by_tag: Dict[str, FeatureMap] = {}
    for fmap in maps:
        for tag in fmap.channel_tags:
            by_tag[tag] = fmap

    picked = []
    for tag in VARIANTS[variant]:
        if tag not in by_tag:
            raise ValueError(f"variant {variant} needs a {tag}-map")
        fmap = by_tag[tag]
        index = fmap.channel_tags.index(tag)
        picked.append(fmap.data.narrow(-3, index, 1))

    shapes = {tuple(p.shape) for p in picked}
    if len(shapes) != 1:
        raise ValueError(f"feature maps disagree in shape: {sorted(shapes)}")
    return FeatureMap(torch.cat(picked, dim=-3), VARIANTS[variant])


def disassemble(fmap: FeatureMap) -> Tuple[FeatureMap, ...]:
    return tuple(
        FeatureMap(fmap.data.narrow(-3, i, 1), (tag,))
        for i, tag in enumerate(fmap.channel_tags)
    )


def write_feature_cache(path, items: Mapping[str, np.ndarray]) -> None:
    """MAVF file: magic, version, count, then name/shape/float32 data per record"""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(CACHE_MAGIC)
            fh.write(struct.pack("<BI", CACHE_VERSION, len(items)))
            for name, array in items.items():
                raw = name.encode("utf-8")
                array = np.ascontiguousarray(array, dtype="<f4")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<B", array.ndim))
                fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
                fh.write(array.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def read_feature_cache(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CACHE_MAGIC:
        raise CheckpointError(f"{path}: not a feature cache (bad magic)")
    offset = 4

    def take(fmt):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {offset}")
        values = struct.unpack_from(fmt, blob, offset)
        offset += size
        return values

    version, count = take("<BI")
    if version != CACHE_VERSION:
        raise CheckpointError(f"{path}: unsupported cache version {version}")
    items = {}
    for _ in range(count):
        (name_len,) = take("<H")
        if offset + name_len > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {offset}")
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = take("<B")
        shape = take(f"<{rank}I")
        nbytes = 4 * int(np.prod(shape))
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated in record {name!r}")
        items[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape).copy()
        offset += nbytes
    return items
