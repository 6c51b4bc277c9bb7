# utils/network.py

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from utils.features import VARIANTS, FeatureMap, TgramConfig, TgramNet, assemble
from utils.losses import ArcFaceHead

GROUPS = ("tgram_a", "tgram_v", "mfn_backbone", "mfn_last_fc", "arcface_head")

# Module path owning each group
GROUP_MODULES = {
    "tgram_a": "tgram_a",
    "tgram_v": "tgram_v",
    "mfn_backbone": "mfn.backbone",
    "mfn_last_fc": "mfn.last_fc",
    "arcface_head": "head",
}


@dataclass(frozen=True)
class MfnSpec:
    """Reduced MobileFaceNet: stem, depthwise, bottleneck stages, 1x1, global depthwise, linear"""

    in_channels: int = 3
    mel_bins: int = 64
    frames: int = 376
    stem_channels: int = 64
    # (expansion, channels, repeat, stride)
    stages: Tuple[Tuple[int, int, int, int], ...] = ((2, 64, 2, 2), (4, 128, 2, 2), (4, 128, 2, 2))
    conv_channels: int = 512
    embedding: int = 128
    prelu_init: float = 0.25
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(tuple(int(v) for v in st) for st in self.stages))
        if self.in_channels not in (2, 3):
            raise ValueError(f"MFN takes 2 or 3 input channels, got {self.in_channels}")
        h, w = self.spatial_trace()[-1]
        if h < 1 or w < 1:
            raise ValueError(f"input {self.mel_bins}x{self.frames} collapses before the global conv")

    def spatial_trace(self) -> List[Tuple[int, int]]:
        """Grid size after the stem and after each stage"""
        def down(n, stride):
            return (n + 2 - 3) // stride + 1

        h, w = down(self.mel_bins, 2), down(self.frames, 2)
        trace = [(h, w)]
        for _, _, _, stride in self.stages:
            h, w = down(h, stride), down(w, stride)
            trace.append((h, w))
        return trace

    @property
    def gdc_kernel(self) -> Tuple[int, int]:
        return self.spatial_trace()[-1]


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout, kernel, stride, padding, groups=1, act=True, spec=MfnSpec()):
        layers = [
            nn.Conv2d(cin, cout, kernel, stride, padding, groups=groups, bias=False),
            nn.BatchNorm2d(cout, eps=spec.bn_eps, momentum=spec.bn_momentum),
        ]
        if act:
            layers.append(nn.PReLU(cout, init=spec.prelu_init))
        super().__init__(*layers)


class Bottleneck(nn.Module):
    """Inverted residual: 1x1 expand, 3x3 depthwise, linear 1x1 projection"""

    def __init__(self, cin, cout, stride, expansion, spec=MfnSpec()):
        super().__init__()
        hidden = cin * expansion
        self.use_residual = stride == 1 and cin == cout
        self.conv = nn.Sequential(
            ConvBlock(cin, hidden, 1, 1, 0, spec=spec),
            ConvBlock(hidden, hidden, 3, stride, 1, groups=hidden, spec=spec),
            ConvBlock(hidden, cout, 1, 1, 0, act=False, spec=spec),
        )

    def forward(self, x):
        if self.use_residual:
            return x + self.conv(x)
        return self.conv(x)


class MobileFaceNet(nn.Module):
    def __init__(self, spec: MfnSpec = MfnSpec()):
        super().__init__()
        self.spec = spec
        stem = spec.stem_channels
        layers = [
            ConvBlock(spec.in_channels, stem, 3, 2, 1, spec=spec),
            ConvBlock(stem, stem, 3, 1, 1, groups=stem, spec=spec),
        ]
        channels = stem
        for expansion, out, repeat, stride in spec.stages:
            for i in range(repeat):
                layers.append(Bottleneck(channels, out, stride if i == 0 else 1, expansion, spec=spec))
                channels = out
        wide = spec.conv_channels
        layers += [
            ConvBlock(channels, wide, 1, 1, 0, spec=spec),
            ConvBlock(wide, wide, spec.gdc_kernel, 1, 0, groups=wide, act=False, spec=spec),
            nn.Flatten(),
        ]
        self.backbone = nn.Sequential(*layers)
        # the "last fully connected layer": trainable during fine-tuning
        self.last_fc = nn.Linear(wide, spec.embedding)

    def forward(self, x):
        spec = self.spec
        expected = (spec.in_channels, spec.mel_bins, spec.frames)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"MFN expects (batch, {expected}) input, got {tuple(x.shape)}")
        return self.last_fc(self.backbone(x))


class MavgramNet(nn.Module):
    """TgramNets + MFN + ArcFace head; which TgramNets exist depends on the variant"""

    def __init__(self, variant: str, tgram_cfg: TgramConfig, spec: MfnSpec,
                 num_classes: int, margin: float = 0.7, scale: float = 30.0):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown feature variant {variant!r}; choose from {sorted(VARIANTS)}")
        tags = VARIANTS[variant]
        if spec.in_channels != len(tags):
            raise ValueError(f"variant {variant} has {len(tags)} channels, MFN spec takes {spec.in_channels}")
        if tgram_cfg.out_channels != spec.mel_bins:
            raise ValueError(
                f"TgramNet emits {tgram_cfg.out_channels} rows but the Mgram has {spec.mel_bins}"
            )
        self.variant = variant
        self.tgram_a = TgramNet(tgram_cfg) if "A" in tags else None
        self.tgram_v = TgramNet(tgram_cfg) if "V" in tags else None
        self.mfn = MobileFaceNet(spec)
        self.head = ArcFaceHead(num_classes, spec.embedding, margin, scale)

    def features(self, mgram, acoustic, vibration) -> FeatureMap:
        maps = [FeatureMap(mgram, ("M",))]
        if self.tgram_a is not None:
            maps.append(FeatureMap(self.tgram_a(acoustic).unsqueeze(1), ("A",)))
        if self.tgram_v is not None:
            maps.append(FeatureMap(self.tgram_v(vibration).unsqueeze(1), ("V",)))
        return assemble(maps, self.variant)

    def embed(self, mgram, acoustic, vibration):
        return self.mfn(self.features(mgram, acoustic, vibration).data)

    def forward(self, mgram, acoustic, vibration, target=None):
        return self.head(self.embed(mgram, acoustic, vibration), target)


def init_parameters(model: nn.Module, seed: int) -> None:
    """Seeded fan-in uniform weights, zero biases, unit-gain norms with fresh running stats"""
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv1d, nn.Conv2d, nn.Linear)):
                bound = 1.0 / math.sqrt(module.weight[0].numel())
                module.weight.uniform_(-bound, bound, generator=g)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.modules.batchnorm._BatchNorm):
                module.reset_running_stats()
                module.weight.fill_(1.0)
                module.bias.zero_()
            elif isinstance(module, nn.LayerNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
            elif isinstance(module, ArcFaceHead):
                module.reset_parameters(g)


def group_of(name: str) -> str:
    for group, path in GROUP_MODULES.items():
        if name == path or name.startswith(path + "."):
            return group
    raise ValueError(f"tensor {name!r} belongs to no parameter group")


def batchnorm_mode(module: nn.Module, mode: str, frozen_prefixes: Sequence[str] = ()) -> None:
    """
    train: batch statistics, running stats updated (momentum 0.1)
    eval: running stats only, never mutated
    Submodules under a frozen prefix stay in eval whatever the mode.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    module.train(mode == "train")
    for prefix in frozen_prefixes:
        module.get_submodule(prefix).eval()


class ParamStore:
    """Named tensors of a model with their group tag and trainable flag"""

    def __init__(self, model: nn.Module, trainable: Optional[Iterable[str]] = None):
        self.model = model
        for name, _ in model.state_dict(keep_vars=True).items():
            group_of(name)
        self.set_trainable(self.groups() if trainable is None else trainable)

    def groups(self) -> Tuple[str, ...]:
        present = {group_of(name) for name in self.model.state_dict(keep_vars=True)}
        return tuple(g for g in GROUPS if g in present)

    def set_trainable(self, groups: Iterable[str]) -> None:
        groups = set(groups)
        unknown = groups - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter group(s): {sorted(unknown)}")
        self.trainable_groups = groups & set(self.groups())
        for name, p in self.model.named_parameters():
            p.requires_grad_(group_of(name) in self.trainable_groups)

    def frozen_prefixes(self) -> List[str]:
        return [GROUP_MODULES[g] for g in self.groups() if g not in self.trainable_groups]

    def set_mode(self, mode: str) -> None:
        batchnorm_mode(self.model, mode, self.frozen_prefixes())

    def named_trainable(self) -> List[Tuple[str, torch.Tensor]]:
        return [(n, p) for n, p in self.model.named_parameters() if p.requires_grad]

    def tensors(self) -> List[Tuple[str, torch.Tensor, str, bool]]:
        """(name, tensor, group, trainable) for every parameter and buffer, state-dict order"""
        params = dict(self.model.named_parameters())
        out = []
        for name, tensor in self.model.state_dict(keep_vars=True).items():
            trainable = name in params and params[name].requires_grad
            out.append((name, tensor, group_of(name), trainable))
        return out

    def count(self, groups: Optional[Iterable[str]] = None) -> int:
        wanted = set(self.groups() if groups is None else groups)
        return sum(p.numel() for n, p in self.model.named_parameters() if group_of(n) in wanted)

    def zero_grad(self) -> None:
        self.model.zero_grad(set_to_none=True)


def backward(store: ParamStore, loss: torch.Tensor) -> None:
    """Fill .grad of every trainable tensor; frozen tensors keep grad None"""
    if not isinstance(loss, torch.Tensor) or loss.dim() != 0:
        raise ValueError("backward needs a scalar loss tensor")
    if loss.grad_fn is None:
        raise RuntimeError("backward called without a recorded forward pass")
    store.zero_grad()
    loss.backward()
