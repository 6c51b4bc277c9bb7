# utils/datasets.py

from __future__ import annotations

import json
import os
import tempfile
from collections import Counter
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import soundfile as sf
import torch
from sklearn.model_selection import train_test_split
from torch.utils.data import Dataset

from utils.errors import AudioFormatError, ManifestError
from utils.features import log_mel
from utils.waveform import (
    SpeedGrid,
    Waveform,
    fit_length,
    minmax_normalize,
    resample,
    speed_perturb,
    virtual_label,
)

CLASS_NAMES = ("normal", "outer_race", "inner_race", "ball", "cage")
NUM_CLASSES = len(CLASS_NAMES)
SPLITS = ("train", "finetune", "test")

# Documented per-class sample counts of the two real corpora (not shipped)
CORPUS_COUNTS = {
    "iflytek": (480, 480, 480, 480, 480),
    "uo": (380, 190, 190, 190, 190),
}

TEST_FRACTION = 0.75
MAX_FINETUNE_PERCENT = 25.0
PCM_SCALE = 32768.0

_REQUIRED = ("id", "acoustic_path", "vibration_path", "acoustic_rate", "vibration_rate", "label")


@dataclass(frozen=True)
class SampleRecord:
    id: str
    acoustic_path: str
    vibration_path: str
    acoustic_rate: float
    vibration_rate: float
    label: int
    split: str = "train"


def atomic_write_text(path, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _parse_record(obj, base_dir, lineno):
    if not isinstance(obj, dict):
        raise ManifestError(f"record is not a key/value object at line {lineno}")
    for key in _REQUIRED:
        if key not in obj:
            raise ManifestError(f"missing field '{key}' at line {lineno}")

    label = obj["label"]
    if not isinstance(label, int) or isinstance(label, bool):
        raise ManifestError(f"label must be an integer at line {lineno}")
    if not 0 <= label < NUM_CLASSES:
        raise ManifestError(f"label out of range at line {lineno}")

    rates = []
    for key in ("acoustic_rate", "vibration_rate"):
        try:
            rate = float(obj[key])
        except (TypeError, ValueError):
            raise ManifestError(f"{key} is not a number at line {lineno}") from None
        if not rate > 0:
            raise ManifestError(f"{key} must be positive at line {lineno}")
        rates.append(rate)

    split = obj.get("split", "train")
    if split not in SPLITS:
        raise ManifestError(f"split must be one of {SPLITS} at line {lineno}")

    paths = []
    for key in ("acoustic_path", "vibration_path"):
        path = os.path.normpath(os.path.join(base_dir, str(obj[key])))
        if not os.path.isfile(path):
            raise ManifestError(f"{key} {obj[key]!r} does not exist at line {lineno}")
        paths.append(path)

    return SampleRecord(str(obj["id"]), paths[0], paths[1], rates[0], rates[1], label, split)


def load_manifest(path) -> List[SampleRecord]:
    """Line-delimited JSON records; paths are relative to the manifest's directory"""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except (OSError, UnicodeDecodeError) as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e

    base_dir = os.path.dirname(os.path.abspath(path))
    records = []
    seen = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"invalid record ({e.msg}) at line {lineno}") from None
        record = _parse_record(obj, base_dir, lineno)
        if record.id in seen:
            raise ManifestError(f"duplicate id {record.id!r} at line {lineno}")
        seen.add(record.id)
        records.append(record)
    return records


def write_manifest(records: Sequence[SampleRecord], path) -> None:
    """Atomic write; stored paths are made relative to the manifest's directory"""
    base_dir = os.path.dirname(os.path.abspath(path))
    lines = []
    for r in records:
        lines.append(json.dumps({
            "id": r.id,
            "acoustic_path": os.path.relpath(r.acoustic_path, base_dir),
            "vibration_path": os.path.relpath(r.vibration_path, base_dir),
            "acoustic_rate": r.acoustic_rate,
            "vibration_rate": r.vibration_rate,
            "label": r.label,
            "split": r.split,
        }))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_wav(path) -> Waveform:
    """Mono 16-bit PCM WAV -> samples int / 32768"""
    try:
        info = sf.info(path)
    except (RuntimeError, sf.LibsndfileError) as e:
        raise AudioFormatError(f"{path}: unreadable audio file ({e})") from e
    if info.channels != 1:
        raise AudioFormatError(f"{path}: expected mono, found {info.channels} channels")
    if info.subtype != "PCM_16":
        raise AudioFormatError(f"{path}: unsupported encoding {info.subtype}; need 16-bit PCM")
    data, rate = sf.read(path, dtype="int16", always_2d=False)
    return Waveform(data.astype(np.float64) / PCM_SCALE, rate)


def write_wav(path, x: Waveform) -> None:
    ints = np.clip(np.round(x.samples * PCM_SCALE), -32768, 32767).astype(np.int16)
    sf.write(path, ints, int(round(x.rate)), subtype="PCM_16")


def read_vibration_text(path, rate: float) -> Waveform:
    try:
        data = np.loadtxt(path, dtype=np.float64, ndmin=1)
    except (OSError, ValueError) as e:
        raise AudioFormatError(f"{path}: unreadable vibration text ({e})") from e
    if data.ndim != 1:
        raise AudioFormatError(f"{path}: expected a single column, found {data.shape[1]}")
    return Waveform(data, rate)


def write_vibration_text(path, x: Waveform) -> None:
    np.savetxt(path, x.samples, fmt="%.7e")


def load_sample(record: SampleRecord) -> Tuple[Waveform, Waveform]:
    acoustic = read_wav(record.acoustic_path)
    if acoustic.rate != record.acoustic_rate:
        raise AudioFormatError(
            f"{record.acoustic_path}: header rate {acoustic.rate:g} != manifest rate {record.acoustic_rate:g}"
        )
    if record.vibration_path.lower().endswith(".wav"):
        vibration = read_wav(record.vibration_path)
        if vibration.rate != record.vibration_rate:
            raise AudioFormatError(
                f"{record.vibration_path}: header rate {vibration.rate:g} != manifest rate {record.vibration_rate:g}"
            )
    else:
        vibration = read_vibration_text(record.vibration_path, record.vibration_rate)
    return acoustic, vibration


def canonicalize(acoustic: Waveform, vibration: Waveform,
                 rate: float = 48000, duration: float = 4.0) -> Tuple[Waveform, Waveform]:
    """Both streams at `rate`, exactly rate*duration samples, min-max normalized"""
    length = int(round(rate * duration))
    return tuple(minmax_normalize(fit_length(resample(x, rate), length)) for x in (acoustic, vibration))


def class_counts(records: Sequence[SampleRecord]) -> Dict[int, int]:
    counts = Counter(r.label for r in records)
    return {label: counts[label] for label in sorted(counts)}


def split_finetune(records: Sequence[SampleRecord], percent: float,
                   seed: int) -> Tuple[List[SampleRecord], List[SampleRecord]]:
    """
    Fixed stratified 75 % test split (same for every percent under one seed) and a
    fine-tune set of `percent` % of all records drawn from the remaining 25 %.
    Fine-tune sets are nested: 5 % is a prefix of 10 %, and so on.
    """
    if not 0 < percent <= MAX_FINETUNE_PERCENT:
        raise ValueError(
            f"fine-tune percent must lie in (0, {MAX_FINETUNE_PERCENT:g}], got {percent:g}; "
            "more would overlap the fixed test split"
        )
    if not records:
        raise ValueError("cannot split an empty record list")
    labels = [r.label for r in records]
    index = np.arange(len(records))
    try:
        pool, test = train_test_split(
            index, test_size=TEST_FRACTION, stratify=labels, random_state=seed, shuffle=True
        )
    except ValueError as e:
        raise ValueError(f"cannot stratify {len(records)} records: {e}") from e

    # One stratified ordering of the pool; any prefix keeps class proportions within one sample
    rng = np.random.default_rng(seed)
    keyed = []
    for label in sorted(set(labels)):
        members = [i for i in sorted(pool) if labels[i] == label]
        members = [members[j] for j in rng.permutation(len(members))]
        keyed += [((rank + 0.5) / len(members), label, i) for rank, i in enumerate(members)]
    ordered = [i for _, _, i in sorted(keyed)]

    count = min(len(ordered), int(round(percent / 100.0 * len(records))))
    finetune = [replace(records[i], split="finetune") for i in ordered[:count]]
    test_set = [replace(records[i], split="test") for i in sorted(test)]
    return finetune, test_set


def mgram_key(record_id: str, factor: float) -> str:
    return f"{record_id}@{factor:.4f}"


class FusionDataset(Dataset):
    """
    One item per (record, speed factor). Each item carries the Mgram of the
    perturbed acoustic stream, both perturbed waveforms and the virtual label.
    With augment=False only the unit factor is used (evaluation).
    """

    def __init__(self, records: Sequence[SampleRecord], features, grid: SpeedGrid,
                 augment: bool = True, mgram_cache: Optional[Dict[str, np.ndarray]] = None,
                 cache_waveforms: bool = False):
        if not records:
            raise ValueError("dataset has no records")
        self.records = list(records)
        self.features = features
        self.grid = grid
        speeds = range(grid.n) if augment else [grid.index_of_unity()]
        self.items = [(ri, si) for ri in range(len(self.records)) for si in speeds]
        self.mgram_cache = mgram_cache or {}
        self.cache_waveforms = cache_waveforms
        self._canonical: Dict[int, Tuple[Waveform, Waveform]] = {}

    def __len__(self):
        return len(self.items)

    def canonical(self, ri: int) -> Tuple[Waveform, Waveform]:
        if ri in self._canonical:
            return self._canonical[ri]
        acoustic, vibration = load_sample(self.records[ri])
        pair = canonicalize(acoustic, vibration, self.features.sample_rate, self.features.duration)
        if self.cache_waveforms:
            self._canonical[ri] = pair
        return pair

    def __getitem__(self, i):
        ri, si = self.items[i]
        record = self.records[ri]
        factor = self.grid.factors[si]
        acoustic, vibration = (speed_perturb(x, factor) for x in self.canonical(ri))

        key = mgram_key(record.id, factor)
        if key in self.mgram_cache:
            mgram = torch.from_numpy(np.asarray(self.mgram_cache[key], dtype=np.float32))
        else:
            mgram = log_mel(acoustic, self.features.stft(), self.features.mel()).data
        return {
            "mgram": mgram,
            "acoustic": torch.from_numpy(acoustic.samples.astype(np.float32)),
            "vibration": torch.from_numpy(vibration.samples.astype(np.float32)),
            "label": virtual_label(record.label, si, self.grid.n),
            "base": record.label,
        }
