"""Feature files, manifests, sliding windows and the synthetic generator.

On-disk layout of one dataset directory::

    manifest.json             {"version": 1, "sequences": [{id, visual, audio, labels}, ...]}
    <id>.visual.vafs          VAFS feature file at the visual frame rate
    <id>.audio.vafs           VAFS feature file at the audio row rate
    <id>.labels.csv           frame_index,valence,arousal (one row per visual frame)

Paths inside the manifest are relative to the manifest's directory.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .labels import GridConfig, soft_labels

log = logging.getLogger(__name__)

WINDOW_SEC = 10.0
STRIDE_SEC = 3.0
FRAMES_PER_WINDOW = 20

VAFS_MAGIC = b"VAFS"
VAFS_VERSION = 1
_VAFS_HEADER = struct.Struct("<4sIIId")

_EPS = 1e-9


class FeatureFormatError(ValueError):
    pass


@dataclass
class FeatureSequence:
    data: np.ndarray  # (T, D) float64
    rate: float  # rows per second

    @property
    def length(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def write_feature_file(path, seq: FeatureSequence) -> None:
    data = np.asarray(seq.data)
    if data.ndim != 2:
        raise ValueError(f"feature data must be 2-D, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{path}: refusing to write non-finite features")
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    header = _VAFS_HEADER.pack(VAFS_MAGIC, VAFS_VERSION, data.shape[0], data.shape[1], seq.rate)
    Path(path).write_bytes(header + payload)


def read_feature_file(path) -> FeatureSequence:
    raw = Path(path).read_bytes()
    if len(raw) < _VAFS_HEADER.size:
        raise FeatureFormatError(
            f"{path}: truncated header, expected {_VAFS_HEADER.size} bytes, got {len(raw)}"
        )
    magic, version, n_rows, dim, rate = _VAFS_HEADER.unpack_from(raw)
    if magic != VAFS_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r} at byte 0, expected b'VAFS'")
    if version != VAFS_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version} at byte 4")
    if dim == 0:
        raise FeatureFormatError(f"{path}: zero feature dimension at byte 12")
    if not (math.isfinite(rate) and rate > 0):
        raise FeatureFormatError(f"{path}: invalid rate {rate} at byte 16")
    expected = _VAFS_HEADER.size + 4 * n_rows * dim
    if len(raw) < expected:
        raise FeatureFormatError(
            f"{path}: truncated payload, expected {expected} bytes, got {len(raw)} "
            f"(row {(len(raw) - _VAFS_HEADER.size) // (4 * dim)} of {n_rows} incomplete "
            f"at byte {len(raw)})"
        )
    if len(raw) > expected:
        raise FeatureFormatError(
            f"{path}: {len(raw) - expected} trailing bytes after byte {expected}; "
            f"header declares {n_rows}x{dim}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_VAFS_HEADER.size).reshape(n_rows, dim)
    return FeatureSequence(data.astype(np.float64), float(rate))


def write_labels(path, labels: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index", "valence", "arousal"])
        for i, (v, a) in enumerate(np.asarray(labels, dtype=np.float64)):
            writer.writerow([i, repr(float(v)), repr(float(a))])


def read_labels(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["frame_index", "valence", "arousal"]:
        raise ValueError(f"{path}: expected header 'frame_index,valence,arousal'")
    out = np.empty((len(rows) - 1, 2))
    for n, row in enumerate(rows[1:]):
        if len(row) != 3 or int(row[0]) != n:
            raise ValueError(f"{path}: line {n + 2}: expected frame_index {n} and 2 values")
        out[n] = float(row[1]), float(row[2])
    return out


@dataclass
class SequenceRecord:
    id: str
    visual: FeatureSequence
    audio: FeatureSequence
    labels: np.ndarray  # (T_v, 2)

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.float64)
        self.labels = labels
        if labels.shape != (self.visual.length, 2):
            raise ValueError(
                f"{self.id}: {labels.shape[0]} labels for {self.visual.length} visual frames"
            )
        if self.visual.length == 0 or self.audio.length == 0:
            raise ValueError(f"{self.id}: empty modality")
        gap = abs(self.visual.length / self.visual.rate - self.audio.length / self.audio.rate)
        if gap > 1.0 / min(self.visual.rate, self.audio.rate) + _EPS:
            raise ValueError(f"{self.id}: modality durations differ by {gap:.3f}s")
        if np.any(np.abs(labels) > 1.0):
            raise ValueError(f"{self.id}: labels outside [-1, 1]")

    @property
    def duration(self) -> float:
        return self.visual.length / self.visual.rate


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def write_dataset(records: Sequence[SequenceRecord], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in records:
        entry = {
            "id": rec.id,
            "visual": f"{rec.id}.visual.vafs",
            "audio": f"{rec.id}.audio.vafs",
            "labels": f"{rec.id}.labels.csv",
        }
        write_feature_file(out / entry["visual"], rec.visual)
        write_feature_file(out / entry["audio"], rec.audio)
        write_labels(out / entry["labels"], rec.labels)
        entries.append(entry)
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"version": 1, "sequences": entries}, indent=2) + "\n")
    return manifest


def read_manifest(path) -> list[dict]:
    path = Path(path)
    doc = json.loads(path.read_text())
    entries = doc["sequences"] if isinstance(doc, dict) else doc
    for e in entries:
        missing = {"id", "visual", "audio", "labels"} - set(e)
        if missing:
            raise ValueError(f"{path}: manifest entry missing {sorted(missing)}")
    return entries


def load_dataset(manifest_path) -> list[SequenceRecord]:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    records = []
    for e in read_manifest(manifest_path):
        records.append(
            SequenceRecord(
                id=str(e["id"]),
                visual=read_feature_file(base / e["visual"]),
                audio=read_feature_file(base / e["audio"]),
                labels=read_labels(base / e["labels"]),
            )
        )
    return records


# ---------------------------------------------------------------------------
# Windowing
# ---------------------------------------------------------------------------


@dataclass
class WindowSample:
    sequence_id: str
    start: float
    frame_indices: np.ndarray  # (20,) visual frame indices into the sequence
    visual: np.ndarray  # (20, D_v)
    audio: np.ndarray  # (ceil(window * r_a), D_a)
    targets: np.ndarray  # (20, 2)
    soft_targets: np.ndarray  # (20, 9)


def sample_frames(available: int, count: int = FRAMES_PER_WINDOW) -> np.ndarray:
    """``count`` indices spread evenly over ``range(available)``, halves rounded up."""
    if available < 1:
        raise ValueError(f"sample_frames: need at least one frame, got {available}")
    if count == 1:
        return np.zeros(1, dtype=np.int64)
    i = np.arange(count)
    return np.floor(i * (available - 1) / (count - 1) + 0.5).astype(np.int64)


def window_count(duration: float, window_sec: float = WINDOW_SEC, stride_sec: float = STRIDE_SEC) -> int:
    if duration + _EPS < window_sec:
        return 0
    return int(math.floor((duration - window_sec) / stride_sec + _EPS)) + 1


def slice_windows(
    record: SequenceRecord,
    window_sec: float = WINDOW_SEC,
    stride_sec: float = STRIDE_SEC,
    grid: GridConfig | None = None,
    frames: int = FRAMES_PER_WINDOW,
) -> list[WindowSample]:
    """Full-length windows only; audio is zero-padded past the sequence end."""
    grid = grid or GridConfig()
    n = window_count(record.duration, window_sec, stride_sec)
    if n == 0:
        log.warning(
            "%s: duration %.3fs shorter than %.3fs window; no windows",
            record.id, record.duration, window_sec,
        )
        return []
    r_v, r_a = record.visual.rate, record.audio.rate
    n_audio = int(math.ceil(window_sec * r_a - _EPS))
    out = []
    for w in range(n):
        start = w * stride_sec
        v0 = int(math.ceil(start * r_v - _EPS))
        v1 = min(int(math.ceil((start + window_sec) * r_v - _EPS)), record.visual.length)
        idx = v0 + sample_frames(v1 - v0, frames)
        a0 = int(math.ceil(start * r_a - _EPS))
        audio = record.audio.data[a0: a0 + n_audio]
        if audio.shape[0] < n_audio:
            pad = np.zeros((n_audio - audio.shape[0], record.audio.dim))
            audio = np.concatenate([audio, pad], axis=0)
        targets = record.labels[idx]
        out.append(
            WindowSample(
                sequence_id=record.id,
                start=start,
                frame_indices=idx,
                visual=record.visual.data[idx],
                audio=audio,
                targets=targets,
                soft_targets=soft_labels(targets, grid),
            )
        )
    return out


def iterate_batches(
    windows: Sequence[WindowSample], batch_size: int, rng: np.random.Generator | None = None
) -> Iterator[list[WindowSample]]:
    """Shuffled (when ``rng`` is given) batches; the last one may be short."""
    order = np.arange(len(windows)) if rng is None else rng.permutation(len(windows))
    for i in range(0, len(order), batch_size):
        yield [windows[j] for j in order[i: i + batch_size]]


def collate(batch: Sequence[WindowSample]) -> dict[str, np.ndarray]:
    return {
        "visual": np.stack([w.visual for w in batch]),
        "audio": np.stack([w.audio for w in batch]),
        "targets": np.stack([w.targets for w in batch]),
        "soft_targets": np.stack([w.soft_targets for w in batch]),
    }


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    """Mean-reverting VA trajectories rendered through fixed random feature maps.

    ``feature_noise`` is the std of additive Gaussian noise on both modalities.
    ``noise_only`` replaces every feature row with label-independent noise.
    """

    n_sequences: int = 40
    duration: float = 30.0
    rate_visual: float = 6.0
    rate_audio: float = 10.0
    dim_visual: int = 512
    dim_audio: int = 768
    theta: float = 0.5
    eta: float = 0.6
    feature_noise: float = 0.1
    sim_rate: float = 30.0
    initial_state: tuple[float, float] | None = None
    noise_only: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("n_sequences", "duration", "rate_visual", "rate_audio",
                     "dim_visual", "dim_audio", "sim_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"SynthConfig.{name} must be positive")
        for name in ("theta", "eta", "feature_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"SynthConfig.{name} must be non-negative")
        if self.initial_state is not None:
            self.initial_state = tuple(float(x) for x in self.initial_state)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SynthConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def simulate_trajectory(config: SynthConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Times and clamped (valence, arousal) states on the simulation grid."""
    dt = 1.0 / config.sim_rate
    n = int(math.ceil(config.duration * config.sim_rate)) + 2
    if config.initial_state is not None:
        s = np.array(config.initial_state, dtype=np.float64)
    else:
        spread = config.eta / math.sqrt(2 * config.theta) if config.theta > 0 else config.eta
        s = rng.normal(0.0, spread, size=2)
    s = np.clip(s, -1.0, 1.0)
    states = np.empty((n, 2))
    noise = rng.normal(size=(n, 2))
    for k in range(n):
        states[k] = s
        s = s - config.theta * s * dt + config.eta * math.sqrt(dt) * noise[k]
        s = np.clip(s, -1.0, 1.0)
    return np.arange(n) * dt, states


def _interp(times: np.ndarray, grid_t: np.ndarray, states: np.ndarray) -> np.ndarray:
    return np.stack([np.interp(times, grid_t, states[:, j]) for j in range(2)], axis=1)


def synth_generate(config: SynthConfig) -> list[SequenceRecord]:
    rng = np.random.default_rng(config.seed)
    maps = {
        "visual": (rng.normal(size=(2, config.dim_visual)), rng.normal(0, 0.5, config.dim_visual)),
        "audio": (rng.normal(size=(2, config.dim_audio)), rng.normal(0, 0.5, config.dim_audio)),
    }
    t_v = int(round(config.duration * config.rate_visual))
    t_a = int(round(config.duration * config.rate_audio))
    records = []
    for n in range(config.n_sequences):
        grid_t, states = simulate_trajectory(config, rng)
        labels = _interp(np.arange(t_v) / config.rate_visual, grid_t, states)
        feats = {}
        for name, count, rate in (("visual", t_v, config.rate_visual), ("audio", t_a, config.rate_audio)):
            weight, bias = maps[name]
            y = _interp(np.arange(count) / rate, grid_t, states)
            if config.noise_only:
                x = rng.normal(0.0, 0.5, size=(count, weight.shape[1]))
            else:
                x = np.tanh(y @ weight + bias)
            if config.feature_noise > 0:
                x = x + config.feature_noise * rng.normal(size=x.shape)
            # Round through float32 so in-memory records match their files.
            feats[name] = FeatureSequence(x.astype(np.float32).astype(np.float64), rate)
        records.append(SequenceRecord(f"seq{n:04d}", feats["visual"], feats["audio"], labels))
    return records


def split_records(
    records: Sequence[SequenceRecord], val_fraction: float, seed: int
) -> tuple[list[SequenceRecord], list[SequenceRecord]]:
    """Seeded split by sequence (no window of a sequence crosses splits)."""
    if not 0 <= val_fraction < 1:
        raise ValueError(f"val_fraction must be in [0, 1), got {val_fraction}")
    n_val = int(round(len(records) * val_fraction))
    order = np.random.default_rng(seed).permutation(len(records))
    val_ids = set(order[:n_val].tolist())
    train = [r for i, r in enumerate(records) if i not in val_ids]
    val = [r for i, r in enumerate(records) if i in val_ids]
    return train, val
