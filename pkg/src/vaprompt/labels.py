"""The 3x3 valence-arousal grid, Gaussian soft labels and the semantic head.

Regions are enumerated arousal-major: ``index = 3 * arousal_level +
valence_level`` with levels ordered low, mid, high.  Region 0 is therefore
low-arousal/low-valence and region 8 high-arousal/high-valence.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .module import Linear, Module

N_REGIONS = 9

PROMPT_TEMPLATES = (
    "a photo of a person who looks {}",
    "a face showing {}",
    "a facial expression of {}",
)

# Keyed by (arousal level, valence level).
REGION_NAMES = {
    ("low", "low"): "sad, tired, and low-energy",
    ("low", "mid"): "calm and neutral in a quiet way",
    ("low", "high"): "content, relaxed, and peaceful",
    ("mid", "low"): "uncomfortable and displeased",
    ("mid", "mid"): "neutral and composed",
    ("mid", "high"): "pleased and comfortable",
    ("high", "low"): "angry, distressed, and highly-aroused",
    ("high", "mid"): "alert, surprised, and highly-aroused",
    ("high", "high"): "excited, joyful, and energetic",
}
_LEVELS = ("low", "mid", "high")
CANONICAL_NAMES = tuple(REGION_NAMES[(a, v)] for a in _LEVELS for v in _LEVELS)


@dataclass(frozen=True)
class GridConfig:
    """Axis centers shared by valence and arousal, plus the kernel width."""

    axis_centers: tuple[float, float, float] = (-0.66, 0.0, 0.66)
    sigma: float = 0.45
    names: tuple[str, ...] = CANONICAL_NAMES

    def __post_init__(self):
        centers = tuple(float(c) for c in self.axis_centers)
        object.__setattr__(self, "axis_centers", centers)
        object.__setattr__(self, "names", tuple(self.names))
        if len(centers) != 3:
            raise ValueError(f"grid must be 3x3, got {len(centers)} axis centers")
        if not all(a < b for a, b in zip(centers, centers[1:])):
            raise ValueError(f"axis centers must be strictly increasing: {centers}")
        if not all(-1.0 <= c <= 1.0 for c in centers):
            raise ValueError(f"axis centers must lie in [-1, 1]: {centers}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if len(self.names) != N_REGIONS:
            raise ValueError(f"need {N_REGIONS} region names, got {len(self.names)}")

    @property
    def centers(self) -> np.ndarray:
        """(9, 2) array of (valence, arousal) region centers."""
        c = self.axis_centers
        return np.array([(c[v], c[a]) for a in range(3) for v in range(3)], dtype=np.float64)

    def to_dict(self) -> dict:
        out = {"axis_centers": list(self.axis_centers), "sigma": self.sigma}
        if self.names != CANONICAL_NAMES:
            out["names"] = list(self.names)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        kwargs = {k: d[k] for k in ("axis_centers", "sigma", "names") if k in d}
        if "axis_centers" in kwargs:
            kwargs["axis_centers"] = tuple(kwargs["axis_centers"])
        return cls(**kwargs)


@dataclass(frozen=True)
class RegionSpec:
    index: int
    center: tuple[float, float]
    name: str
    prompt_texts: tuple[str, str, str]


def grid_regions(config: GridConfig) -> list[RegionSpec]:
    centers = config.centers
    return [
        RegionSpec(
            index=i,
            center=(float(centers[i, 0]), float(centers[i, 1])),
            name=config.names[i],
            prompt_texts=tuple(t.format(config.names[i]) for t in PROMPT_TEMPLATES),
        )
        for i in range(N_REGIONS)
    ]


def soft_labels(points, config: GridConfig) -> np.ndarray:
    """Gaussian-kernel region distributions for an (N, 2) array of VA points."""
    y = np.asarray(points, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != 2:
        raise ValueError(f"expected (N, 2) VA points, got shape {y.shape}")
    if np.any(np.abs(y) > 1.0) or not np.all(np.isfinite(y)):
        raise ValueError("VA points must lie in [-1, 1]^2")
    d2 = ((y[:, None, :] - config.centers[None, :, :]) ** 2).sum(axis=-1)
    logits = -d2 / (2.0 * config.sigma**2)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def soft_label(y: Sequence[float], config: GridConfig) -> np.ndarray:
    """The 9 soft weights for a single (valence, arousal) point."""
    return soft_labels(np.asarray(y, dtype=np.float64).reshape(1, 2), config)[0]


# ---------------------------------------------------------------------------
# Text prototypes (VAPB files)
# ---------------------------------------------------------------------------

VAPB_MAGIC = b"VAPB"
VAPB_VERSION = 1
_VAPB_HEADER = struct.Struct("<4sIII")


class PrototypeFormatError(ValueError):
    pass


@dataclass(frozen=True)
class PrototypeMatrix:
    rows: np.ndarray = field(repr=False)
    source_digest: str = ""

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


def write_prototypes(path, rows) -> None:
    rows = np.asarray(rows, dtype="<f4")
    if rows.ndim != 2 or rows.shape[0] != N_REGIONS:
        raise ValueError(f"prototype matrix must be ({N_REGIONS}, E), got {rows.shape}")
    header = _VAPB_HEADER.pack(VAPB_MAGIC, VAPB_VERSION, rows.shape[0], rows.shape[1])
    Path(path).write_bytes(header + rows.tobytes(order="C"))


def load_prototypes(path, expected_dim: int | None = None) -> PrototypeMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < _VAPB_HEADER.size:
        raise PrototypeFormatError(
            f"{path}: header needs {_VAPB_HEADER.size} bytes, file has {len(raw)}"
        )
    magic, version, n_rows, dim = _VAPB_HEADER.unpack_from(raw)
    if magic != VAPB_MAGIC:
        raise PrototypeFormatError(f"{path}: bad magic {magic!r} at offset 0, expected b'VAPB'")
    if version != VAPB_VERSION:
        raise PrototypeFormatError(f"{path}: unsupported version {version} at offset 4")
    if n_rows != N_REGIONS:
        raise PrototypeFormatError(f"{path}: row count {n_rows} at offset 8, expected 9")
    if dim == 0:
        raise PrototypeFormatError(f"{path}: zero embedding dimension at offset 12")
    if expected_dim is not None and dim != expected_dim:
        raise PrototypeFormatError(f"{path}: embedding dimension {dim} != expected {expected_dim}")
    expected = _VAPB_HEADER.size + 4 * n_rows * dim
    if len(raw) != expected:
        raise PrototypeFormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    rows = np.frombuffer(raw, dtype="<f4", offset=_VAPB_HEADER.size).reshape(n_rows, dim)
    rows = rows.astype(np.float64)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(rows)):
        raise PrototypeFormatError(f"{path}: prototype rows must be finite and non-zero")
    return PrototypeMatrix(rows / norms, hashlib.sha256(raw).hexdigest())


# ---------------------------------------------------------------------------
# Semantic head
# ---------------------------------------------------------------------------


class SemanticHead(Module):
    """Maps fused features to 9 region logits.

    ``linear`` mode is a plain affine map.  ``prototype`` mode projects to the
    prototype dimension and scores cosine similarity against each region's
    text prototype, scaled by a learnable temperature.
    """

    def __init__(
        self,
        hidden: int,
        rng: np.random.Generator,
        mode: str = "linear",
        prototypes: PrototypeMatrix | None = None,
        temperature: float = 10.0,
    ):
        if mode not in ("linear", "prototype"):
            raise ValueError(f"unknown semantic head mode {mode!r}")
        self.mode = mode
        self.hidden = hidden
        if mode == "linear":
            self.proj = Linear(hidden, N_REGIONS, rng)
        else:
            if prototypes is None:
                raise ValueError("prototype mode requires a loaded PrototypeMatrix")
            self.prototypes = prototypes
            self._proto_t = Tensor(prototypes.rows.T.copy())
            self.proj = Linear(hidden, prototypes.dim, rng)
            self.temperature = Tensor(np.array(float(temperature)), requires_grad=True)

    def logits(self, feature: Tensor) -> Tensor:
        if feature.shape[-1] != self.hidden:
            raise ValueError(f"semantic head: feature dim {feature.shape[-1]} != {self.hidden}")
        if self.mode == "linear":
            return self.proj(feature)
        z = self.proj(feature)
        norm = ad.sqrt(ad.sum(ad.square(z), axis=-1, keepdims=True) + 1e-12)
        cos = (z / norm) @ self._proto_t
        return cos * self.temperature

    def __call__(self, feature: Tensor) -> Tensor:
        return ad.softmax(self.logits(feature))


def semantic_distribution(feature: Tensor, head: SemanticHead) -> Tensor:
    """Row-wise 9-way distribution over regions."""
    return head(feature)
