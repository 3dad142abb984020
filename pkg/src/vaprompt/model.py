"""The full VA network: projections, temporal encoders, fusion and both heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .autodiff import Tensor
from .fusion import Fusion, FusionMode, RegressionHead
from .labels import PrototypeMatrix, SemanticHead
from .module import Linear, Module
from .sequence import make_encoder, project


@dataclass
class ModelConfig:
    dim_visual: int = 512
    dim_audio: int = 768
    hidden: int = 256
    heads: int = 4
    head_hidden: int = 128
    temporal: str = "gru"
    fusion_mode: str = "hierarchical"
    semantic_mode: str = "linear"
    tcn_kernel: int = 3
    tcn_dilations: tuple[int, ...] = (1, 2, 4, 8)

    def __post_init__(self):
        self.tcn_dilations = tuple(int(d) for d in self.tcn_dilations)
        self.fusion_mode = FusionMode(self.fusion_mode).value
        if self.temporal not in ("gru", "tcn"):
            raise ValueError(f"temporal must be 'gru' or 'tcn', got {self.temporal!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tcn_dilations"] = list(self.tcn_dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class VAModel(Module):
    """Maps a batch of windows to per-frame (valence, arousal) and region logits."""

    def __init__(
        self,
        config: ModelConfig,
        rng: np.random.Generator,
        prototypes: PrototypeMatrix | None = None,
    ):
        self.config = config
        c = config
        tcn = {"kernel": c.tcn_kernel, "dilations": c.tcn_dilations}
        kw = tcn if c.temporal == "tcn" else {}
        self.proj_visual = Linear(c.dim_visual, c.hidden, rng)
        self.proj_audio = Linear(c.dim_audio, c.hidden, rng)
        self.temporal_visual = make_encoder(c.temporal, c.hidden, c.hidden, rng, **kw)
        self.temporal_audio = make_encoder(c.temporal, c.hidden, c.hidden, rng, **kw)
        self.fusion = Fusion(c.hidden, c.heads, c.fusion_mode, rng)
        self.regressor = RegressionHead(c.hidden, c.head_hidden, rng)
        self.semantic = SemanticHead(c.hidden, rng, mode=c.semantic_mode, prototypes=prototypes)
        # Frozen feature extractors live upstream; this group stays empty here.
        self.backbone: list[Module] = []

    def param_groups(self) -> dict[str, list[Tensor]]:
        backbone = [p for m in self.backbone for p in m.parameters()]
        ids = {id(p) for p in backbone}
        return {"backbone": backbone, "head": [p for p in self.parameters() if id(p) not in ids]}

    def features(self, visual, audio) -> Tensor:
        """Fused per-frame representation ``(B, T_v, hidden)``."""
        v = visual if isinstance(visual, Tensor) else Tensor(visual)
        a = audio if isinstance(audio, Tensor) else Tensor(audio)
        h_v = self.temporal_visual(project(v, self.proj_visual))
        h_a = self.temporal_audio(project(a, self.proj_audio))
        return self.fusion(h_v, h_a)

    def __call__(self, visual, audio) -> tuple[Tensor, Tensor]:
        fused = self.features(visual, audio)
        return self.regressor(fused), self.semantic.logits(fused)
