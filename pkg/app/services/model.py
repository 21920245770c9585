"""
The full SpatialFusion parameter set and its forward paths.
"""
from typing import List, Optional

import numpy as np

from ..models.config import ModelConfig
from ..numcore.array import Array
from ..numcore.params import ParameterStore
from ..numcore.rng import Rng
from .attention import SemanticState, SemanticTransformer, SpatialTransformer
from .diffusion import DiT, DepthAdapter, FusionProjection, LatentCodec, NoiseSchedule
from .geometry import (
    DepthHead,
    PatchEncoder,
    ProbeHead,
    QueryBank,
    decode_depth,
    derive_geometry,
    init_geo_states,
    probe_baseline,
)

PARAM_GROUPS = (
    "semantic", "spatial", "queries", "image_encoder", "depth_head",
    "probe", "codec", "adapter", "fusion", "dit",
)


class SpatialFusionModel:
    """
    Every component of the system over one ParameterStore.

    All groups are registered whatever the share strategy or inject mode, so
    parameter sets (and checkpoints) of ablation variants line up name for name.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.store = ParameterStore()
        rng = Rng(seed, "init")
        self.semantic = SemanticTransformer(cfg, self.store, rng.child("semantic"))
        self.spatial = SpatialTransformer(cfg, self.store, rng.child("spatial"))
        self.queries = QueryBank(cfg, self.store, rng.child("queries"))
        self.encoder = PatchEncoder(cfg, self.store, rng.child("image_encoder"))
        self.depth_head = DepthHead(cfg, self.store, rng.child("depth_head"))
        self.probe = ProbeHead(cfg, self.store, rng.child("probe"))
        self.codec = LatentCodec(cfg, self.store, rng.child("codec"))
        self.adapter = DepthAdapter(cfg, self.store, rng.child("adapter"))
        self.fusion = FusionProjection(cfg, self.store)
        self.dit = DiT(cfg, self.store, rng.child("dit"))
        self.schedule = NoiseSchedule.from_config(cfg)
        self.trained = False

    def derive_depth(self, sem_states: List[SemanticState], sources: Optional[np.ndarray] = None) -> Array:
        """Metric depth (B, H, W) from semantic states and optional edit sources."""
        batch = sem_states[0].hidden.shape[0]
        state0 = init_geo_states(self.queries, batch, sources, self.encoder)
        return decode_depth(derive_geometry(state0, sem_states, self.cfg, self.spatial), self.depth_head)

    def probe_depth(self, sem_states: List[SemanticState]) -> Array:
        return probe_baseline(sem_states, self.probe, self.depth_head)

    def depth_for_prompts(self, prompts: np.ndarray, sources: Optional[np.ndarray] = None) -> Array:
        return self.derive_depth(self.semantic.forward(prompts), sources)
