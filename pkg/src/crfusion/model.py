"""Assembly of all trainable and frozen parameter groups.

One ParamStore holds every tensor, namespaced by prefix:

    fusion.*      the fusion adapter (trained in both stages)
    text_query.*  surrogate encoder for the modification text (stage 2 only)
    caption.*     frozen twin of the text encoder for caption inputs

The caption encoder is initialized from the same seed stream as the query
text encoder, so the two start bit-identical (they share parameters until
stage 2 unties the query side) and the caption side never trains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoders import SurrogateTextEncoderParams, init_surrogate_params
from .errors import ConfigError
from .fusion import FusionParams, init_fusion_params

FUSION_PREFIX = "fusion"
TEXT_QUERY_PREFIX = "text_query"
CAPTION_PREFIX = "caption"


@dataclass
class ModelConfig:
    dim: int = 32
    heads: int = 4
    ffn_mult: int = 4
    path1_blocks: int = 2
    vocab_size: int = 32
    init_std: float = 0.02

    def __post_init__(self):
        if self.dim <= 0 or self.heads <= 0 or self.vocab_size < 2:
            raise ConfigError("model dims and vocabulary must be positive")
        if self.dim % self.heads != 0:
            raise ConfigError(
                f"model dim {self.dim} not divisible by heads {self.heads}")
        if self.path1_blocks < 1:
            raise ConfigError("path1_blocks must be at least 1")


@dataclass
class Model:
    store: ad.ParamStore
    fusion: FusionParams
    text_query: SurrogateTextEncoderParams
    caption: SurrogateTextEncoderParams
    config: ModelConfig

    def fusion_param_names(self) -> list[str]:
        return [n for n in self.store.names() if n.startswith(FUSION_PREFIX + ".")]

    def text_query_param_names(self) -> list[str]:
        return [n for n in self.store.names() if n.startswith(TEXT_QUERY_PREFIX + ".")]

    def caption_param_names(self) -> list[str]:
        return [n for n in self.store.names() if n.startswith(CAPTION_PREFIX + ".")]


def build_model(config: ModelConfig, seed: int) -> Model:
    """Deterministically initialize all parameter groups from one seed (PCG64)."""
    root = np.random.SeedSequence(seed)
    fusion_seed, text_seed = root.spawn(2)
    store = ad.ParamStore()
    fusion = init_fusion_params(store, config.dim, config.heads,
                                np.random.default_rng(fusion_seed),
                                path1_blocks=config.path1_blocks,
                                ffn_mult=config.ffn_mult,
                                std=config.init_std, prefix=FUSION_PREFIX)
    # Same child seed twice: query and caption encoders start bit-identical.
    text_query = init_surrogate_params(store, config.vocab_size, config.dim,
                                       config.heads, np.random.default_rng(text_seed),
                                       ffn_mult=config.ffn_mult, std=config.init_std,
                                       prefix=TEXT_QUERY_PREFIX)
    caption = init_surrogate_params(store, config.vocab_size, config.dim,
                                    config.heads, np.random.default_rng(text_seed),
                                    ffn_mult=config.ffn_mult, std=config.init_std,
                                    prefix=CAPTION_PREFIX)
    return Model(store, fusion, text_query, caption, config)
