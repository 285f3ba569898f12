"""Two-path multi-stage fusion of text, visual, and caption token sequences.

Path 1 enriches the text tokens by cross-attending to the caption and visual
tokens concatenated along the sequence axis (caption first), through a stack
of blocks that all re-attend to the same concatenation. Path 2 first builds a
text-conditioned visual sequence, then refines the text tokens against it.
The joint query embedding is the mean of the two paths' class tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .blocks import CaBlockParams, TokenSequence, ca_block_forward, init_ca_block_params
from .errors import UsageError


@dataclass
class FusionParams:
    """Weights of the fusion adapter: a path-1 stack plus two path-2 blocks."""

    path1_blocks: list[CaBlockParams]
    path2_block_vt: CaBlockParams  # q = visual, kv = text
    path2_block_tv: CaBlockParams  # q = text, kv = fused visual

    def __post_init__(self):
        dims = {b.dim for b in self.path1_blocks}
        dims.add(self.path2_block_vt.dim)
        dims.add(self.path2_block_tv.dim)
        if len(dims) != 1:
            raise UsageError(f"fusion blocks disagree on model dim: {sorted(dims)}")

    @property
    def dim(self) -> int:
        return self.path2_block_vt.dim


@dataclass
class FusionOutput:
    """Pooled class-token embeddings of both paths and their mean, each (1, d)."""

    emb_tv: ad.Node
    emb_tv_prime: ad.Node
    emb_mm: ad.Node


def init_fusion_params(store: ad.ParamStore, dim: int, heads: int,
                       rng: np.random.Generator, path1_blocks: int = 2,
                       ffn_mult: int = 4, std: float = 0.02,
                       prefix: str = "fusion", dtype=np.float32) -> FusionParams:
    if path1_blocks < 1:
        raise UsageError("path 1 needs at least one block")
    stack = [init_ca_block_params(store, f"{prefix}.path1.block{i}", dim, heads,
                                  rng, ffn_mult, std, dtype)
             for i in range(path1_blocks)]
    vt = init_ca_block_params(store, f"{prefix}.path2.block_vt", dim, heads,
                              rng, ffn_mult, std, dtype)
    tv = init_ca_block_params(store, f"{prefix}.path2.block_tv", dim, heads,
                              rng, ffn_mult, std, dtype)
    return FusionParams(stack, vt, tv)


def concat_sequences(a: TokenSequence, b: TokenSequence) -> TokenSequence:
    """Concatenate along the sequence axis; masks concatenate in the same order."""
    tokens = ad.concat_rows([a.tokens, b.tokens])
    mask = np.concatenate([a.mask, b.mask])
    return TokenSequence(tokens, mask)


def fuse_path1(emb_t: TokenSequence, emb_c: TokenSequence | None,
               emb_v: TokenSequence, p: FusionParams,
               use_caption: bool = True) -> TokenSequence:
    """Caption-enriched text: every stacked block attends to [caption, visual].

    With `use_caption=False` (ablation) the key/value sequence is the visual
    tokens alone.
    """
    if use_caption:
        if emb_c is None:
            raise UsageError("caption sequence required unless use_caption=False")
        kv = concat_sequences(emb_c, emb_v)
    else:
        kv = emb_v
    out = emb_t
    for block in p.path1_blocks:
        out = ca_block_forward(out, kv, block)
    return out


def fuse_path2(emb_t: TokenSequence, emb_v: TokenSequence,
               p: FusionParams) -> TokenSequence:
    """Bi-directional refinement: visual attends to text, then text to that."""
    emb_vt = ca_block_forward(emb_v, emb_t, p.path2_block_vt)
    return ca_block_forward(emb_t, emb_vt, p.path2_block_tv)


def fuse(emb_t: TokenSequence, emb_v: TokenSequence,
         emb_c: TokenSequence | None, p: FusionParams,
         use_caption: bool = True) -> FusionOutput:
    """Run both paths and average their class tokens into the joint embedding."""
    tv = fuse_path1(emb_t, emb_c, emb_v, p, use_caption=use_caption).class_token()
    tv_prime = fuse_path2(emb_t, emb_v, p).class_token()
    emb_mm = ad.mul(ad.add(tv, tv_prime), 0.5)
    return FusionOutput(emb_tv=tv, emb_tv_prime=tv_prime, emb_mm=emb_mm)
