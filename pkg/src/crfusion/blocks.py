"""Transformer block with a cross-attention layer between self-attention and FFN.

The block follows the BERT layout: post-layer-norm, GELU feed-forward with a
4x expansion, residual connections around each sublayer. Queries and key/value
tokens may come from different modalities; masked key/value tokens receive
exactly zero attention weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeError, UsageError

LN_EPS = 1e-5
MASK_BIAS = -1e9  # added to masked key positions before softmax; exact zero weight after exp


@dataclass
class TokenSequence:
    """A length-L sequence of d-dimensional embedding rows plus a validity mask.

    Token index 0 is the class token whenever the sequence feeds a pooled
    representation.
    """

    tokens: ad.Node  # (L, d)
    mask: np.ndarray  # bool, shape (L,)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool).reshape(-1)
        if self.mask.shape[0] != self.tokens.value.shape[0]:
            raise ShapeError(
                f"mask length {self.mask.shape[0]} does not match "
                f"{self.tokens.value.shape[0]} tokens")
        if not self.mask.any():
            raise UsageError("TokenSequence needs at least one valid token")

    @classmethod
    def from_array(cls, tokens, mask=None) -> "TokenSequence":
        arr = ad.as_matrix(tokens)
        if mask is None:
            mask = np.ones(arr.shape[0], dtype=bool)
        return cls(ad.constant(arr), mask)

    @property
    def length(self) -> int:
        return self.tokens.value.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.value.shape[1]

    def class_token(self) -> ad.Node:
        """Pooled representation: the first row, shape (1, d)."""
        return ad.slice_rows(self.tokens, 0, 1)


@dataclass
class AttentionParams:
    """Projection weights for one multi-head attention layer."""

    w_q: ad.ParamTensor
    w_k: ad.ParamTensor
    w_v: ad.ParamTensor
    w_o: ad.ParamTensor
    heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        if d % self.heads != 0:
            raise ShapeError(f"model dim {d} is not divisible by {self.heads} heads")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]


@dataclass
class CaBlockParams:
    """All weights of one block: two attention layers, FFN, three layer norms."""

    self_attn: AttentionParams
    cross_attn: AttentionParams
    ffn_in: ad.ParamTensor      # (d, ffn_mult * d)
    ffn_b_in: ad.ParamTensor    # (1, ffn_mult * d)
    ffn_out: ad.ParamTensor     # (ffn_mult * d, d)
    ffn_b_out: ad.ParamTensor   # (1, d)
    ln1_gain: ad.ParamTensor
    ln1_bias: ad.ParamTensor
    ln2_gain: ad.ParamTensor
    ln2_bias: ad.ParamTensor
    ln3_gain: ad.ParamTensor
    ln3_bias: ad.ParamTensor

    @property
    def dim(self) -> int:
        return self.self_attn.dim


def init_attention_params(store: ad.ParamStore, prefix: str, dim: int,
                          heads: int, rng: np.random.Generator,
                          std: float = 0.02, dtype=np.float32) -> AttentionParams:
    def mat(name):
        return store.add(f"{prefix}.{name}",
                         ad.truncated_normal(rng, dim, dim, std, dtype))

    return AttentionParams(mat("w_q"), mat("w_k"), mat("w_v"), mat("w_o"), heads)


def init_ca_block_params(store: ad.ParamStore, prefix: str, dim: int,
                         heads: int, rng: np.random.Generator,
                         ffn_mult: int = 4, std: float = 0.02,
                         dtype=np.float32) -> CaBlockParams:
    """Register one block's weights under `prefix`; norms start at identity."""
    hidden = ffn_mult * dim
    self_attn = init_attention_params(store, f"{prefix}.self_attn", dim, heads,
                                      rng, std, dtype)
    cross_attn = init_attention_params(store, f"{prefix}.cross_attn", dim, heads,
                                       rng, std, dtype)
    ffn_in = store.add(f"{prefix}.ffn_in",
                       ad.truncated_normal(rng, dim, hidden, std, dtype))
    ffn_b_in = store.add(f"{prefix}.ffn_b_in", np.zeros((1, hidden), dtype=dtype))
    ffn_out = store.add(f"{prefix}.ffn_out",
                        ad.truncated_normal(rng, hidden, dim, std, dtype))
    ffn_b_out = store.add(f"{prefix}.ffn_b_out", np.zeros((1, dim), dtype=dtype))
    norms = {}
    for ln in ("ln1", "ln2", "ln3"):
        norms[f"{ln}_gain"] = store.add(f"{prefix}.{ln}_gain",
                                        np.ones((1, dim), dtype=dtype))
        norms[f"{ln}_bias"] = store.add(f"{prefix}.{ln}_bias",
                                        np.zeros((1, dim), dtype=dtype))
    return CaBlockParams(self_attn, cross_attn, ffn_in, ffn_b_in, ffn_out,
                         ffn_b_out, **norms)


def multi_head_attention(q: TokenSequence, kv: TokenSequence,
                         p: AttentionParams) -> TokenSequence:
    """Scaled dot-product attention from q over kv, heads concatenated.

    Masked kv tokens are excluded exactly: their post-softmax weight is 0.
    """
    d = p.dim
    if q.dim != d or kv.dim != d:
        raise ShapeError(
            f"attention dims differ: q {q.tokens.value.shape}, "
            f"kv {kv.tokens.value.shape}, params d={d}")
    dh = d // p.heads
    scale = 1.0 / np.sqrt(dh)
    dtype = q.tokens.dtype

    qp = ad.matmul(q.tokens, ad.leaf(p.w_q))
    kp = ad.matmul(kv.tokens, ad.leaf(p.w_k))
    vp = ad.matmul(kv.tokens, ad.leaf(p.w_v))

    bias = ad.constant(np.where(kv.mask, 0.0, MASK_BIAS)[None, :].astype(dtype))
    contexts = []
    for h in range(p.heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = ad.slice_cols(qp, lo, hi)
        kh = ad.slice_cols(kp, lo, hi)
        vh = ad.slice_cols(vp, lo, hi)
        scores = ad.add(ad.mul(ad.matmul(qh, ad.transpose(kh)), scale), bias)
        weights = ad.softmax_rows(scores)
        contexts.append(ad.matmul(weights, vh))
    merged = ad.concat_cols(contexts)
    out = ad.matmul(merged, ad.leaf(p.w_o))
    return TokenSequence(out, q.mask)


def _ffn(x: ad.Node, p: CaBlockParams) -> ad.Node:
    hidden = ad.gelu(ad.add(ad.matmul(x, ad.leaf(p.ffn_in)), ad.leaf(p.ffn_b_in)))
    return ad.add(ad.matmul(hidden, ad.leaf(p.ffn_out)), ad.leaf(p.ffn_b_out))


def ca_block_forward(q: TokenSequence, kv: TokenSequence,
                     p: CaBlockParams) -> TokenSequence:
    """Self-attention over q, cross-attention into kv, FFN; post-norm residuals."""
    sa = multi_head_attention(q, q, p.self_attn)
    x1 = ad.layer_norm_rows(ad.add(q.tokens, sa.tokens),
                            ad.leaf(p.ln1_gain), ad.leaf(p.ln1_bias), LN_EPS)
    ca = multi_head_attention(TokenSequence(x1, q.mask), kv, p.cross_attn)
    x2 = ad.layer_norm_rows(ad.add(x1, ca.tokens),
                            ad.leaf(p.ln2_gain), ad.leaf(p.ln2_bias), LN_EPS)
    ff = _ffn(x2, p)
    x3 = ad.layer_norm_rows(ad.add(x2, ff),
                            ad.leaf(p.ln3_gain), ad.leaf(p.ln3_bias), LN_EPS)
    return TokenSequence(x3, q.mask)
