"""Dual-target contrastive objective over cosine similarities.

The loss is a symmetric softmax contrast at temperature tau whose in-batch
negatives can be reweighted toward hard examples: each negative's weight is
proportional to exp(beta * sim / tau), normalized so the weights average to 1
over the negatives of a row, while the positive term is scaled by alpha in
the denominator. At (alpha=1, beta=0) this is exactly standard symmetric
InfoNCE, which anchors the verification oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError, UsageError

_DIAG_BIAS = -1e9


@dataclass
class LossConfig:
    temperature: float = 0.07
    hn_alpha: float = 1.0
    hn_beta: float = 0.5
    video_weight: float = 0.5
    caption_weight: float = 0.5

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("loss temperature must be positive")
        if self.hn_beta < 0:
            raise ConfigError("hn_beta must be non-negative")
        if abs(self.video_weight + self.caption_weight - 1.0) > 1e-9:
            raise ConfigError("video_weight and caption_weight must sum to 1")


@dataclass
class BatchEmbeddings:
    """Row i of each matrix belongs to the same training triplet."""

    queries: ad.Node            # (B, d)
    video_targets: ad.Node      # (B, d)
    caption_targets: ad.Node | None  # (B, d); optional when caption_weight is 0


def cosine_matrix(a, b) -> ad.Node:
    """Pairwise cosine similarities, shape (rows(a), rows(b))."""
    a = a if isinstance(a, ad.Node) else ad.constant(a)
    b = b if isinstance(b, ad.Node) else ad.constant(b)
    na = ad.sqrt(ad.sum_rows(ad.mul(a, a)))
    nb = ad.sqrt(ad.sum_rows(ad.mul(b, b)))
    if (na.value == 0).any() or (nb.value == 0).any():
        raise NumericError("cosine_matrix: zero-norm row")
    return ad.matmul(ad.div(a, na), ad.transpose(ad.div(b, nb)))


def _directional_nce(logits: ad.Node, alpha: float, beta: float) -> ad.Node:
    """Mean over rows of -log(pos / (alpha*pos + weighted negatives))."""
    n = logits.value.shape[0]
    dtype = logits.value.dtype
    eye = np.eye(n, dtype=dtype)
    diag_mask = ad.constant(eye)
    diag_bias = ad.constant(eye * _DIAG_BIAS)

    shift = ad.row_max_detached(logits)
    z = ad.exp(ad.sub(logits, shift))
    pos = ad.sum_rows(ad.mul(z, diag_mask))

    # Negative weights: softmax over off-diagonal entries at inverse
    # temperature beta, rescaled to average 1. The diagonal is pushed to a
    # large negative value before exp so its weight is exactly zero.
    scaled = ad.add(ad.mul(logits, beta), diag_bias)
    wshift = ad.row_max_detached(scaled)
    wexp = ad.exp(ad.sub(scaled, wshift))
    weights = ad.mul(ad.div(wexp, ad.sum_rows(wexp)), float(n - 1))

    denom = ad.add(ad.mul(pos, alpha), ad.sum_rows(ad.mul(z, weights)))
    row_losses = ad.sub(ad.log(denom), ad.log(pos))
    return ad.mean_all(row_losses)


def hn_nce_loss(queries, targets, cfg: LossConfig) -> ad.Node:
    """Symmetric hard-negative-weighted contrastive loss, mean over the batch."""
    q = queries if isinstance(queries, ad.Node) else ad.constant(queries)
    t = targets if isinstance(targets, ad.Node) else ad.constant(targets)
    if q.value.shape[0] < 2:
        raise UsageError("contrastive loss needs a batch of at least 2")
    if q.value.shape != t.value.shape:
        raise UsageError(
            f"query/target shapes differ: {q.value.shape} vs {t.value.shape}")
    logits = ad.mul(cosine_matrix(q, t), 1.0 / cfg.temperature)
    forward_nce = _directional_nce(logits, cfg.hn_alpha, cfg.hn_beta)
    reverse_nce = _directional_nce(ad.transpose(logits), cfg.hn_alpha, cfg.hn_beta)
    out = ad.mul(ad.add(forward_nce, reverse_nce), 0.5)
    if not np.isfinite(out.value).all():
        raise NumericError("contrastive loss diverged to a non-finite value")
    return out


def dual_target_loss(batch: BatchEmbeddings, cfg: LossConfig) -> ad.Node:
    """Weighted sum of the video-target and caption-target contrastive terms."""
    terms = []
    if cfg.video_weight != 0.0:
        terms.append(ad.mul(hn_nce_loss(batch.queries, batch.video_targets, cfg),
                            cfg.video_weight))
    if cfg.caption_weight != 0.0:
        if batch.caption_targets is None:
            raise UsageError("caption targets required when caption_weight != 0")
        terms.append(ad.mul(hn_nce_loss(batch.queries, batch.caption_targets, cfg),
                            cfg.caption_weight))
    if not terms:
        raise UsageError("at least one loss component must have nonzero weight")
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return total
