"""Attention operators and spatial distribution of per-object vectors.

Two attention flavors feed the image generator: grid attention, where feature
map columns query word vectors, and object attention, where class label
embeddings query label-space word embeddings. Per-object vectors are spread
over masks with an elementwise max across objects.
"""

from __future__ import annotations

import torch
from torch import nn


def masked_word_softmax(scores: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the last (word) axis with padded words forced to exactly 0.

    scores: (..., Ts); pad_mask: broadcastable (..., Ts) bool, True at real words.
    """
    if not bool(pad_mask.any(dim=-1).all()):
        raise ValueError("every query needs at least one unpadded word")
    neg = torch.finfo(scores.dtype).min
    masked = scores.masked_fill(~pad_mask, neg)
    beta = torch.softmax(masked, dim=-1)
    return beta * pad_mask.to(beta.dtype)


def grid_attention(
    h: torch.Tensor,
    words: torch.Tensor,
    pad_mask: torch.Tensor,
    projection: nn.Module | None = None,
):
    """Patch-to-word attention over a feature map.

    h: (B, C, Hf, Wf) hidden features, one query per spatial cell
    words: (B, D, Ts) word vectors; projected to C channels if a projection
        is supplied, otherwise D must equal C
    returns (context map (B, C, Hf, Wf), beta (B, N, Ts)) with N = Hf*Wf
    """
    b, c, hf, wf = h.shape
    keys = projection(words.transpose(1, 2)).transpose(1, 2) if projection else words
    if keys.size(1) != c:
        raise ValueError("word vector size must match feature channels")
    queries = h.reshape(b, c, hf * wf).transpose(1, 2)          # (B, N, C)
    scores = torch.bmm(queries, keys)                           # (B, N, Ts)
    beta = masked_word_softmax(scores, pad_mask[:, None, :])
    context = torch.bmm(beta, keys.transpose(1, 2))             # (B, N, C)
    return context.transpose(1, 2).reshape(b, c, hf, wf), beta


def object_attention(
    label_queries: torch.Tensor,
    word_label_keys: torch.Tensor,
    word_values: torch.Tensor,
    pad_mask: torch.Tensor,
):
    """Label-to-word attention, independent of any image features.

    label_queries: (T, G) label embeddings of the scene objects
    word_label_keys: (G, Ts) label-space embeddings of the caption words
    word_values: (C, Ts) word vectors summed into per-object contexts
    returns (contexts (T, C), beta (T, Ts))
    """
    t = label_queries.size(0)
    if t == 0:
        empty = word_values.new_zeros((0, word_values.size(0)))
        return empty, label_queries.new_zeros((0, word_label_keys.size(1)))
    scores = label_queries @ word_label_keys                    # (T, Ts)
    beta = masked_word_softmax(scores, pad_mask[None, :])
    return beta @ word_values.transpose(0, 1), beta


def distribute_vectors(vectors: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Broadcast each object's vector over its mask and max-pool across objects.

    vectors: (T, C); masks: (T, H, W) in [0, 1]
    returns (C, H, W); exactly zero wherever no mask has support. Ties in the
    max route gradient to the lowest object index.
    """
    t = vectors.size(0)
    if masks.size(0) != t:
        raise ValueError("one mask per object required")
    h, w = masks.shape[-2:]
    if t == 0:
        return vectors.new_zeros((vectors.size(1) if vectors.dim() == 2 else 0, h, w))
    best = masks[0][None] * vectors[0][:, None, None]
    for i in range(1, t):
        candidate = masks[i][None] * vectors[i][:, None, None]
        best = torch.where(candidate > best, candidate, best)
    return best


class GridAttention(nn.Module):
    """Grid attention with a learned projection bridging word and feature dims."""

    def __init__(self, word_dim: int, channels: int):
        super().__init__()
        self.project = nn.Linear(word_dim, channels, bias=False)

    def forward(self, h, words, pad_mask):
        return grid_attention(h, words, pad_mask, projection=self.project)


class ObjectAttention(nn.Module):
    """Object attention plus the projection of word vectors into the generator
    channel space for the per-object context vectors."""

    def __init__(self, word_dim: int, channels: int):
        super().__init__()
        self.project = nn.Linear(word_dim, channels, bias=False)

    def forward(self, label_queries, word_label_keys, words, pad_mask):
        values = self.project(words.transpose(0, 1)).transpose(0, 1)
        return object_attention(label_queries, word_label_keys, values, pad_mask)
