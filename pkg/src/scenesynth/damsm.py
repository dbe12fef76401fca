"""Image-text matching: region features, word-region attention, relevance,
the four-part matching loss, retrieval precision, and a feature-space
Fréchet distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .text import TextEncoding


@dataclass
class DamsmConfig:
    gamma1: float = 5.0
    gamma2: float = 5.0
    gamma3: float = 10.0

    def __post_init__(self):
        if min(self.gamma1, self.gamma2, self.gamma3) <= 0:
            raise ValueError("all gamma factors must be positive")


@dataclass
class RegionFeatures:
    """Projected local/global image features plus the raw pre-projection ones."""

    local: torch.Tensor        # (B, D, R)
    global_: torch.Tensor      # (B, D)
    raw_local: torch.Tensor    # (B, C_local, R)
    raw_global: torch.Tensor   # (B, C_global)


def _down_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=2, padding=1),
        nn.BatchNorm2d(cout),
        nn.LeakyReLU(0.2, inplace=True),
    )


class ImageEncoder(nn.Module):
    """Small CNN producing a grid of local region features and a global vector,
    both projected into the shared text-image space.

    Local features are tapped after three stride-2 blocks (total stride 8);
    a fourth block plus average pooling yields the global feature.
    """

    local_stride = 8

    def __init__(self, out_dim: int, base_channels: int = 32):
        super().__init__()
        c = base_channels
        self.block1 = _down_block(3, c)
        self.block2 = _down_block(c, 2 * c)
        self.block3 = _down_block(2 * c, 4 * c)
        self.block4 = _down_block(4 * c, 8 * c)
        self.local_channels = 4 * c
        self.global_channels = 8 * c
        self.proj_local = nn.Linear(self.local_channels, out_dim, bias=False)
        self.proj_global = nn.Linear(self.global_channels, out_dim, bias=False)

    def forward(self, images: torch.Tensor) -> RegionFeatures:
        if images.dim() != 4 or images.size(1) != 3:
            raise ValueError("expected (B, 3, H, W) images")
        if images.size(2) != images.size(3):
            raise ValueError("expected square images")
        if images.size(2) % self.local_stride != 0:
            raise ValueError(f"image side must be divisible by {self.local_stride}")
        x = self.block3(self.block2(self.block1(images)))
        b, c, hf, wf = x.shape
        raw_local = x.reshape(b, c, hf * wf)
        raw_global = self.block4(x).mean(dim=(2, 3))
        local = self.proj_local(raw_local.transpose(1, 2)).transpose(1, 2)
        global_ = self.proj_global(raw_global)
        return RegionFeatures(local, global_, raw_local, raw_global)


def similarity_normalized(words: torch.Tensor, regions: torch.Tensor,
                          pad_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Word-region similarity, softmax-normalized over words per region.

    words: (D, Ts); regions: (D, R); returns (Ts, R) whose columns sum to 1
    over the unpadded words.
    """
    if words.size(0) != regions.size(0):
        raise ValueError("word and region feature dims differ")
    scores = words.transpose(0, 1) @ regions                    # (Ts, R)
    if pad_mask is not None:
        neg = torch.finfo(scores.dtype).min
        scores = scores.masked_fill(~pad_mask[:, None], neg)
    s_norm = torch.softmax(scores, dim=0)
    if pad_mask is not None:
        s_norm = s_norm * pad_mask[:, None].to(s_norm.dtype)
    return s_norm


def word_context(s_norm: torch.Tensor, regions: torch.Tensor, gamma1: float) -> torch.Tensor:
    """Per-word context vectors: region features weighted by the sharpened
    attention over regions. Returns (D, Ts)."""
    alpha = torch.softmax(gamma1 * s_norm, dim=1)               # (Ts, R)
    return regions @ alpha.transpose(0, 1)


def relevance(contexts: torch.Tensor, words: torch.Tensor, gamma2: float,
              pad_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Image-sentence relevance: smooth maximum of per-word cosine matches.

    contexts, words: (D, Ts). Equals (1/gamma2) * logsumexp(gamma2 * cos_i).
    """
    if pad_mask is not None:
        contexts = contexts[:, pad_mask]
        words = words[:, pad_mask]
    cnorm = contexts.norm(dim=0)
    wnorm = words.norm(dim=0)
    if bool((cnorm == 0).any()) or bool((wnorm == 0).any()):
        raise ValueError("zero-norm column; cosine similarity undefined")
    cos = (contexts * words).sum(dim=0) / (cnorm * wnorm)
    return torch.logsumexp(gamma2 * cos, dim=0) / gamma2


def pair_posterior_losses(scores: torch.Tensor, gamma3: float):
    """Two cross-entropy terms from a square image-by-text score matrix whose
    diagonal holds the matching pairs. Returns (text-given-image, image-given-text)."""
    m = scores.size(0)
    if m == 0:
        raise ValueError("empty batch")
    target = torch.arange(m, device=scores.device)
    logits = gamma3 * scores
    l1 = nn.functional.cross_entropy(logits, target, reduction="sum")
    l2 = nn.functional.cross_entropy(logits.transpose(0, 1), target, reduction="sum")
    return l1, l2


def word_score_matrix(features: RegionFeatures, enc: TextEncoding, cfg: DamsmConfig) -> torch.Tensor:
    """Relevance of every image in the batch against every caption."""
    m = features.local.size(0)
    rows = []
    for i in range(m):
        row = []
        for j in range(m):
            mask = enc.pad_mask[j]
            s_norm = similarity_normalized(
                enc.word_vectors[j], features.local[i], pad_mask=mask
            )
            ctx = word_context(s_norm, features.local[i], cfg.gamma1)
            row.append(relevance(ctx, enc.word_vectors[j], cfg.gamma2, pad_mask=mask))
        rows.append(torch.stack(row))
    return torch.stack(rows)


def sentence_score_matrix(features: RegionFeatures, enc: TextEncoding) -> torch.Tensor:
    v = nn.functional.normalize(features.global_, dim=1)
    e = nn.functional.normalize(enc.sentence_vector, dim=1)
    return v @ e.transpose(0, 1)


def damsm_loss(features: RegionFeatures, enc: TextEncoding, cfg: DamsmConfig):
    """Total matching loss and its four components.

    Captions pair only with their own image (diagonal matches). Returns
    (total, dict of components).
    """
    if features.local.size(0) != enc.word_vectors.size(0):
        raise ValueError("batch sizes differ between images and captions")
    w_scores = word_score_matrix(features, enc, cfg)
    s_scores = sentence_score_matrix(features, enc)
    l1w, l2w = pair_posterior_losses(w_scores, cfg.gamma3)
    l1s, l2s = pair_posterior_losses(s_scores, cfg.gamma3)
    total = l1w + l2w + l1s + l2s
    return total, {"l1_w": l1w, "l2_w": l2w, "l1_s": l1s, "l2_s": l2s}


def r_precision(
    image_global: torch.Tensor,
    true_sentence: torch.Tensor,
    distractor_sentences: torch.Tensor,
    candidate_keys: list[list] | None = None,
) -> float:
    """Fraction of queries whose true caption outranks all distractors by
    cosine similarity of global features.

    image_global: (Q, D); true_sentence: (Q, D);
    distractor_sentences: (Q, N, D). Ties favor the true caption.
    """
    q, n = distractor_sentences.shape[:2]
    if true_sentence.size(0) != q or image_global.size(0) != q:
        raise ValueError("query count mismatch")
    if candidate_keys is not None:
        for keys in candidate_keys:
            if len(set(map(tuple, keys))) != len(keys):
                raise ValueError("duplicate captions among candidates")
    img = nn.functional.normalize(image_global, dim=1)
    truth = nn.functional.normalize(true_sentence, dim=1)
    distract = nn.functional.normalize(distractor_sentences, dim=2)
    true_score = (img * truth).sum(dim=1)                       # (Q,)
    distract_score = torch.einsum("qd,qnd->qn", img, distract)  # (Q, N)
    wins = (distract_score <= true_score[:, None]).all(dim=1)
    return float(wins.to(torch.float64).mean())


def frechet_feature_distance(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Squared mean distance plus covariance term between two feature sets.

    ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}), with the matrix square
    root taken through eigendecompositions of symmetrized products; tiny
    negative eigenvalues are clamped to zero.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("expected (samples, dim) arrays")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least 2 samples per set")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    dim = cov_a.shape[0]
    if a.shape[0] <= dim or b.shape[0] <= dim:
        eye = np.eye(dim)
        cov_a = cov_a + 1e-6 * eye
        cov_b = cov_b + 1e-6 * eye
    return frechet_from_moments(mu_a, cov_a, mu_b, cov_b)


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    root_a = _sym_sqrt(np.asarray(cov_a, dtype=np.float64))
    cross = _sym_sqrt(root_a @ np.asarray(cov_b, dtype=np.float64) @ root_a)
    mean_term = float(np.sum((np.asarray(mu_a) - np.asarray(mu_b)) ** 2))
    cov_term = float(np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return mean_term + cov_term


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T
