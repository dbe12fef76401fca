"""Central finite-difference verification of the differentiable operators,
runnable from the command line and from the test suite.

Every check builds a tiny double-precision problem, compares the autograd
gradient of a scalar readout against central differences, and reports the
relative error.
"""

from __future__ import annotations

import torch

from .attention import distribute_vectors, grid_attention, object_attention
from .boxes import BoxStepParams, GmmParams, gmm_nll
from .damsm import relevance
from .discriminators import RoiSpec, roi_align
from .generator import GenConfig, ImageGenerator, Layout
from .text import CondAugment, LabelEmbeddings, TextEncoding, WordLabelEmbeddings

TOLERANCE = 1e-4


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


def fd_gradient(fn, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central differences of a scalar function w.r.t. every entry of x."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + eps
        hi = float(fn())
        flat[i] = orig - eps
        lo = float(fn())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def _autograd_vs_fd(fn, x: torch.Tensor) -> float:
    x.requires_grad_(True)
    out = fn()
    (grad,) = torch.autograd.grad(out, x)
    x.requires_grad_(False)
    with torch.no_grad():
        fd = fd_gradient(fn, x)
    return rel_err(grad, fd)


def check_roi_align() -> float:
    gen = torch.Generator().manual_seed(0)
    features = torch.randn(2, 6, 6, generator=gen, dtype=torch.float64)
    readout = torch.randn(2, 5, 5, generator=gen, dtype=torch.float64)
    spec = RoiSpec((0.2, 0.1, 0.5, 0.6), bins=5, sampling=2)
    return _autograd_vs_fd(lambda: (roi_align(features, spec) * readout).sum(), features)


def check_distribute() -> float:
    gen = torch.Generator().manual_seed(1)
    vectors = torch.randn(3, 4, generator=gen, dtype=torch.float64)
    masks = (torch.rand(3, 5, 5, generator=gen, dtype=torch.float64) > 0.4).double()
    masks = masks * torch.rand(3, 5, 5, generator=gen, dtype=torch.float64)
    readout = torch.randn(4, 5, 5, generator=gen, dtype=torch.float64)
    return _autograd_vs_fd(
        lambda: (distribute_vectors(vectors, masks) * readout).sum(), vectors
    )


def check_gmm_nll() -> float:
    gen = torch.Generator().manual_seed(2)
    mu = torch.randn(3, 2, generator=gen, dtype=torch.float64) * 0.3 + 0.5

    def build():
        pi = torch.softmax(torch.tensor([0.2, -0.1, 0.4], dtype=torch.float64), dim=0)
        sigma = torch.full((3, 2), 0.25, dtype=torch.float64)
        rho = torch.tensor([0.3, -0.2, 0.1], dtype=torch.float64)
        step = BoxStepParams(
            label_logits=torch.tensor([1.0, 0.5, -0.3], dtype=torch.float64),
            xy=GmmParams(pi, mu, sigma, rho),
            wh=GmmParams(pi, mu + 0.05, sigma, rho),
        )
        return gmm_nll(step, (1, 0.4, 0.5, 0.3, 0.35))

    return _autograd_vs_fd(build, mu)


def check_grid_attention() -> float:
    gen = torch.Generator().manual_seed(3)
    h = torch.randn(1, 4, 3, 3, generator=gen, dtype=torch.float64)
    words = torch.randn(1, 4, 5, generator=gen, dtype=torch.float64)
    pad = torch.tensor([[True, True, True, True, False]])
    readout = torch.randn(1, 4, 3, 3, generator=gen, dtype=torch.float64)

    def fn():
        ctx, _ = grid_attention(h, words, pad)
        return (ctx * readout).sum()

    return max(_autograd_vs_fd(fn, h), _autograd_vs_fd(fn, words))


def check_object_attention() -> float:
    gen = torch.Generator().manual_seed(4)
    queries = torch.randn(2, 3, generator=gen, dtype=torch.float64)
    keys = torch.randn(3, 4, generator=gen, dtype=torch.float64)
    values = torch.randn(5, 4, generator=gen, dtype=torch.float64)
    pad = torch.tensor([True, True, True, False])
    readout = torch.randn(2, 5, generator=gen, dtype=torch.float64)

    def fn():
        ctx, _ = object_attention(queries, keys, values, pad)
        return (ctx * readout).sum()

    return max(_autograd_vs_fd(fn, queries), _autograd_vs_fd(fn, values))


def check_relevance() -> float:
    gen = torch.Generator().manual_seed(5)
    contexts = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    words = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    return _autograd_vs_fd(lambda: relevance(contexts, words, gamma2=5.0), contexts)


def check_end_to_end_generator() -> float:
    """Directional finite differences through the full cascade, against the
    autograd gradient for noise, word, and label embedding inputs."""
    torch.manual_seed(6)
    cfg = GenConfig(
        base_channels=4, label_dim=6, cond_dim=8, noise_dim=5,
        num_classes=3, word_dim=6, base_resolution=8, residual_counts=(1, 1, 1),
    )
    gen = ImageGenerator(cfg).double().eval()
    cond_aug = CondAugment(6, 8).double()
    label_emb = LabelEmbeddings(3, 6).double()
    word_emb = WordLabelEmbeddings(7, 6).double()
    word_ids = torch.tensor([[3, 4, 2]])
    enc = TextEncoding(
        word_vectors=torch.randn(1, 6, 3, dtype=torch.float64),
        sentence_vector=torch.randn(1, 6, dtype=torch.float64),
        pad_mask=torch.tensor([[True, True, True]]),
    )
    masks = torch.zeros(2, 32, 32, dtype=torch.float64)
    masks[0, 4:14, 6:16] = 1.0
    masks[1, 16:30, 14:28] = 1.0
    layout = Layout(
        labels=torch.tensor([0, 2]),
        boxes=torch.tensor([[0.2, 0.1, 0.3, 0.3], [0.4, 0.5, 0.45, 0.4]], dtype=torch.float64),
        masks=masks,
    )
    z = torch.randn(1, 5, dtype=torch.float64)
    readout = torch.randn(1, 3, 32, 32, dtype=torch.float64)

    def fn():
        cond = cond_aug(enc.sentence_vector)
        states, _ = gen(enc, [layout], z, cond, label_emb, word_emb, word_ids)
        return (states[-1].image * readout).sum()

    targets = [z, enc.word_vectors, label_emb.table.weight]
    worst = 0.0
    eps = 1e-5
    for tensor in targets:
        tensor.requires_grad_(True)
        out = fn()
        (grad,) = torch.autograd.grad(out, tensor)
        tensor.requires_grad_(False)
        direction = torch.randn_like(tensor)
        direction = direction / direction.norm()
        with torch.no_grad():
            tensor.add_(eps * direction)
            hi = float(fn())
            tensor.add_(-2 * eps * direction)
            lo = float(fn())
            tensor.add_(eps * direction)
        fd_dir = (hi - lo) / (2 * eps)
        ad_dir = float((grad * direction).sum())
        denom = max(abs(fd_dir), abs(ad_dir), 1e-12)
        worst = max(worst, abs(fd_dir - ad_dir) / denom)
    return worst


ALL_CHECKS = (
    ("roi_align", check_roi_align),
    ("distribute_contexts", check_distribute),
    ("gmm_nll", check_gmm_nll),
    ("grid_attention", check_grid_attention),
    ("object_attention", check_object_attention),
    ("relevance", check_relevance),
    ("end_to_end_generator", check_end_to_end_generator),
)


def run_all() -> list[tuple[str, float]]:
    return [(name, fn()) for name, fn in ALL_CHECKS]
