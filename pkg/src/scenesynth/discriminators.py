"""Patch-wise, shape, and object-wise discriminators, the region pooling they
share, and the optional spectral-normalized projection variants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

_PROB_EPS = 1e-6


@dataclass
class RoiSpec:
    box: tuple[float, float, float, float]   # normalized (x, y, w, h)
    bins: int = 5
    sampling: int = 2

    def __post_init__(self):
        x, y, w, h = self.box
        if self.bins < 1 or self.sampling < 1:
            raise ValueError("bins and sampling must be >= 1")
        if w <= 0 or h <= 0:
            raise ValueError("degenerate box")
        if x < 0 or y < 0 or x + w > 1 + 1e-9 or y + h > 1 + 1e-9:
            raise ValueError("box must lie inside the image")


def _bilinear_sample(features: torch.Tensor, xs: torch.Tensor, ys: torch.Tensor):
    """Sample (C, H, W) features at continuous positions, treating values as
    located at pixel centers and clamping at the border."""
    _, h, w = features.shape
    u = (xs - 0.5).clamp(0.0, w - 1.0)
    v = (ys - 0.5).clamp(0.0, h - 1.0)
    x0 = u.floor().long().clamp(0, w - 1)
    y0 = v.floor().long().clamp(0, h - 1)
    x1 = (x0 + 1).clamp(0, w - 1)
    y1 = (y0 + 1).clamp(0, h - 1)
    fx = (u - x0.to(u.dtype)).clamp(0.0, 1.0)
    fy = (v - y0.to(v.dtype)).clamp(0.0, 1.0)
    f00 = features[:, y0, x0]
    f01 = features[:, y0, x1]
    f10 = features[:, y1, x0]
    f11 = features[:, y1, x1]
    top = f00 * (1 - fx) + f01 * fx
    bot = f10 * (1 - fx) + f11 * fx
    return top * (1 - fy) + bot * fy


def roi_align(features: torch.Tensor, spec: RoiSpec) -> torch.Tensor:
    """Average of regular bilinear samples per bin over the region.

    features: (C, H, W); returns (C, bins, bins). With `sampling` s, each bin
    averages s*s samples placed on a regular grid inside the bin.
    """
    c, h, w = features.shape
    x, y, bw, bh = spec.box
    x0, y0 = x * w, y * h
    bin_w = bw * w / spec.bins
    bin_h = bh * h / spec.bins
    s = spec.sampling
    offsets = (torch.arange(s, dtype=features.dtype, device=features.device) + 0.5) / s
    bx = torch.arange(spec.bins, dtype=features.dtype, device=features.device)
    sample_x = x0 + (bx[:, None] + offsets[None, :]) * bin_w     # (bins, s)
    sample_y = y0 + (bx[:, None] + offsets[None, :]) * bin_h
    gx = sample_x[None, :, None, :].expand(spec.bins, spec.bins, s, s).reshape(-1)
    gy = sample_y[:, None, :, None].expand(spec.bins, spec.bins, s, s).reshape(-1)
    vals = _bilinear_sample(features, gx, gy)                    # (C, bins*bins*s*s)
    vals = vals.reshape(c, spec.bins, spec.bins, s, s)
    return vals.mean(dim=(3, 4))


def route_objects(boxes, image_side: int):
    """Split object indices into (small, large): large when the box's longer
    side exceeds one third of the image, strictly."""
    small, large = [], []
    for i, (_, _, w, h) in enumerate(boxes):
        if max(w, h) * image_side > image_side / 3:
            large.append(i)
        else:
            small.append(i)
    return small, large


def spectral_normalize(weight: torch.Tensor, power_iters: int = 5) -> torch.Tensor:
    """Divide a weight by its leading singular value, estimated by power
    iteration on the 2D-reshaped matrix. A zero weight is returned unchanged."""
    mat = weight.reshape(weight.size(0), -1)
    if float(mat.detach().abs().max()) == 0.0:
        return weight
    gen = torch.Generator().manual_seed(0)
    u = torch.randn(mat.size(0), generator=gen, dtype=weight.dtype).to(weight.device)
    u = u / u.norm()
    for _ in range(power_iters):
        v = mat.transpose(0, 1).mv(u)
        v = v / v.norm().clamp_min(1e-12)
        u = mat.mv(v)
        u = u / u.norm().clamp_min(1e-12)
    sigma = torch.dot(u, mat.mv(v))
    return weight / sigma


class SNConv2d(nn.Conv2d):
    def forward(self, x):
        return self._conv_forward(x, spectral_normalize(self.weight), self.bias)


class SNLinear(nn.Linear):
    def forward(self, x):
        return nn.functional.linear(x, spectral_normalize(self.weight), self.bias)


def _num_down(in_res: int, feat_res: int) -> int:
    n = int(math.log2(in_res // feat_res))
    if feat_res * 2**n != in_res:
        raise ValueError(f"cannot reach {feat_res} from {in_res} by halving")
    return n


def _down_chain(cin: int, nd: int, steps: int, sn: bool = False) -> tuple[nn.Sequential, int]:
    """Stride-2 conv chain doubling channels (capped at 8*nd); the first block
    skips batch norm."""
    conv = SNConv2d if sn else nn.Conv2d
    layers: list[nn.Module] = []
    ch = cin
    for i in range(steps):
        cout = min(nd * 2**i, 8 * nd)
        layers.append(conv(ch, cout, 4, stride=2, padding=1))
        if i > 0 and not sn:
            layers.append(nn.BatchNorm2d(cout))
        layers.append(nn.LeakyReLU(0.2, inplace=True))
        ch = cout
    return nn.Sequential(*layers), ch


class Outlogits(nn.Module):
    """Stride-2 4x4 conv to one channel, then sigmoid."""

    def __init__(self, cin: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, 1, 4, stride=2, padding=0)

    def forward(self, x):
        return torch.sigmoid(self.conv(x))[:, 0].clamp(_PROB_EPS, 1 - _PROB_EPS)


def _cond_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=1, padding=1),
        nn.BatchNorm2d(cout),
        nn.LeakyReLU(0.2, inplace=True),
    )


class PatchDiscriminator(nn.Module):
    """Per-patch real/fake and text-consistency probabilities for one stage."""

    def __init__(self, in_res: int, feat_res: int, nd: int, cond_dim: int):
        super().__init__()
        self.feat_res = feat_res
        self.encode, ch = _down_chain(3, nd, _num_down(in_res, feat_res))
        self.joint = _cond_block(ch + cond_dim, ch)
        self.out_uncond = Outlogits(ch)
        self.out_cond = Outlogits(ch)

    def forward(self, x, cond):
        h = self.encode(x)
        rep = cond[:, :, None, None].expand(-1, -1, h.size(2), h.size(3))
        he = self.joint(torch.cat([h, rep], dim=1))
        return self.out_uncond(h), self.out_cond(he)


class ShapeStageDiscriminator(nn.Module):
    """Per-patch image/shape consistency probability for one stage."""

    def __init__(self, in_res: int, feat_res: int, nd: int, num_classes: int):
        super().__init__()
        enc_ch = max(nd // 8, 1)
        self.shape_encode = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(num_classes, enc_ch, 3),
            nn.InstanceNorm2d(enc_ch),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.encode, ch = _down_chain(3 + enc_ch, nd, _num_down(in_res, feat_res))
        self.out = Outlogits(ch)

    def forward(self, x, class_masks):
        if x.shape[-2:] != class_masks.shape[-2:]:
            raise ValueError("image and mask resolutions differ")
        h = self.encode(torch.cat([x, self.shape_encode(class_masks)], dim=1))
        return self.out(h)


class _ObjectTower(nn.Module):
    """Shared trunk of one object-wise tower: shape-aware image encoding, then
    region pooling and the two per-object heads."""

    def __init__(self, nd: int, num_classes: int, label_dim: int, ctx_dim: int,
                 downs: int, roi_bins: int, roi_sampling: int, interpolate: bool):
        super().__init__()
        self.interpolate = interpolate
        self.roi_bins = roi_bins
        self.roi_sampling = roi_sampling
        enc_ch = max(nd // 8, 1)
        self.shape_encode = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(num_classes, enc_ch, 3),
            nn.InstanceNorm2d(enc_ch),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.encode, ch = _down_chain(3 + enc_ch, nd, downs)
        self.roi_encoder = nn.Sequential(
            nn.Conv2d(ch, 4 * nd, 4, stride=1, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.joint = _cond_block(4 * nd + label_dim + ctx_dim, 4 * nd)
        self.out_uncond = Outlogits(4 * nd)
        self.out_cond = Outlogits(4 * nd)

    def features(self, x, class_masks):
        if self.interpolate:
            x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
            class_masks = nn.functional.interpolate(class_masks, scale_factor=2, mode="nearest")
        return self.encode(torch.cat([x, self.shape_encode(class_masks)], dim=1))

    def verdicts(self, fmap, boxes, label_emb, ctx):
        """fmap: (C, Hf, Wf) for one sample; boxes: list of normalized boxes;
        label_emb/ctx: (T, dim). Returns per-object (p_un, p_con)."""
        rois = torch.stack(
            [
                roi_align(fmap, RoiSpec(box, self.roi_bins, self.roi_sampling))
                for box in boxes
            ]
        )
        h = self.roi_encoder(rois)
        rep = torch.cat([label_emb, ctx], dim=1)[:, :, None, None].expand(
            -1, -1, h.size(2), h.size(3)
        )
        hc = self.joint(torch.cat([h, rep], dim=1))
        p_un = self.out_uncond(h).reshape(-1)
        p_con = self.out_cond(hc).reshape(-1)
        return p_un, p_con


class ObjectDiscriminator(nn.Module):
    """Object-wise discriminator with separate towers for small and large
    boxes, applied at the final stage only."""

    def __init__(self, image_size: int, nd: int, num_classes: int, label_dim: int,
                 ctx_dim: int, roi_bins: int = 5, roi_sampling: int = 2,
                 interpolate: bool = False):
        super().__init__()
        self.image_size = image_size
        in_res = image_size * (2 if interpolate else 1)
        self.small = _ObjectTower(
            nd, num_classes, label_dim, ctx_dim,
            _num_down(in_res, image_size // 4), roi_bins, roi_sampling, interpolate,
        )
        self.large = _ObjectTower(
            nd, num_classes, label_dim, ctx_dim,
            _num_down(in_res, image_size // 8), roi_bins, roi_sampling, interpolate,
        )

    def forward(self, x, class_masks, boxes_per_sample, label_embs, ctxs):
        """x: (B, 3, S, S); boxes_per_sample: list of per-sample box lists;
        label_embs/ctxs: per-sample (T, dim) tensors. Returns flattened
        per-object (p_un, p_con) in sample-then-object order."""
        small_fmap = self.small.features(x, class_masks)
        large_fmap = self.large.features(x, class_masks)
        p_un_all, p_con_all = [], []
        for i, boxes in enumerate(boxes_per_sample):
            t = len(boxes)
            if t == 0:
                continue
            small_idx, large_idx = route_objects(boxes, self.image_size)
            p_un = x.new_zeros(t)
            p_con = x.new_zeros(t)
            for tower, idx in ((self.small, small_idx), (self.large, large_idx)):
                if not idx:
                    continue
                fmap = small_fmap[i] if tower is self.small else large_fmap[i]
                pu, pc = tower.verdicts(
                    fmap,
                    [boxes[j] for j in idx],
                    label_embs[i][idx],
                    ctxs[i][idx],
                )
                p_un = p_un.index_put((torch.tensor(idx),), pu)
                p_con = p_con.index_put((torch.tensor(idx),), pc)
            p_un_all.append(p_un)
            p_con_all.append(p_con)
        if not p_un_all:
            empty = x.new_zeros(0)
            return empty, empty
        return torch.cat(p_un_all), torch.cat(p_con_all)


# ---------------------------------------------------------------------------
# spectral-normalized projection variants
# ---------------------------------------------------------------------------


def _sn_shape_encode(num_classes: int, enc_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.ReflectionPad2d(1),
        SNConv2d(num_classes, enc_ch, 3),
        nn.InstanceNorm2d(enc_ch),
        nn.LeakyReLU(0.2, inplace=True),
    )


class SNPatchDiscriminator(nn.Module):
    """Projection form: the conditional logit is the unconditional logit plus
    a pooled inner product between features and the projected condition."""

    def __init__(self, in_res: int, feat_res: int, nd: int, cond_dim: int):
        super().__init__()
        self.encode, ch = _down_chain(3, nd, _num_down(in_res, feat_res), sn=True)
        self.to_grid = SNConv2d(ch, ch, 4, stride=2, padding=0)
        self.project = SNLinear(cond_dim, ch)
        self.out_uncond = SNConv2d(ch, 1, 1)

    def logits(self, x, cond):
        h = self.to_grid(self.encode(x))                         # (B, C, g, g)
        c = self.project(cond)[:, :, None, None]
        hc = (h * c).mean(dim=1)                                 # (B, g, g)
        lo_un = self.out_uncond(h)[:, 0]
        return lo_un, lo_un + hc

    def forward(self, x, cond):
        lo_un, lo_con = self.logits(x, cond)
        return (
            torch.sigmoid(lo_un).clamp(_PROB_EPS, 1 - _PROB_EPS),
            torch.sigmoid(lo_con).clamp(_PROB_EPS, 1 - _PROB_EPS),
        )


class SNShapeStageDiscriminator(nn.Module):
    def __init__(self, in_res: int, feat_res: int, nd: int, num_classes: int):
        super().__init__()
        enc_ch = max(nd // 8, 1)
        self.shape_encode = _sn_shape_encode(num_classes, enc_ch)
        self.encode, ch = _down_chain(3 + enc_ch, nd, _num_down(in_res, feat_res), sn=True)
        self.to_grid = SNConv2d(ch, ch, 4, stride=2, padding=0)
        self.out = SNConv2d(ch, 1, 1)

    def forward(self, x, class_masks):
        if x.shape[-2:] != class_masks.shape[-2:]:
            raise ValueError("image and mask resolutions differ")
        h = self.to_grid(self.encode(torch.cat([x, self.shape_encode(class_masks)], dim=1)))
        return torch.sigmoid(self.out(h)[:, 0]).clamp(_PROB_EPS, 1 - _PROB_EPS)


class _SNObjectTower(nn.Module):
    def __init__(self, nd: int, num_classes: int, label_dim: int, ctx_dim: int,
                 downs: int, roi_bins: int, roi_sampling: int, interpolate: bool):
        super().__init__()
        self.interpolate = interpolate
        self.roi_bins = roi_bins
        self.roi_sampling = roi_sampling
        enc_ch = max(nd // 8, 1)
        self.shape_encode = _sn_shape_encode(num_classes, enc_ch)
        self.encode, ch = _down_chain(3 + enc_ch, nd, downs, sn=True)
        self.roi_encoder = nn.Sequential(
            SNConv2d(ch, 4 * nd, 4, stride=1, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.to_vec = SNConv2d(4 * nd, 4 * nd, 4, stride=2, padding=0)
        self.project = SNLinear(label_dim + ctx_dim, 4 * nd)
        self.out_uncond = SNLinear(4 * nd, 1)

    def features(self, x, class_masks):
        if self.interpolate:
            x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
            class_masks = nn.functional.interpolate(class_masks, scale_factor=2, mode="nearest")
        return self.encode(torch.cat([x, self.shape_encode(class_masks)], dim=1))

    def logits(self, fmap, boxes, label_emb, ctx):
        rois = torch.stack(
            [
                roi_align(fmap, RoiSpec(box, self.roi_bins, self.roi_sampling))
                for box in boxes
            ]
        )
        h = self.to_vec(self.roi_encoder(rois)).reshape(len(boxes), -1)
        c = self.project(torch.cat([ctx, label_emb], dim=1))
        hc = (h * c).mean(dim=1)
        lo_un = self.out_uncond(h)[:, 0]
        return lo_un, lo_un + hc

    def verdicts(self, fmap, boxes, label_emb, ctx):
        lo_un, lo_con = self.logits(fmap, boxes, label_emb, ctx)
        return (
            torch.sigmoid(lo_un).clamp(_PROB_EPS, 1 - _PROB_EPS),
            torch.sigmoid(lo_con).clamp(_PROB_EPS, 1 - _PROB_EPS),
        )


class SNObjectDiscriminator(ObjectDiscriminator):
    def __init__(self, image_size: int, nd: int, num_classes: int, label_dim: int,
                 ctx_dim: int, roi_bins: int = 5, roi_sampling: int = 2,
                 interpolate: bool = False):
        nn.Module.__init__(self)
        self.image_size = image_size
        in_res = image_size * (2 if interpolate else 1)
        self.small = _SNObjectTower(
            nd, num_classes, label_dim, ctx_dim,
            _num_down(in_res, image_size // 4), roi_bins, roi_sampling, interpolate,
        )
        self.large = _SNObjectTower(
            nd, num_classes, label_dim, ctx_dim,
            _num_down(in_res, image_size // 8), roi_bins, roi_sampling, interpolate,
        )
