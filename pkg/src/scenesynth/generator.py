"""Multi-stage image generator: a base stage seeded from noise and the
conditioned sentence vector, then refiners that double resolution while
mixing in grid attention, shape encodings, and the object/label context maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .attention import GridAttention, ObjectAttention, distribute_vectors
from .text import TextEncoding


@dataclass
class GenConfig:
    base_channels: int = 16            # N_g
    label_dim: int = 50                # N_l
    cond_dim: int = 128                # N_e
    noise_dim: int = 32
    num_classes: int = 36
    word_dim: int = 128                # D
    base_resolution: int = 16
    residual_counts: tuple[int, int, int] = (3, 2, 2)

    def __post_init__(self):
        if min(self.residual_counts) < 1 or self.base_channels < 1:
            raise ValueError("all block counts must be >= 1")
        if self.base_resolution % 8 != 0 or self.base_resolution < 8:
            raise ValueError("base resolution must be a positive multiple of 8")

    @property
    def stage_resolutions(self) -> tuple[int, int, int]:
        b = self.base_resolution
        return (b, 2 * b, 4 * b)


@dataclass
class StageState:
    hidden: torch.Tensor   # (B, N_g, R, R)
    image: torch.Tensor    # (B, 3, R, R) in [-1, 1]


@dataclass
class Layout:
    """One scene's objects: labels (T,), normalized boxes (T, 4), and soft
    masks (T, S, S) at the full mask resolution."""

    labels: torch.Tensor
    boxes: torch.Tensor
    masks: torch.Tensor

    @property
    def count(self) -> int:
        return int(self.labels.numel())


def up_block(cin: int, cout: int) -> nn.Sequential:
    """Nearest-neighbor upsample, conv, batch norm, gated linear unit."""
    return nn.Sequential(
        nn.Upsample(scale_factor=2, mode="nearest"),
        nn.Conv2d(cin, 2 * cout, 3, stride=1, padding=1),
        nn.BatchNorm2d(2 * cout),
        nn.GLU(dim=1),
    )


def down_block_g(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=2, padding=1),
        nn.BatchNorm2d(cout),
        nn.LeakyReLU(0.2, inplace=True),
    )


class ResidualBlock(nn.Module):
    """Reflection-padded residual block with a gated unit and instance norm."""

    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, 2 * channels, 3),
            nn.InstanceNorm2d(2 * channels),
            nn.GLU(dim=1),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class ShapePath(nn.Module):
    """Shape encoder followed by a downsample: class-mask tensors at the stage
    resolution become feature maps at the trunk (half) resolution."""

    def __init__(self, num_classes: int, base_channels: int):
        super().__init__()
        half = max(base_channels // 2, 1)
        self.encode = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(num_classes, half, 3),
            nn.InstanceNorm2d(half),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.down = down_block_g(half, base_channels)
        self.num_classes = num_classes

    def forward(self, class_masks: torch.Tensor) -> torch.Tensor:
        if class_masks.size(1) != self.num_classes:
            raise ValueError("class-mask channel count mismatch")
        return self.down(self.encode(class_masks))


class BaseStage(nn.Module):
    """Noise and sentence conditioning to the first image."""

    def __init__(self, cfg: GenConfig):
        super().__init__()
        ng, nl = cfg.base_channels, cfg.label_dim
        # two upsamples lift the fc seed to the trunk (half the stage output)
        seed = cfg.base_resolution // 8
        self.seed = seed
        self.fc = nn.Sequential(
            nn.Linear(cfg.noise_dim + cfg.cond_dim, seed * seed * 4 * ng * 2),
            nn.BatchNorm1d(seed * seed * 4 * ng * 2),
            nn.GLU(dim=1),
        )
        self.up1 = up_block(4 * ng, 2 * ng)
        self.up2 = up_block(2 * ng, ng)
        self.shape_path = ShapePath(cfg.num_classes, ng)
        trunk = 3 * ng + nl
        self.residuals = nn.Sequential(*[ResidualBlock(trunk) for _ in range(cfg.residual_counts[0])])
        self.up_out = up_block(trunk, ng)
        self.to_image = nn.Sequential(nn.Conv2d(ng, 3, 3, padding=1), nn.Tanh())

    def forward(self, z, cond, class_masks, c_obj_map, c_lab_map) -> StageState:
        b = z.size(0)
        x = self.fc(torch.cat([z, cond], dim=1))
        x = x.reshape(b, -1, self.seed, self.seed)
        c = self.up2(self.up1(x))
        u = self.shape_path(class_masks)
        trunk = torch.cat([c, u, c_obj_map, c_lab_map], dim=1)
        trunk = self.residuals(trunk)
        hidden = self.up_out(trunk)
        return StageState(hidden, self.to_image(hidden))


class RefineStage(nn.Module):
    """Doubles resolution: sums the previous hidden with the shape encoding,
    concatenates grid attention and context maps, then refines."""

    def __init__(self, cfg: GenConfig, residual_count: int):
        super().__init__()
        ng, nl = cfg.base_channels, cfg.label_dim
        self.shape_path = ShapePath(cfg.num_classes, ng)
        self.grid_attention = GridAttention(cfg.word_dim, ng)
        trunk = 3 * ng + nl
        self.residuals = nn.Sequential(*[ResidualBlock(trunk) for _ in range(residual_count)])
        self.up_out = up_block(trunk, ng)
        self.to_image = nn.Sequential(nn.Conv2d(ng, 3, 3, padding=1), nn.Tanh())

    def forward(self, prev_hidden, words, pad_mask, class_masks, c_obj_map, c_lab_map):
        u = self.shape_path(class_masks)
        if u.shape != prev_hidden.shape:
            raise ValueError("shape encoding does not match the previous hidden map")
        summed = prev_hidden + u
        c_pat, beta = self.grid_attention(prev_hidden, words, pad_mask)
        trunk = torch.cat([c_pat, summed, c_obj_map, c_lab_map], dim=1)
        trunk = self.residuals(trunk)
        hidden = self.up_out(trunk)
        return StageState(hidden, self.to_image(hidden)), beta


class ImageGenerator(nn.Module):
    """Full cascade over three stages, plus the attention machinery shared with
    the object-wise discriminator."""

    def __init__(self, cfg: GenConfig):
        super().__init__()
        self.cfg = cfg
        self.base = BaseStage(cfg)
        self.refine1 = RefineStage(cfg, cfg.residual_counts[1])
        self.refine2 = RefineStage(cfg, cfg.residual_counts[2])
        self.object_attention = ObjectAttention(cfg.word_dim, cfg.base_channels)

    def context_maps(self, layout: Layout, label_emb: torch.Tensor,
                     contexts: torch.Tensor, resolution: int, dtype):
        """Distribute one sample's per-object contexts and label embeddings
        over its masks at one trunk resolution."""
        ng = self.cfg.base_channels
        if layout.count == 0:
            c_obj = torch.zeros(ng, resolution, resolution, dtype=dtype)
            c_lab = torch.zeros(self.cfg.label_dim, resolution, resolution, dtype=dtype)
            return c_obj, c_lab
        masks = _resize_masks(layout.masks, resolution).to(dtype)
        return distribute_vectors(contexts, masks), distribute_vectors(label_emb, masks)

    def forward(self, enc: TextEncoding, layouts: list[Layout], z: torch.Tensor,
                cond: torch.Tensor, label_embedder, word_label_embedder,
                word_ids: torch.Tensor):
        """Run all stages for a batch of scenes.

        Returns (list of StageState per stage, records dict with the attention
        weights and per-object context vectors).
        """
        cfg = self.cfg
        resolutions = cfg.stage_resolutions
        trunk_res = [r // 2 for r in resolutions]
        b = z.size(0)

        word_label_emb = word_label_embedder(word_ids)            # (B, Ts, G)
        obj_maps, lab_maps, contexts_per_sample, betas = [], [], [], []
        label_embs = []
        for i, layout in enumerate(layouts):
            label_emb = label_embedder(layout.labels)
            label_embs.append(label_emb)
            contexts, beta = self.object_attention(
                label_emb, word_label_emb[i].transpose(0, 1),
                enc.word_vectors[i], enc.pad_mask[i],
            )
            per_stage_obj, per_stage_lab = [], []
            for r in trunk_res:
                c_obj, c_lab = self.context_maps(layout, label_emb, contexts, r, z.dtype)
                per_stage_obj.append(c_obj)
                per_stage_lab.append(c_lab)
            obj_maps.append(per_stage_obj)
            lab_maps.append(per_stage_lab)
            contexts_per_sample.append(contexts)
            betas.append(beta)

        stage_states = []
        class_masks = [
            torch.stack([
                _class_masks(layouts[i], r, cfg.num_classes, z.dtype) for i in range(b)
            ])
            for r in resolutions
        ]
        c_obj_batched = [
            torch.stack([obj_maps[i][k] for i in range(b)]) for k in range(3)
        ]
        c_lab_batched = [
            torch.stack([lab_maps[i][k] for i in range(b)]) for k in range(3)
        ]

        state0 = self.base(z, cond, class_masks[0], c_obj_batched[0], c_lab_batched[0])
        state1, beta_pat1 = self.refine1(
            state0.hidden, enc.word_vectors, enc.pad_mask,
            class_masks[1], c_obj_batched[1], c_lab_batched[1],
        )
        state2, beta_pat2 = self.refine2(
            state1.hidden, enc.word_vectors, enc.pad_mask,
            class_masks[2], c_obj_batched[2], c_lab_batched[2],
        )
        records = {
            "beta_obj": betas,
            "beta_pat": [beta_pat1, beta_pat2],
            "object_contexts": contexts_per_sample,
            "label_embeddings": label_embs,
        }
        return [state0, state1, state2], records


def _resize_masks(masks: torch.Tensor, resolution: int) -> torch.Tensor:
    size = masks.size(-1)
    if size == resolution:
        return masks
    if size % resolution != 0:
        raise ValueError(f"cannot area-average {size} down to {resolution}")
    factor = size // resolution
    if masks.size(0) == 0:
        return masks.new_zeros(0, resolution, resolution)
    return nn.functional.avg_pool2d(masks[:, None], factor)[:, 0].clamp(0.0, 1.0)


def _class_masks(layout: Layout, resolution: int, num_classes: int, dtype) -> torch.Tensor:
    out = torch.zeros(num_classes, resolution, resolution, dtype=dtype)
    if layout.count == 0:
        return out
    masks = _resize_masks(layout.masks, resolution).to(dtype)
    for i in range(layout.count):
        lab = int(layout.labels[i])
        out[lab] = torch.maximum(out[lab], masks[i])
    return out
