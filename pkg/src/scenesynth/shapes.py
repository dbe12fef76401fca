"""Per-object soft mask generation inside given boxes, via a bidirectional
convolutional recurrent network trained adversarially with a fixed-extractor
feature constraint.
"""

from __future__ import annotations

import torch
from torch import nn

from .boxes import validate_box


def render_box_maps(boxes, height: int, width: int, labels=None, num_classes: int | None = None):
    """Rasterize boxes under the pixel-center rule.

    Returns (occupancy (T, H, W)), plus a one-hot label map (N_c, H, W) when
    labels and num_classes are given. A box that covers no pixel center is an
    error.
    """
    t = len(boxes)
    occ = torch.zeros(t, height, width)
    ys = (torch.arange(height, dtype=torch.float64) + 0.5) / height
    xs = (torch.arange(width, dtype=torch.float64) + 0.5) / width
    for i, box in enumerate(boxes):
        if not validate_box(box):
            raise ValueError(f"invalid box {box}")
        x, y, w, h = box
        inside = (
            (xs[None, :] >= x) & (xs[None, :] < x + w)
            & (ys[:, None] >= y) & (ys[:, None] < y + h)
        )
        if not bool(inside.any()):
            raise ValueError(f"box {box} rasterizes to zero area at {height}x{width}")
        occ[i] = inside.to(occ.dtype)
    if labels is None:
        return occ
    label_map = torch.zeros(num_classes, height, width)
    for i, lab in enumerate(labels):
        label_map[lab] = torch.maximum(label_map[lab], occ[i])
    return occ, label_map


def downsample_mask(mask: torch.Tensor, factor: int) -> torch.Tensor:
    """Exact area-average downsampling, clamped to [0, 1]."""
    if factor == 1:
        return mask
    squeeze = mask.dim() == 2
    m = mask[None] if squeeze else mask
    out = nn.functional.avg_pool2d(m[:, None], factor)[:, 0].clamp(0.0, 1.0)
    return out[0] if squeeze else out


def class_mask_tensor(masks: torch.Tensor, labels, num_classes: int) -> torch.Tensor:
    """Stack per-object masks into class channels (max where classes repeat)."""
    h, w = masks.shape[-2:]
    out = masks.new_zeros(num_classes, h, w)
    for i, lab in enumerate(labels):
        out[lab] = torch.maximum(out[lab], masks[i])
    return out


class ConvGRUCell(nn.Module):
    """Convolutional gated recurrent cell over spatial feature maps."""

    def __init__(self, in_channels: int, hidden_channels: int, kernel: int = 3):
        super().__init__()
        pad = kernel // 2
        self.hidden_channels = hidden_channels
        self.gates = nn.Conv2d(in_channels + hidden_channels, 2 * hidden_channels, kernel, padding=pad)
        self.cand = nn.Conv2d(in_channels + hidden_channels, hidden_channels, kernel, padding=pad)

    def forward(self, x, h):
        ru = torch.sigmoid(self.gates(torch.cat([x, h], dim=1)))
        r, u = ru.chunk(2, dim=1)
        cand = torch.tanh(self.cand(torch.cat([x, r * h], dim=1)))
        return (1.0 - u) * h + u * cand


def _shape_up_block(cin, cout):
    # nearest-neighbor upsample then conv; instance-normalized gated unit
    return nn.Sequential(
        nn.Upsample(scale_factor=2, mode="nearest"),
        nn.Conv2d(cin, 2 * cout, 3, padding=1),
        nn.InstanceNorm2d(2 * cout),
        nn.GLU(dim=1),
    )


class ShapeGenerator(nn.Module):
    """Bidirectional convolutional recurrent mask generator.

    Inputs per object: a box occupancy map and a class one-hot map; a noise
    vector is broadcast over the recurrent grid. Output masks are multiplied
    by the occupancy map, so support containment is exact.
    """

    def __init__(self, num_classes: int, channels: int = 16, noise_dim: int = 8,
                 mask_size: int = 64):
        super().__init__()
        self.num_classes = num_classes
        self.noise_dim = noise_dim
        self.mask_size = mask_size
        c = channels
        self.enc = nn.Sequential(
            nn.Conv2d(1 + num_classes, c, 3, stride=2, padding=1),
            nn.InstanceNorm2d(c),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * c),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.fwd = ConvGRUCell(2 * c + noise_dim, 2 * c)
        self.bwd = ConvGRUCell(2 * c + noise_dim, 2 * c)
        self.dec = nn.Sequential(
            _shape_up_block(4 * c, 2 * c),
            _shape_up_block(2 * c, c),
            nn.Conv2d(c, 1, 3, padding=1),
        )

    def forward(self, occupancy: torch.Tensor, label_maps: torch.Tensor,
                noise: torch.Tensor) -> torch.Tensor:
        """occupancy: (T, H, W); label_maps: (T, N_c, H, W); noise: (T, noise_dim).
        Returns per-object masks (T, H, W) in [0, 1]."""
        t = occupancy.size(0)
        if t == 0:
            raise ValueError("need at least one object")
        x = torch.cat([occupancy[:, None], label_maps], dim=1)
        feats = self.enc(x)
        grid = feats.shape[-2:]
        z = noise[:, :, None, None].expand(t, self.noise_dim, *grid)
        seq = torch.cat([feats, z], dim=1)

        h = feats.new_zeros(1, self.fwd.hidden_channels, *grid)
        fwd_states = []
        for i in range(t):
            h = self.fwd(seq[i : i + 1], h)
            fwd_states.append(h)
        h = feats.new_zeros(1, self.bwd.hidden_channels, *grid)
        bwd_states = [None] * t
        for i in reversed(range(t)):
            h = self.bwd(seq[i : i + 1], h)
            bwd_states[i] = h
        states = torch.cat(
            [torch.cat(fwd_states, dim=0), torch.cat(bwd_states, dim=0)], dim=1
        )
        logits = self.dec(states)[:, 0]
        return torch.sigmoid(logits) * occupancy


class ShapeCritic(nn.Module):
    """Small per-object convolutional critic over (mask, occupancy, label map)."""

    def __init__(self, num_classes: int, channels: int = 16, mask_size: int = 64):
        super().__init__()
        c = channels
        self.net = nn.Sequential(
            nn.Conv2d(2 + num_classes, c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
            nn.InstanceNorm2d(2 * c),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1),
            nn.InstanceNorm2d(4 * c),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.head = nn.Linear(4 * c, 1)

    def forward(self, masks, occupancy, label_maps) -> torch.Tensor:
        """Returns per-object probabilities (T,) in (0, 1)."""
        x = torch.cat([masks[:, None], occupancy[:, None], label_maps], dim=1)
        feats = self.net(x).mean(dim=(2, 3))
        return torch.sigmoid(self.head(feats))[:, 0].clamp(1e-6, 1.0 - 1e-6)


class PerceptualExtractor(nn.Module):
    """Fixed random-weight two-layer feature extractor; never trained."""

    def __init__(self, channels: int = 8, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        w1 = torch.randn(channels, 1, 3, 3, generator=gen) / 3.0
        w2 = torch.randn(2 * channels, channels, 3, 3, generator=gen) / 3.0
        self.register_buffer("w1", w1)
        self.register_buffer("w2", w2)

    def forward(self, masks: torch.Tensor) -> torch.Tensor:
        x = masks[:, None]
        x = nn.functional.leaky_relu(
            nn.functional.conv2d(x, self.w1, stride=2, padding=1), 0.2
        )
        return nn.functional.conv2d(x, self.w2, stride=2, padding=1)


def perceptual_loss(real_masks, fake_masks, extractor: PerceptualExtractor) -> torch.Tensor:
    """Mean squared distance between fixed-extractor features."""
    return nn.functional.mse_loss(extractor(fake_masks), extractor(real_masks))


def shape_adversarial_losses(real_probs: torch.Tensor, fake_probs: torch.Tensor):
    """Cross-entropy adversarial losses from per-object critic probabilities.

    Returns (generator loss, critic loss), each averaged over objects.
    """
    if real_probs.shape != fake_probs.shape:
        raise ValueError("object counts differ between real and fake")
    d_loss = (-torch.log(real_probs) - torch.log(1.0 - fake_probs)).mean()
    g_loss = (-torch.log(fake_probs)).mean()
    return g_loss, d_loss


def train_shape_generator(generator: ShapeGenerator, critic: ShapeCritic,
                          extractor: PerceptualExtractor, scenes, steps: int,
                          batch_size: int = 4, lr: float = 2e-4,
                          perceptual_weight: float = 10.0, log=None):
    """Alternating critic/generator updates over scene batches.

    `scenes` is a list of (occupancy (T, H, W), label_maps (T, N_c, H, W),
    real_masks (T, H, W)) tensors.
    """
    if not scenes:
        raise ValueError("empty dataset")
    g_opt = torch.optim.Adam(generator.parameters(), lr=lr, betas=(0.5, 0.999))
    d_opt = torch.optim.Adam(critic.parameters(), lr=lr, betas=(0.5, 0.999))
    history = []
    for step in range(steps):
        idx = torch.randint(0, len(scenes), (min(batch_size, len(scenes)),))
        batch = [scenes[int(i)] for i in idx]
        fakes = []
        for occ, label_maps, _ in batch:
            noise = torch.randn(occ.size(0), generator.noise_dim)
            fakes.append(generator(occ, label_maps, noise))

        d_total = 0.0
        for (occ, label_maps, real), fake in zip(batch, fakes):
            p_real = critic(real, occ, label_maps)
            p_fake = critic(fake.detach(), occ, label_maps)
            _, d_loss = shape_adversarial_losses(p_real, p_fake)
            d_total = d_total + d_loss
        d_total = d_total / len(batch)
        d_opt.zero_grad()
        d_total.backward()
        d_opt.step()

        g_total = 0.0
        for (occ, label_maps, real), fake in zip(batch, fakes):
            p_fake = critic(fake, occ, label_maps)
            g_adv = (-torch.log(p_fake)).mean()
            g_per = perceptual_loss(real, fake, extractor)
            g_total = g_total + g_adv + perceptual_weight * g_per
        g_total = g_total / len(batch)
        g_opt.zero_grad()
        g_total.backward()
        g_opt.step()

        history.append((float(d_total.detach()), float(g_total.detach())))
        if log is not None:
            log(step=step, d_loss=float(d_total.detach()), g_loss=float(g_total.detach()))
    return history
