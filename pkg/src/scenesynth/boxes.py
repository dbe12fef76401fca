"""Attentive sequence decoder for object bounding boxes.

Each step emits a categorical class-label head (with an end-of-sequence class)
and two bivariate Gaussian mixtures: one over the box position (x, y) and one
over the box size (w, h) conditioned additionally on the position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .text import TextEncoder, TextEncoding

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GmmParams:
    """One bivariate mixture head: weights on the simplex, component means,
    positive standard deviations, and correlations strictly inside (-1, 1)."""

    pi: torch.Tensor      # (K,)
    mu: torch.Tensor      # (K, 2)
    sigma: torch.Tensor   # (K, 2)
    rho: torch.Tensor     # (K,)


@dataclass
class BoxStepParams:
    label_logits: torch.Tensor   # (L + 1,), last class terminates the sequence
    xy: GmmParams
    wh: GmmParams


BoxSequence = list[tuple[int, tuple[float, float, float, float]]]


def validate_box(box) -> bool:
    x, y, w, h = box
    return 0 <= x <= 1 and 0 <= y <= 1 and w > 0 and h > 0 and x + w <= 1 and y + h <= 1


def clamp_box(x, y, w, h, min_side=1e-3):
    w = min(max(w, min_side), 1.0)
    h = min(max(h, min_side), 1.0)
    x = min(max(x, 0.0), 1.0 - w)
    y = min(max(y, 0.0), 1.0 - h)
    return x, y, w, h


def unpack_gmm(theta: torch.Tensor, k: int, sigma_floor: float = 1e-3) -> GmmParams:
    """Split a raw 6K head output into constrained mixture parameters."""
    if theta.shape[-1] != 6 * k:
        raise ValueError(f"expected {6 * k} raw values, got {theta.shape[-1]}")
    pi = torch.softmax(theta[..., :k], dim=-1)
    mu = theta[..., k : 3 * k].reshape(*theta.shape[:-1], k, 2)
    sigma = sigma_floor + torch.exp(theta[..., 3 * k : 5 * k].clamp(-10.0, 6.0))
    sigma = sigma.reshape(*theta.shape[:-1], k, 2)
    rho = 0.99 * torch.tanh(theta[..., 5 * k :])
    return GmmParams(pi, mu, sigma, rho)


def bivariate_mixture_log_density(params: GmmParams, point: torch.Tensor) -> torch.Tensor:
    """Log density of a 2-vector under the mixture. Supports batched params
    of shape (..., K, 2) against points of shape (..., 2)."""
    if point.shape[-1] != 2 or not torch.isfinite(point).all():
        raise ValueError("target must be a finite 2-vector per head")
    d = point.unsqueeze(-2) - params.mu                       # (..., K, 2)
    s1, s2 = params.sigma[..., 0], params.sigma[..., 1]
    rho = params.rho
    one_m_r2 = 1.0 - rho * rho
    zx = d[..., 0] / s1
    zy = d[..., 1] / s2
    z = zx * zx - 2.0 * rho * zx * zy + zy * zy
    log_norm = -_LOG_2PI - torch.log(s1) - torch.log(s2) - 0.5 * torch.log(one_m_r2)
    log_comp = log_norm - z / (2.0 * one_m_r2)
    return torch.logsumexp(torch.log(params.pi) + log_comp, dim=-1)


def gmm_nll(step: BoxStepParams, target) -> torch.Tensor:
    """Negative log probability of one labeled box under a step's heads:
    label term plus the two coordinate mixture terms."""
    label, x, y, w, h = target
    device = step.label_logits.device
    dtype = step.label_logits.dtype
    label_nll = nn.functional.cross_entropy(
        step.label_logits.unsqueeze(0),
        torch.tensor([label], device=device),
    )
    xy_nll = -bivariate_mixture_log_density(
        step.xy, torch.tensor([x, y], dtype=dtype, device=device)
    )
    wh_nll = -bivariate_mixture_log_density(
        step.wh, torch.tensor([w, h], dtype=dtype, device=device)
    )
    return label_nll + xy_nll + wh_nll


class BoxGenerator(nn.Module):
    """Encoder-decoder over captions: the text encoder's word outputs are mixed
    by an additive attention scorer into a per-step context, and a recurrent
    decoder emits label logits and the two mixture heads."""

    def __init__(self, text_encoder: TextEncoder, num_classes: int, k: int = 4,
                 attn_dim: int = 64, sigma_floor: float = 1e-3, t_max: int = 8,
                 coord_grad_scale: float = 0.1):
        super().__init__()
        self.text_encoder = text_encoder
        self.num_classes = num_classes
        self.eos_id = num_classes
        self.k = k
        self.sigma_floor = sigma_floor
        self.t_max = t_max
        self.coord_grad_scale = coord_grad_scale
        d = text_encoder.output_dim
        self.d = d
        box_feat = 4 + num_classes + 1
        self.attn_hidden = nn.Linear(2 * d, attn_dim)
        self.attn_score = nn.Linear(attn_dim, 1, bias=False)
        self.cell = nn.LSTMCell(box_feat + d, d)
        self.label_head = nn.Linear(d, num_classes + 1)
        self.xy_head = nn.Linear(d + num_classes + 1, 6 * k)
        self.wh_head = nn.Linear(d + num_classes + 1 + 2, 6 * k)

    def attend(self, hidden: torch.Tensor, enc_outputs: torch.Tensor,
               pad_mask: torch.Tensor):
        """Additive attention over encoder outputs.

        hidden: (B, D); enc_outputs: (B, Ts, D); returns (context (B, D),
        weights (B, Ts)) with padded words excluded.
        """
        if enc_outputs.size(1) == 0:
            raise ValueError("empty encoder outputs")
        expanded = hidden.unsqueeze(1).expand(-1, enc_outputs.size(1), -1)
        scores = self.attn_score(
            torch.tanh(self.attn_hidden(torch.cat([expanded, enc_outputs], dim=2)))
        ).squeeze(2)
        neg = torch.finfo(scores.dtype).min
        scores = scores.masked_fill(~pad_mask, neg)
        alpha = torch.softmax(scores, dim=1)
        return torch.bmm(alpha.unsqueeze(1), enc_outputs).squeeze(1), alpha

    def decoder_step(self, prev_feat, state, enc_outputs, pad_mask):
        """One recurrent step: contextual input from attention, then the cell."""
        h_prev, c_prev = state
        context, alpha = self.attend(h_prev, enc_outputs, pad_mask)
        h, c = self.cell(torch.cat([prev_feat, context], dim=1), (h_prev, c_prev))
        return (h, c), context, alpha

    def heads(self, h: torch.Tensor, box_xy: torch.Tensor):
        """Label logits and the two mixture heads for one decoded step.

        box_xy: (B, 2) position values fed to the size head (ground truth under
        teacher forcing, sampled values during generation). The density heads
        see the full hidden state but push only a scaled-down gradient into it,
        so their near-floor spikes cannot drown the label signal.
        """
        logits = self.label_head(h)
        s = self.coord_grad_scale
        if self.training and s < 1.0:
            h_in = s * h + (1.0 - s) * h.detach()
            logits_in = s * logits + (1.0 - s) * logits.detach()
        else:
            h_in, logits_in = h, logits
        theta_xy = self.xy_head(torch.cat([h_in, logits_in], dim=1))
        theta_wh = self.wh_head(torch.cat([h_in, logits_in, box_xy], dim=1))
        return logits, theta_xy, theta_wh

    def box_feature(self, labels: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        """(B,) labels and (B, 4) boxes to the decoder input encoding; a label
        of -1 encodes the start step (all-zero one-hot)."""
        b = labels.size(0)
        one_hot = torch.zeros(b, self.num_classes + 1, dtype=boxes.dtype, device=boxes.device)
        real = labels >= 0
        if bool(real.any()):
            one_hot[real] = nn.functional.one_hot(
                labels[real], self.num_classes + 1
            ).to(boxes.dtype)
        return torch.cat([boxes, one_hot], dim=1)

    def init_state(self, enc: TextEncoding):
        h0 = enc.sentence_vector
        return h0, torch.zeros_like(h0)

    def step_params(self, logits, theta_xy, theta_wh, row: int = 0) -> BoxStepParams:
        return BoxStepParams(
            label_logits=logits[row],
            xy=unpack_gmm(theta_xy[row], self.k, self.sigma_floor),
            wh=unpack_gmm(theta_wh[row], self.k, self.sigma_floor),
        )

    def sequence_nll(self, enc: TextEncoding, labels_list, boxes_list) -> torch.Tensor:
        """Teacher-forced mean negative log likelihood over a batch.

        labels_list/boxes_list: per-sample object labels and (x, y, w, h) rows.
        Each sequence contributes its object steps plus one terminating step.
        """
        b = enc.sentence_vector.size(0)
        device = enc.sentence_vector.device
        dtype = enc.sentence_vector.dtype
        enc_outputs = enc.word_vectors.transpose(1, 2)
        lengths = [len(lb) for lb in labels_list]
        t_steps = max(lengths) + 1
        state = self.init_state(enc)
        prev_labels = torch.full((b,), -1, dtype=torch.long, device=device)
        prev_boxes = torch.zeros(b, 4, dtype=dtype, device=device)
        total = torch.zeros((), dtype=dtype, device=device)
        count = 0
        for t in range(t_steps):
            feat = self.box_feature(prev_labels, prev_boxes)
            state, _, _ = self.decoder_step(feat, state, enc_outputs, enc.pad_mask)
            active = torch.tensor([t <= lengths[i] for i in range(b)], device=device)
            in_seq = torch.tensor([t < lengths[i] for i in range(b)], device=device)
            target_labels = torch.tensor(
                [
                    labels_list[i][t] if t < lengths[i] else self.eos_id
                    for i in range(b)
                ],
                device=device,
            )
            target_boxes = torch.tensor(
                [
                    list(boxes_list[i][t]) if t < lengths[i] else [0.0, 0.0, 0.0, 0.0]
                    for i in range(b)
                ],
                dtype=dtype,
                device=device,
            )
            logits, theta_xy, theta_wh = self.heads(state[0], target_boxes[:, :2])
            label_nll = nn.functional.cross_entropy(logits, target_labels, reduction="none")
            xy = unpack_gmm(theta_xy, self.k, self.sigma_floor)
            wh = unpack_gmm(theta_wh, self.k, self.sigma_floor)
            xy_nll = -bivariate_mixture_log_density(xy, target_boxes[:, :2])
            wh_nll = -bivariate_mixture_log_density(wh, target_boxes[:, 2:])
            step_nll = label_nll * active + (xy_nll + wh_nll) * in_seq
            total = total + step_nll.sum()
            count += int(active.sum())
            prev_labels = target_labels.clone()
            prev_labels[~in_seq] = -1
            prev_boxes = target_boxes * in_seq[:, None]
        return total / count

    @torch.no_grad()
    def sample(self, caption_ids: list[int], mode: str = "greedy",
               seed: int | None = None, min_side: float = 0.05) -> BoxSequence:
        """Decode one box sequence; stops at the end class or after t_max objects.

        Boxes are clamped into the unit square; `min_side` keeps them wide
        enough to cover at least one pixel center downstream.
        """
        if mode not in ("greedy", "stochastic"):
            raise ValueError("mode must be 'greedy' or 'stochastic'")
        gen = torch.Generator()
        gen.manual_seed(seed if seed is not None else 0)
        enc = self.text_encoder.encode_ids([caption_ids])
        enc_outputs = enc.word_vectors.transpose(1, 2)
        state = self.init_state(enc)
        dtype = enc.sentence_vector.dtype
        prev_labels = torch.full((1,), -1, dtype=torch.long)
        prev_boxes = torch.zeros(1, 4, dtype=dtype)
        out: BoxSequence = []
        for _ in range(self.t_max + 1):
            feat = self.box_feature(prev_labels, prev_boxes)
            state, _, _ = self.decoder_step(feat, state, enc_outputs, enc.pad_mask)
            logits = self.label_head(state[0])
            if mode == "greedy":
                label = int(logits[0].argmax())
            else:
                probs = torch.softmax(logits[0], dim=0)
                label = int(torch.multinomial(probs, 1, generator=gen))
            if label == self.eos_id or len(out) >= self.t_max:
                break
            theta_xy = self.xy_head(torch.cat([state[0], logits], dim=1))
            xy = unpack_gmm(theta_xy, self.k, self.sigma_floor)
            x, y = self._draw(xy, mode, gen, row=0)
            pos = torch.tensor([[x, y]], dtype=dtype)
            theta_wh = self.wh_head(torch.cat([state[0], logits, pos], dim=1))
            wh = unpack_gmm(theta_wh, self.k, self.sigma_floor)
            w, h = self._draw(wh, mode, gen, row=0)
            x, y, w, h = clamp_box(x, y, w, h, min_side=min_side)
            out.append((label, (x, y, w, h)))
            prev_labels = torch.tensor([label])
            prev_boxes = torch.tensor([[x, y, w, h]], dtype=dtype)
        return out

    def _draw(self, params: GmmParams, mode: str, gen: torch.Generator, row: int):
        pi = params.pi[row]
        if mode == "greedy":
            k = int(pi.argmax())
            mu = params.mu[row, k]
            return float(mu[0]), float(mu[1])
        k = int(torch.multinomial(pi, 1, generator=gen))
        mu = params.mu[row, k]
        s1, s2 = params.sigma[row, k]
        rho = params.rho[row, k]
        n = torch.randn(2, generator=gen, dtype=mu.dtype)
        u = mu[0] + s1 * n[0]
        v = mu[1] + s2 * (rho * n[0] + torch.sqrt(1 - rho * rho) * n[1])
        return float(u), float(v)


def train_box_generator(model: BoxGenerator, dataset, steps: int, batch_size: int = 16,
                        lr: float = 1e-3, clip_norm: float = 5.0, log=None):
    """Teacher-forced training with Adam. `dataset` is a list of
    (caption_ids, labels, boxes) tuples; returns per-step mean NLL values.

    Gradients are norm-clipped: near the variance floor the density heads can
    emit spikes that would otherwise drown the label signal.
    """
    if not dataset:
        raise ValueError("empty dataset")
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999))
    history = []
    for step in range(steps):
        idx = torch.randint(0, len(dataset), (min(batch_size, len(dataset)),))
        batch = [dataset[int(i)] for i in idx]
        enc = model.text_encoder.encode_ids([b[0] for b in batch])
        nll = model.sequence_nll(enc, [b[1] for b in batch], [b[2] for b in batch])
        opt.zero_grad()
        nll.backward()
        nn.utils.clip_grad_norm_(params, clip_norm)
        opt.step()
        history.append(float(nll.detach()))
        if log is not None:
            log(step=step, nll=float(nll.detach()))
    return history
