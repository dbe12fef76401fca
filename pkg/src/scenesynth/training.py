"""Loss assembly, the staged training loops, and checkpoint plumbing for the
image GAN and the matching-model pretraining.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from . import checkpoint as ckpt
from .config import Config
from .damsm import DamsmConfig, ImageEncoder, damsm_loss
from .discriminators import (
    ObjectDiscriminator,
    PatchDiscriminator,
    ShapeStageDiscriminator,
    SNObjectDiscriminator,
    SNPatchDiscriminator,
    SNShapeStageDiscriminator,
)
from .generator import GenConfig, ImageGenerator, Layout
from .text import CondAugment, LabelEmbeddings, TextEncoder, WordLabelEmbeddings, pad_id_batch


# weight of mismatched-condition real pairs in the discriminator updates
MISMATCH_WEIGHT = 0.5


@dataclass
class LossWeights:
    obj: float = 0.1
    txt: float = 0.1
    pix: float = 1.0
    damsm: float = 100.0

    def __post_init__(self):
        if min(self.obj, self.txt, self.pix, self.damsm) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class Verdicts:
    """Probabilities from all discriminator heads for one forward pass.

    pat_un / pat_con / pix: one (B, g, g) grid per stage.
    obj_un / obj_con: one (T_i,) tensor per sample (empty list entries allowed).
    """

    pat_un: list = field(default_factory=list)
    pat_con: list = field(default_factory=list)
    pix: list = field(default_factory=list)
    obj_un: list = field(default_factory=list)
    obj_con: list = field(default_factory=list)


def _check_open_unit(tensors) -> None:
    for t in tensors:
        if t.numel() and (float(t.detach().min()) <= 0.0 or float(t.detach().max()) >= 1.0):
            raise ValueError("verdict probabilities must lie strictly inside (0, 1)")


def generator_gan_loss(verdicts: Verdicts, weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the discriminator log-probabilities on generated output.

    The object term averages over each sample's objects (weight obj), the patch
    terms average over each stage's patch grid (unconditional, text-conditional
    weighted by txt, shape-conditional weighted by pix). Samples without
    objects contribute no object term.
    """
    _check_open_unit(verdicts.pat_un + verdicts.pat_con + verdicts.pix)
    _check_open_unit([t for t in verdicts.obj_un + verdicts.obj_con if t.numel()])
    total = None
    for p_un, p_con, p_pix in zip(verdicts.pat_un, verdicts.pat_con, verdicts.pix):
        per_patch = (
            torch.log(p_un) + weights.txt * torch.log(p_con) + weights.pix * torch.log(p_pix)
        )
        stage = -per_patch.reshape(p_un.size(0), -1).mean(dim=1).mean()
        total = stage if total is None else total + stage
    obj_terms = []
    for p_un, p_con in zip(verdicts.obj_un, verdicts.obj_con):
        if p_un.numel() == 0:
            continue
        obj_terms.append(-(torch.log(p_un) + torch.log(p_con)).mean())
    if obj_terms:
        total = total + weights.obj * torch.stack(obj_terms).mean()
    if total is None:
        raise ValueError("no verdicts supplied")
    return total


def total_generator_loss(gan_loss, matching_loss, weights: LossWeights) -> torch.Tensor:
    """Adversarial loss plus the weighted image-text matching loss."""
    return gan_loss + weights.damsm * matching_loss


def _bce_head(p_real: torch.Tensor, p_fake: torch.Tensor) -> torch.Tensor:
    return -torch.log(p_real).mean() - torch.log(1.0 - p_fake).mean()


def discriminator_loss(real: Verdicts, fake: Verdicts) -> torch.Tensor:
    """Cross-entropy over every head: real toward 1, fake toward 0, averaged
    over patches/objects within each head and summed across heads."""
    total = torch.zeros(())
    for attr in ("pat_un", "pat_con", "pix"):
        for p_r, p_f in zip(getattr(real, attr), getattr(fake, attr)):
            total = total + _bce_head(p_r, p_f)
    real_obj = [t for t in real.obj_un if t.numel()]
    fake_obj = [t for t in fake.obj_un if t.numel()]
    if real_obj and fake_obj:
        total = total + _bce_head(torch.cat(real_obj), torch.cat(fake_obj))
        total = total + _bce_head(
            torch.cat([t for t in real.obj_con if t.numel()]),
            torch.cat([t for t in fake.obj_con if t.numel()]),
        )
    return total


@dataclass
class SceneTensors:
    """One scene prepared for training: image in [-1, 1] plus its layout."""

    image: torch.Tensor          # (3, S, S)
    caption_ids: list[list[int]]
    layout: Layout


def scene_tensors(sample, vocab, max_len: int) -> SceneTensors:
    from .text import caption_to_ids

    image = torch.from_numpy(sample.image).permute(2, 0, 1).contiguous()
    layout = Layout(
        labels=torch.tensor(sample.labels, dtype=torch.long),
        boxes=torch.tensor(sample.boxes, dtype=torch.float32).reshape(len(sample.labels), 4),
        masks=torch.from_numpy(sample.masks),
    )
    ids = [caption_to_ids(c, vocab, max_len) for c in sample.captions]
    return SceneTensors(image, ids, layout)


class GanSystem(nn.Module):
    """All trainable modules of the image-generation stage, plus the frozen
    matching model used for the text-conditioning loss."""

    def __init__(self, cfg: Config, vocab_size: int, num_classes: int):
        super().__init__()
        self.cfg = cfg
        self.num_classes = num_classes
        gen_cfg = GenConfig(
            base_channels=cfg.n_g,
            label_dim=cfg.n_l,
            cond_dim=cfg.n_e,
            noise_dim=cfg.noise_dim,
            num_classes=num_classes,
            word_dim=cfg.text_dim,
            base_resolution=cfg.base_resolution,
            residual_counts=(cfg.m0, cfg.m1, cfg.m2),
        )
        self.gen_cfg = gen_cfg
        self.text_encoder = TextEncoder(
            vocab_size, cfg.embed_dim, cfg.text_hidden, cfg.text_dropout, cfg.caption_max_len
        )
        self.cond_augment = CondAugment(cfg.text_dim, cfg.n_e)
        self.label_embeddings = LabelEmbeddings(num_classes, cfg.n_l)
        self.word_label_embeddings = WordLabelEmbeddings(vocab_size, cfg.n_l)
        self.generator = ImageGenerator(gen_cfg)
        self.image_encoder = ImageEncoder(cfg.text_dim, cfg.encoder_channels)
        self.damsm_cfg = DamsmConfig(cfg.gamma1, cfg.gamma2, cfg.gamma3)

        resolutions = gen_cfg.stage_resolutions
        feat_res = (4, 8, 16)
        sn = cfg.variant == "sn"
        patch_cls = SNPatchDiscriminator if sn else PatchDiscriminator
        shape_cls = SNShapeStageDiscriminator if sn else ShapeStageDiscriminator
        object_cls = SNObjectDiscriminator if sn else ObjectDiscriminator
        self.patch_ds = nn.ModuleList(
            [patch_cls(r, f, cfg.n_d, cfg.n_e) for r, f in zip(resolutions, feat_res)]
        )
        self.shape_ds = nn.ModuleList(
            [shape_cls(r, f, cfg.n_d, num_classes) for r, f in zip(resolutions, feat_res)]
        )
        self.object_d = object_cls(
            resolutions[-1], cfg.n_d, num_classes, cfg.n_l, cfg.n_g,
            cfg.roi_bins, cfg.roi_sampling, cfg.interpolate_roi_inputs,
        )

    def generator_parameters(self):
        mods = [self.generator, self.cond_augment, self.label_embeddings, self.word_label_embeddings]
        if self.cfg.fine_tune_text:
            mods.append(self.text_encoder)
        for m in mods:
            yield from m.parameters()

    def discriminator_modules(self) -> dict[str, nn.Module]:
        out = {f"patch{k}": d for k, d in enumerate(self.patch_ds)}
        out.update({f"shape{k}": d for k, d in enumerate(self.shape_ds)})
        out["object"] = self.object_d
        return out

    def encode_text(self, caption_ids: list[list[int]]):
        return self.text_encoder.encode_ids(caption_ids)

    def object_conditioning(self, enc, word_ids, layouts):
        """Per-sample label embeddings and attention contexts (the conditional
        inputs of the object-wise discriminator)."""
        word_lab = self.word_label_embeddings(word_ids)
        label_embs, ctxs = [], []
        for i, layout in enumerate(layouts):
            emb = self.label_embeddings(layout.labels)
            ctx, _ = self.generator.object_attention(
                emb, word_lab[i].transpose(0, 1), enc.word_vectors[i], enc.pad_mask[i]
            )
            label_embs.append(emb)
            ctxs.append(ctx)
        return label_embs, ctxs

    def generate(self, enc, word_ids, layouts, z):
        cond = self.cond_augment(enc.sentence_vector)
        states, records = self.generator(
            enc, layouts, z, cond, self.label_embeddings, self.word_label_embeddings, word_ids
        )
        return states, records, cond


def real_stage_images(images: torch.Tensor, resolutions) -> list[torch.Tensor]:
    """Area-averaged copies of the full-resolution images for each stage."""
    out = []
    size = images.size(-1)
    for r in resolutions:
        out.append(images if r == size else nn.functional.avg_pool2d(images, size // r))
    return out


def run_discriminators(system: GanSystem, stage_images, class_masks, cond,
                       boxes_per_sample, label_embs, ctxs, with_objects=True) -> Verdicts:
    v = Verdicts()
    for k, (patch_d, shape_d) in enumerate(zip(system.patch_ds, system.shape_ds)):
        p_un, p_con = patch_d(stage_images[k], cond)
        v.pat_un.append(p_un)
        v.pat_con.append(p_con)
        v.pix.append(shape_d(stage_images[k], class_masks[k]))
    if with_objects:
        obj_un, obj_con = system.object_d(
            stage_images[-1], class_masks[-1], boxes_per_sample, label_embs, ctxs
        )
        offset = 0
        for boxes in boxes_per_sample:
            t = len(boxes)
            v.obj_un.append(obj_un[offset : offset + t])
            v.obj_con.append(obj_con[offset : offset + t])
            offset += t
    return v


class GanTrainer:
    """Alternating optimization: every discriminator on (real, detached fake),
    then the generator on its weighted loss."""

    def __init__(self, system: GanSystem, cfg: Config):
        self.system = system
        self.cfg = cfg
        self.weights = LossWeights(cfg.lambda_obj, cfg.lambda_txt, cfg.lambda_pix, cfg.lambda_damsm)
        # the matching model only scores generated images here; its parameters
        # stay fixed after pretraining
        for p in system.image_encoder.parameters():
            p.requires_grad_(False)
        if not cfg.fine_tune_text:
            for p in system.text_encoder.parameters():
                p.requires_grad_(False)
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        self.g_opt = torch.optim.Adam(list(system.generator_parameters()), lr=cfg.gan_lr, betas=betas)
        self.d_opts = {
            name: torch.optim.Adam(mod.parameters(), lr=cfg.gan_lr, betas=betas)
            for name, mod in system.discriminator_modules().items()
        }
        self.step_count = 0

    def prepare_batch(self, scenes: list[SceneTensors]):
        """Pick one caption per scene and stack the text/image tensors."""
        cap_choice = [
            int(torch.randint(0, len(s.caption_ids), (1,))) for s in scenes
        ]
        caption_ids = [s.caption_ids[c] for s, c in zip(scenes, cap_choice)]
        images = torch.stack([s.image for s in scenes])
        layouts = [s.layout for s in scenes]
        return caption_ids, images, layouts

    def step(self, scenes: list[SceneTensors]) -> dict[str, float]:
        system = self.system
        cfg = self.cfg
        caption_ids, images, layouts = self.prepare_batch(scenes)
        b = images.size(0)
        resolutions = system.gen_cfg.stage_resolutions
        word_ids, _ = pad_id_batch(caption_ids)

        system.text_encoder.eval()
        system.image_encoder.eval()
        if cfg.fine_tune_text:
            enc = system.encode_text(caption_ids)
        else:
            with torch.no_grad():
                enc = system.encode_text(caption_ids)

        z = torch.randn(b, cfg.noise_dim)
        fake_states, records, cond = system.generate(enc, word_ids, layouts, z)
        fake_images = [s.image for s in fake_states]
        real_images = real_stage_images(images, resolutions)
        class_masks = [
            torch.stack([
                _layout_class_masks(lay, r, system.num_classes) for lay in layouts
            ])
            for r in resolutions
        ]
        boxes_per_sample = [[tuple(map(float, bx)) for bx in lay.boxes] for lay in layouts]
        label_embs, ctxs = system.object_conditioning(enc, word_ids, layouts)
        cond_d = cond.detach()
        label_embs_d = [e.detach() for e in label_embs]
        ctxs_d = [c.detach() for c in ctxs]

        # mismatched conditioning for the conditional heads
        wrong_cond = cond_d.roll(1, dims=0) if b > 1 else None
        shift = int(torch.randint(1, system.num_classes, (1,)))
        word_lab = system.word_label_embeddings(word_ids)
        wrong_label_embs, wrong_ctxs = [], []
        for i, lay in enumerate(layouts):
            wrong = (lay.labels + shift) % system.num_classes
            emb = system.label_embeddings(wrong).detach()
            ctx, _ = system.generator.object_attention(
                emb, word_lab[i].transpose(0, 1).detach(),
                enc.word_vectors[i].detach(), enc.pad_mask[i],
            )
            wrong_label_embs.append(emb)
            wrong_ctxs.append(ctx.detach())

        logs = {}
        d_total = 0.0
        for name, opt in self.d_opts.items():
            opt.zero_grad()
        real_v = run_discriminators(
            system, real_images, class_masks, cond_d, boxes_per_sample, label_embs_d, ctxs_d
        )
        fake_v = run_discriminators(
            system, [x.detach() for x in fake_images], class_masks, cond_d,
            boxes_per_sample, label_embs_d, ctxs_d,
        )
        d_loss = discriminator_loss(real_v, fake_v)
        if wrong_cond is not None:
            for k, patch_d in enumerate(system.patch_ds):
                _, p_wrong = patch_d(real_images[k], wrong_cond)
                d_loss = d_loss + MISMATCH_WEIGHT * (-torch.log(1.0 - p_wrong).mean())
        wrong_un, wrong_con = system.object_d(
            real_images[-1], class_masks[-1], boxes_per_sample, wrong_label_embs, wrong_ctxs
        )
        if wrong_con.numel():
            d_loss = d_loss + MISMATCH_WEIGHT * (-torch.log(1.0 - wrong_con).mean())
        _abort_on_nan({"d_loss": d_loss})
        d_loss.backward()
        for opt in self.d_opts.values():
            opt.step()
        d_total = float(d_loss.detach())

        # generator update
        self.g_opt.zero_grad()
        gen_v = run_discriminators(
            system, fake_images, class_masks, cond, boxes_per_sample, label_embs, ctxs
        )
        gan_loss = generator_gan_loss(gen_v, self.weights)
        features = system.image_encoder(fake_images[-1])
        match_loss, _ = damsm_loss(features, enc, system.damsm_cfg)
        g_loss = total_generator_loss(gan_loss, match_loss, self.weights)
        _abort_on_nan({"g_loss": g_loss, "gan_loss": gan_loss, "damsm_loss": match_loss})
        g_loss.backward()
        self.g_opt.step()

        self.step_count += 1
        logs.update(
            step=self.step_count,
            d_loss=d_total,
            g_loss=float(g_loss.detach()),
            gan_loss=float(gan_loss.detach()),
            damsm_loss=float(match_loss.detach()),
        )
        return logs


def _abort_on_nan(named_losses: dict[str, torch.Tensor]) -> None:
    bad = [name for name, value in named_losses.items() if not torch.isfinite(value).all()]
    if bad:
        raise RuntimeError(f"non-finite loss detected: {', '.join(bad)}")


def _layout_class_masks(layout: Layout, resolution: int, num_classes: int) -> torch.Tensor:
    from .generator import _class_masks

    return _class_masks(layout, resolution, num_classes, torch.float32)


def named_gan_modules(system: GanSystem) -> dict[str, nn.Module]:
    out = {
        "generator": system.generator,
        "cond_augment": system.cond_augment,
        "label_embeddings": system.label_embeddings,
        "word_label_embeddings": system.word_label_embeddings,
        "text_encoder": system.text_encoder,
        "image_encoder": system.image_encoder,
    }
    out.update(system.discriminator_modules())
    return out


def gan_checkpoint_tensors(system: GanSystem, trainer: GanTrainer) -> dict[str, torch.Tensor]:
    tensors: dict[str, torch.Tensor] = {}
    for name, module in named_gan_modules(system).items():
        tensors.update(ckpt.module_tensors(module, name))
    tensors.update(ckpt.optimizer_tensors(trainer.g_opt, "opt_g"))
    for name, opt in trainer.d_opts.items():
        tensors.update(ckpt.optimizer_tensors(opt, f"opt_{name}"))
    tensors["meta/step"] = torch.tensor(trainer.step_count, dtype=torch.int64)
    return tensors


def restore_gan_state(system: GanSystem, trainer: GanTrainer, tensors) -> None:
    for name, module in named_gan_modules(system).items():
        ckpt.load_module(module, tensors, name)
    ckpt.load_optimizer(trainer.g_opt, tensors, "opt_g")
    for name, opt in trainer.d_opts.items():
        ckpt.load_optimizer(opt, tensors, f"opt_{name}")
    trainer.step_count = int(tensors["meta/step"])


def train_image_gan(system: GanSystem, trainer: GanTrainer, scenes: list[SceneTensors],
                    steps: int, batch_size: int, log=None) -> None:
    """Run `steps` further alternating updates; batch order comes from the
    global generator so a checkpointed RNG state resumes exactly."""
    if not scenes:
        raise ValueError("empty dataset")
    for _ in range(steps):
        idx = torch.randint(0, len(scenes), (min(batch_size, len(scenes)),))
        logs = trainer.step([scenes[int(i)] for i in idx])
        if log is not None:
            log(**logs)


def train_matching(text_encoder: TextEncoder, image_encoder: ImageEncoder,
                   scenes: list[SceneTensors], dcfg: DamsmConfig, steps: int,
                   batch_size: int = 8, lr: float = 2e-3, log=None):
    """Pretrain the matching model on real image/caption pairs."""
    if not scenes:
        raise ValueError("empty dataset")
    params = list(text_encoder.parameters()) + list(image_encoder.parameters())
    opt = torch.optim.Adam(params, lr=lr, betas=(0.5, 0.999))
    history = []
    text_encoder.train()
    image_encoder.train()
    for step in range(steps):
        idx = torch.randint(0, len(scenes), (min(batch_size, len(scenes)),))
        batch = [scenes[int(i)] for i in idx]
        cap_choice = [int(torch.randint(0, len(s.caption_ids), (1,))) for s in batch]
        enc = text_encoder.encode_ids(
            [s.caption_ids[c] for s, c in zip(batch, cap_choice)]
        )
        features = image_encoder(torch.stack([s.image for s in batch]))
        loss, parts = damsm_loss(features, enc, dcfg)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
        if log is not None:
            log(step=step, loss=float(loss.detach()))
    text_encoder.eval()
    image_encoder.eval()
    return history, opt


def matching_eval_loss(text_encoder, image_encoder, scenes, dcfg, batch_size=8) -> float:
    """Matching loss over the whole set in eval mode (no dropout)."""
    text_encoder.eval()
    image_encoder.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(scenes), batch_size):
            batch = scenes[start : start + batch_size]
            if len(batch) < 2:
                continue
            enc = text_encoder.encode_ids([s.caption_ids[0] for s in batch])
            features = image_encoder(torch.stack([s.image for s in batch]))
            loss, _ = damsm_loss(features, enc, dcfg)
            total += float(loss)
            count += 1
    return total / max(count, 1)
