"""Command-line driver: dataset creation, the four training stages, sampling,
evaluation, attention visualization, and the gradient check suite.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from . import checkpoint as ckpt
from . import gradcheck as gradcheck_mod
from . import toyscenes
from .boxes import BoxGenerator, train_box_generator
from .config import Config, config_reference, dump_config, load_config
from .damsm import DamsmConfig, ImageEncoder, frechet_feature_distance, r_precision
from .generator import Layout
from .shapes import (
    PerceptualExtractor,
    ShapeCritic,
    ShapeGenerator,
    class_mask_tensor,
    render_box_maps,
    train_shape_generator,
)
from .text import TextEncoder, Vocabulary, build_vocab, caption_to_ids, pad_id_batch
from .training import (
    GanSystem,
    GanTrainer,
    SceneTensors,
    gan_checkpoint_tensors,
    named_gan_modules,
    scene_tensors,
    train_image_gan,
    train_matching,
)
from .viz import render_attention_maps, save_image


def _log_writer(path: Path):
    fh = open(path, "a", encoding="utf-8")

    def write(**kv):
        fh.write(" ".join(f"{k}={v}" for k, v in kv.items()) + "\n")
        fh.flush()

    return write


def _load_scenes(cfg: Config, split: str):
    vocab = Vocabulary.load(Path(cfg.data_dir) / "vocab.txt")
    samples = toyscenes.read_dataset(cfg.data_dir, split)
    return vocab, samples, [scene_tensors(s, vocab, cfg.caption_max_len) for s in samples]


def _require(path: Path, hint: str) -> None:
    if not path.exists():
        raise FileNotFoundError(f"{path} is missing; run `{hint}` first")


def cmd_make_data(cfg: Config, args) -> int:
    out_dir = args.out or cfg.data_dir
    data = toyscenes.make_dataset(cfg, args.seed)
    toyscenes.write_dataset(data, out_dir)
    corpus = [c for s in data["train"] for c in s.captions]
    lexicon = " ".join(
        list(toyscenes.SHAPE_WORDS)
        + list(toyscenes.COLOR_WORDS)
        + toyscenes.tokenize(" ".join(t[1] for t in toyscenes.TEMPLATES))
        + toyscenes.tokenize(" ".join(toyscenes._CAPTION_PREFIXES))
    )
    vocab = build_vocab(corpus + [lexicon])
    vocab.save(Path(out_dir) / "vocab.txt")
    print(f"wrote {len(data['train'])} train / {len(data['val'])} val scenes to {out_dir}")
    return 0


def cmd_train_damsm(cfg: Config, args) -> int:
    torch.manual_seed(args.seed)
    vocab, _, scenes = _load_scenes(cfg, "train")
    run_dir = Path(args.out or cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    text_encoder = TextEncoder(
        len(vocab), cfg.embed_dim, cfg.text_hidden, cfg.text_dropout, cfg.caption_max_len
    )
    image_encoder = ImageEncoder(cfg.text_dim, cfg.encoder_channels)
    dcfg = DamsmConfig(cfg.gamma1, cfg.gamma2, cfg.gamma3)
    steps = args.steps if args.steps is not None else cfg.damsm_steps
    log = _log_writer(run_dir / "damsm_log.txt")
    train_matching(text_encoder, image_encoder, scenes, dcfg, steps, cfg.damsm_batch,
                   cfg.damsm_lr, log=log)
    tensors = {}
    tensors.update(ckpt.module_tensors(text_encoder, "text_encoder"))
    tensors.update(ckpt.module_tensors(image_encoder, "image_encoder"))
    ckpt.save_checkpoint(run_dir / "damsm.ckpt", tensors, dump_config(cfg))
    print(f"saved {run_dir / 'damsm.ckpt'} after {steps} steps")
    return 0


def cmd_train_box(cfg: Config, args) -> int:
    torch.manual_seed(args.seed)
    vocab, samples, scenes = _load_scenes(cfg, "train")
    run_dir = Path(args.out or cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _require(run_dir / "damsm.ckpt", "scenesynth train-damsm")
    text_encoder = TextEncoder(
        len(vocab), cfg.embed_dim, cfg.text_hidden, cfg.text_dropout, cfg.caption_max_len
    )
    tensors, _, _ = ckpt.load_checkpoint(run_dir / "damsm.ckpt")
    ckpt.load_module(text_encoder, tensors, "text_encoder")
    text_encoder.eval()
    model = BoxGenerator(
        text_encoder, toyscenes.NUM_CLASSES, cfg.gmm_k, cfg.box_attn_dim,
        cfg.sigma_floor, cfg.t_max, cfg.coord_grad_scale,
    )
    dataset = [
        (st.caption_ids[0], list(s.labels), [tuple(b) for b in s.boxes])
        for s, st in zip(samples, scenes)
    ]
    steps = args.steps if args.steps is not None else cfg.box_steps
    log = _log_writer(run_dir / "box_log.txt")
    train_box_generator(model, dataset, steps, cfg.box_batch, cfg.box_lr, log=log)
    ckpt.save_checkpoint(run_dir / "box.ckpt", ckpt.module_tensors(model, "box"), dump_config(cfg))
    print(f"saved {run_dir / 'box.ckpt'} after {steps} steps")
    return 0


def _shape_training_scenes(scenes: list[SceneTensors], num_classes: int, size: int):
    out = []
    for st in scenes:
        if st.layout.count == 0:
            continue
        boxes = [tuple(map(float, b)) for b in st.layout.boxes]
        occ, label_map = render_box_maps(boxes, size, size, list(map(int, st.layout.labels)), num_classes)
        label_maps = torch.stack(
            [class_mask_tensor(occ[t : t + 1], [int(st.layout.labels[t])], num_classes) for t in range(len(boxes))]
        )
        out.append((occ, label_maps, st.layout.masks))
    return out


def cmd_train_shape(cfg: Config, args) -> int:
    torch.manual_seed(args.seed)
    _, _, scenes = _load_scenes(cfg, "train")
    run_dir = Path(args.out or cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _require(run_dir / "box.ckpt", "scenesynth train-box")
    generator = ShapeGenerator(toyscenes.NUM_CLASSES, cfg.shape_channels, cfg.shape_noise_dim, cfg.image_size)
    critic = ShapeCritic(toyscenes.NUM_CLASSES, cfg.shape_channels, cfg.image_size)
    extractor = PerceptualExtractor(seed=args.seed)
    data = _shape_training_scenes(scenes, toyscenes.NUM_CLASSES, cfg.image_size)
    steps = args.steps if args.steps is not None else cfg.shape_steps
    log = _log_writer(run_dir / "shape_log.txt")
    train_shape_generator(generator, critic, extractor, data, steps, cfg.shape_batch,
                          cfg.shape_lr, cfg.perceptual_weight, log=log)
    tensors = {}
    tensors.update(ckpt.module_tensors(generator, "shape_gen"))
    tensors.update(ckpt.module_tensors(critic, "shape_critic"))
    tensors.update(ckpt.module_tensors(extractor, "shape_extractor"))
    ckpt.save_checkpoint(run_dir / "shape.ckpt", tensors, dump_config(cfg))
    print(f"saved {run_dir / 'shape.ckpt'} after {steps} steps")
    return 0


def _build_system(cfg: Config, vocab: Vocabulary, run_dir: Path, load_image_ckpt: bool) -> GanSystem:
    system = GanSystem(cfg, len(vocab), toyscenes.NUM_CLASSES)
    damsm_path = run_dir / "damsm.ckpt"
    _require(damsm_path, "scenesynth train-damsm")
    tensors, _, _ = ckpt.load_checkpoint(damsm_path)
    ckpt.load_module(system.text_encoder, tensors, "text_encoder")
    ckpt.load_module(system.image_encoder, tensors, "image_encoder")
    system.text_encoder.eval()
    system.image_encoder.eval()
    for p in system.image_encoder.parameters():
        p.requires_grad_(False)
    if not cfg.fine_tune_text:
        for p in system.text_encoder.parameters():
            p.requires_grad_(False)
    if load_image_ckpt:
        image_path = run_dir / "image.ckpt"
        _require(image_path, "scenesynth train-image")
        tensors, _, _ = ckpt.load_checkpoint(image_path)
        for name, module in named_gan_modules(system).items():
            ckpt.load_module(module, tensors, name)
    return system


def cmd_train_image(cfg: Config, args) -> int:
    torch.manual_seed(args.seed)
    vocab, _, scenes = _load_scenes(cfg, "train")
    run_dir = Path(args.out or cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _require(run_dir / "shape.ckpt", "scenesynth train-shape")
    system = _build_system(cfg, vocab, run_dir, load_image_ckpt=False)
    trainer = GanTrainer(system, cfg)
    steps = args.steps if args.steps is not None else cfg.gan_steps
    log = _log_writer(run_dir / "image_log.txt")
    train_image_gan(system, trainer, scenes, steps, cfg.gan_batch, log=log)
    ckpt.save_checkpoint(
        run_dir / "image.ckpt", gan_checkpoint_tensors(system, trainer), dump_config(cfg)
    )
    print(f"saved {run_dir / 'image.ckpt'} after {steps} steps")
    return 0


def _load_box_generator(cfg: Config, vocab: Vocabulary, run_dir: Path) -> BoxGenerator:
    _require(run_dir / "box.ckpt", "scenesynth train-box")
    text_encoder = TextEncoder(
        len(vocab), cfg.embed_dim, cfg.text_hidden, cfg.text_dropout, cfg.caption_max_len
    )
    model = BoxGenerator(
        text_encoder, toyscenes.NUM_CLASSES, cfg.gmm_k, cfg.box_attn_dim,
        cfg.sigma_floor, cfg.t_max, cfg.coord_grad_scale,
    )
    tensors, _, _ = ckpt.load_checkpoint(run_dir / "box.ckpt")
    ckpt.load_module(model, tensors, "box")
    model.eval()
    return model


def _load_shape_generator(cfg: Config, run_dir: Path) -> ShapeGenerator:
    _require(run_dir / "shape.ckpt", "scenesynth train-shape")
    generator = ShapeGenerator(toyscenes.NUM_CLASSES, cfg.shape_channels, cfg.shape_noise_dim, cfg.image_size)
    tensors, _, _ = ckpt.load_checkpoint(run_dir / "shape.ckpt")
    ckpt.load_module(generator, tensors, "shape_gen")
    generator.eval()
    return generator


def _layout_for_setting(cfg: Config, st: SceneTensors, setting: int,
                        box_model, shape_model) -> Layout:
    size = cfg.image_size
    if setting == 2:
        return st.layout
    if setting == 1:
        labels = st.layout.labels
        boxes = [tuple(map(float, b)) for b in st.layout.boxes]
    else:
        decoded = box_model.sample(st.caption_ids[0], mode="greedy")
        labels = torch.tensor([d[0] for d in decoded], dtype=torch.long)
        boxes = [d[1] for d in decoded]
    if len(boxes) == 0:
        return Layout(labels=torch.zeros(0, dtype=torch.long),
                      boxes=torch.zeros(0, 4), masks=torch.zeros(0, size, size))
    occ, _ = render_box_maps(boxes, size, size, list(map(int, labels)), toyscenes.NUM_CLASSES)
    label_maps = torch.stack(
        [class_mask_tensor(occ[t : t + 1], [int(labels[t])], toyscenes.NUM_CLASSES) for t in range(len(boxes))]
    )
    with torch.no_grad():
        noise = torch.randn(len(boxes), shape_model.noise_dim)
        masks = shape_model(occ, label_maps, noise)
    return Layout(labels=labels, boxes=torch.tensor(boxes, dtype=torch.float32), masks=masks)


def _generate_for_scenes(cfg: Config, system: GanSystem, scenes, layouts):
    caption_ids = [st.caption_ids[0] for st in scenes]
    word_ids, _ = pad_id_batch(caption_ids)
    with torch.no_grad():
        enc = system.encode_text(caption_ids)
        z = torch.randn(len(scenes), cfg.noise_dim)
        states, records, _ = system.generate(enc, word_ids, layouts, z)
    return states, records


def cmd_sample(cfg: Config, args) -> int:
    torch.manual_seed(args.seed)
    vocab, _, scenes = _load_scenes(cfg, "val")
    run_dir = Path(cfg.run_dir)
    out_dir = Path(args.out or "samples")
    out_dir.mkdir(parents=True, exist_ok=True)
    system = _build_system(cfg, vocab, run_dir, load_image_ckpt=True)
    system.eval()
    box_model = _load_box_generator(cfg, vocab, run_dir) if args.setting == 0 else None
    shape_model = _load_shape_generator(cfg, run_dir) if args.setting in (0, 1) else None
    layouts = [
        _layout_for_setting(cfg, st, args.setting, box_model, shape_model) for st in scenes
    ]
    states, _ = _generate_for_scenes(cfg, system, scenes, layouts)
    for i in range(len(scenes)):
        for k, state in enumerate(states):
            save_image(state.image[i], out_dir / f"{i:04d}_stage{k}.png")
    print(f"wrote {len(scenes)} samples (setting {args.setting}) to {out_dir}")
    return 0


def cmd_eval(cfg: Config, args) -> int:
    torch.manual_seed(args.seed)
    vocab, samples, scenes = _load_scenes(cfg, "val")
    run_dir = Path(cfg.run_dir)
    out_path = Path(args.out or "report.txt")
    system = _build_system(cfg, vocab, run_dir, load_image_ckpt=True)
    system.eval()
    box_model = _load_box_generator(cfg, vocab, run_dir) if args.setting == 0 else None
    shape_model = _load_shape_generator(cfg, run_dir) if args.setting in (0, 1) else None
    layouts = [
        _layout_for_setting(cfg, st, args.setting, box_model, shape_model) for st in scenes
    ]
    states, _ = _generate_for_scenes(cfg, system, scenes, layouts)
    gen_images = states[-1].image

    train_samples = toyscenes.read_dataset(cfg.data_dir, "train")
    pool = sorted({s.captions[0] for s in samples} | {s.captions[0] for s in train_samples})
    n_distract = cfg.eval_distractors
    queries, true_ids, distract_ids, keys = [], [], [], []
    for i, sample in enumerate(samples):
        truth = sample.captions[0]
        others = [c for c in pool if c != truth]
        if len(others) < n_distract:
            raise ValueError("not enough distinct captions for the distractor count")
        start = i % max(len(others) - n_distract + 1, 1)
        picked = others[start : start + n_distract]
        queries.append(i)
        true_ids.append(caption_to_ids(truth, vocab, cfg.caption_max_len))
        distract_ids.append([caption_to_ids(c, vocab, cfg.caption_max_len) for c in picked])
        keys.append([tuple(true_ids[-1])] + [tuple(d) for d in distract_ids[-1]])

    with torch.no_grad():
        feats = system.image_encoder(gen_images)
        true_enc = system.text_encoder.encode_ids(true_ids)
        d_vecs = []
        for ids in distract_ids:
            d_vecs.append(system.text_encoder.encode_ids(ids).sentence_vector)
        distract = torch.stack(d_vecs)
        rp = r_precision(feats.global_, true_enc.sentence_vector, distract, keys)
        real_images = torch.stack([st.image for st in scenes])
        real_feats = system.image_encoder(real_images)
        fd = frechet_feature_distance(
            real_feats.raw_global.numpy(), feats.raw_global.numpy()
        )
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(f"r_precision={rp}\n")
        fh.write(f"frechet={fd}\n")
        fh.write(f"setting={args.setting}\n")
        fh.write(f"queries={len(queries)}\n")
    print(f"r_precision={rp} frechet={fd} -> {out_path}")
    return 0


def cmd_attnviz(cfg: Config, args) -> int:
    torch.manual_seed(args.seed)
    vocab, _, scenes = _load_scenes(cfg, "val")
    run_dir = Path(cfg.run_dir)
    out_dir = Path(args.out or "attnviz")
    system = _build_system(cfg, vocab, run_dir, load_image_ckpt=True)
    system.eval()
    st = scenes[0]
    states, records = _generate_for_scenes(cfg, system, [st], [st.layout])
    tokens = [t.strip("<>") for t in vocab.decode(st.caption_ids[0])]
    render_attention_maps(records, tokens, st.layout.masks, out_dir, cfg.image_size)
    save_image(states[-1].image[0], Path(out_dir) / "generated.png")
    print(f"wrote attention maps to {out_dir}")
    return 0


def cmd_gradcheck(cfg: Config, args) -> int:
    worst = 0.0
    for name, err in gradcheck_mod.run_all():
        status = "PASS" if err <= gradcheck_mod.TOLERANCE else "FAIL"
        print(f"{status} {name} rel_err={err:.3e}")
        worst = max(worst, err)
    return 0 if worst <= gradcheck_mod.TOLERANCE else 1


def cmd_config_reference(cfg: Config, args) -> int:
    print(config_reference(), end="")
    return 0


_COMMANDS = {
    "make-data": cmd_make_data,
    "train-damsm": cmd_train_damsm,
    "train-box": cmd_train_box,
    "train-shape": cmd_train_shape,
    "train-image": cmd_train_image,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "attnviz": cmd_attnviz,
    "gradcheck": cmd_gradcheck,
    "config-reference": cmd_config_reference,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scenesynth",
        description="layout-then-image text-to-image synthesis on procedural scenes",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--setting", type=int, choices=(0, 1, 2), default=2)
        p.add_argument("--variant", choices=("plain", "sn"), default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config) if args.config else Config()
    if args.variant is not None:
        from dataclasses import replace

        cfg = replace(cfg, variant=args.variant)
    cfg.validate()
    try:
        return _COMMANDS[args.command](cfg, args)
    except Exception as exc:  # surface a clean non-zero exit for driver errors
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
