"""Flat key=value configuration with desk-scale defaults and a full-scale preset."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace


@dataclass
class Config:
    # dataset
    image_size: int = 64
    train_scenes: int = 64
    val_scenes: int = 16
    min_objects: int = 1
    max_objects: int = 4
    captions_per_scene: int = 2
    caption_max_len: int = 24
    templates: str = ""
    # text encoder
    embed_dim: int = 128
    text_hidden: int = 64
    text_dropout: float = 0.5
    n_e: int = 128
    n_l: int = 50
    # image-text matching model
    gamma1: float = 5.0
    gamma2: float = 5.0
    gamma3: float = 10.0
    damsm_steps: int = 500
    damsm_batch: int = 8
    damsm_lr: float = 0.002
    encoder_channels: int = 32
    # box generator
    gmm_k: int = 4
    t_max: int = 8
    box_attn_dim: int = 64
    box_steps: int = 3000
    box_batch: int = 16
    box_lr: float = 0.001
    sigma_floor: float = 1e-3
    coord_grad_scale: float = 0.1
    # shape generator
    shape_steps: int = 200
    shape_batch: int = 4
    shape_lr: float = 0.0002
    shape_channels: int = 16
    shape_noise_dim: int = 8
    perceptual_weight: float = 10.0
    # image generator and discriminators
    n_g: int = 16
    n_d: int = 16
    m0: int = 3
    m1: int = 2
    m2: int = 2
    base_resolution: int = 16
    noise_dim: int = 32
    gan_steps: int = 500
    gan_batch: int = 8
    gan_lr: float = 0.0002
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    lambda_obj: float = 0.1
    lambda_txt: float = 0.1
    lambda_pix: float = 1.0
    lambda_damsm: float = 100.0
    variant: str = "plain"
    fine_tune_text: bool = False
    roi_bins: int = 5
    roi_sampling: int = 2
    interpolate_roi_inputs: bool = False
    # bookkeeping
    data_dir: str = "data"
    run_dir: str = "runs"
    eval_distractors: int = 9

    @property
    def text_dim(self) -> int:
        """Word/sentence vector size: two concatenated recurrent directions."""
        return 2 * self.text_hidden

    @property
    def stage_resolutions(self) -> tuple[int, int, int]:
        b = self.base_resolution
        return (b, 2 * b, 4 * b)

    def template_ids(self) -> list[int] | None:
        if not self.templates:
            return None
        return [int(t) for t in self.templates.split(",") if t.strip() != ""]

    def validate(self) -> None:
        if self.variant not in ("plain", "sn"):
            raise ValueError(f"variant must be 'plain' or 'sn', got {self.variant!r}")
        for name in ("m0", "m1", "m2", "n_g", "n_d", "gmm_k", "roi_bins", "roi_sampling"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.base_resolution < 8 or self.base_resolution % 8 != 0:
            raise ValueError("base_resolution must be a positive multiple of 8")
        if self.image_size != 4 * self.base_resolution:
            raise ValueError("image_size must equal the final stage resolution (4x base)")


HELP = {
    "image_size": "side of rendered scene images (final stage resolution)",
    "train_scenes": "number of training scenes emitted by make-data",
    "val_scenes": "number of validation scenes emitted by make-data",
    "min_objects": "minimum objects per scene",
    "max_objects": "maximum objects per scene",
    "captions_per_scene": "caption variants written per scene (1-5)",
    "caption_max_len": "maximum caption length in tokens (incl. end marker)",
    "templates": "comma-separated caption template ids; empty selects all",
    "embed_dim": "word embedding size fed to the recurrent text encoder",
    "text_hidden": "recurrent hidden size per direction (word vectors are 2x this)",
    "text_dropout": "embedding dropout, active only while pretraining the matcher",
    "n_e": "conditioning vector size produced from the sentence vector",
    "n_l": "class label embedding size",
    "gamma1": "region attention sharpness in the matching model",
    "gamma2": "word-to-image relevance aggregation sharpness",
    "gamma3": "batch posterior sharpness in the matching loss",
    "damsm_steps": "matcher pretraining steps",
    "damsm_batch": "matcher pretraining batch size",
    "damsm_lr": "matcher Adam learning rate",
    "encoder_channels": "base channel count of the region feature CNN",
    "gmm_k": "mixture components per coordinate head of the box generator",
    "t_max": "maximum objects decoded per scene",
    "box_attn_dim": "hidden size of the box decoder attention scorer",
    "box_steps": "box generator training steps",
    "box_batch": "box generator batch size",
    "box_lr": "box generator Adam learning rate",
    "sigma_floor": "lower bound on mixture standard deviations",
    "coord_grad_scale": "fraction of the coordinate-head gradient reaching the decoder trunk",
    "shape_steps": "shape generator training steps",
    "shape_batch": "shape generator batch size (scenes)",
    "shape_lr": "shape generator Adam learning rate",
    "shape_channels": "base channel count inside the shape generator",
    "shape_noise_dim": "per-object noise channels for the shape generator",
    "perceptual_weight": "weight of the fixed-extractor feature loss on shapes",
    "n_g": "generator base channel count",
    "n_d": "discriminator base channel count",
    "m0": "residual blocks in the base stage",
    "m1": "residual blocks in the first refiner",
    "m2": "residual blocks in the second refiner",
    "base_resolution": "image side of the base stage (doubles per refiner)",
    "noise_dim": "generator input noise size",
    "gan_steps": "image GAN training steps",
    "gan_batch": "image GAN batch size",
    "gan_lr": "Adam learning rate for generator and discriminators",
    "adam_beta1": "Adam beta1 for the image GAN",
    "adam_beta2": "Adam beta2 for the image GAN",
    "lambda_obj": "weight of the object-wise generator loss term",
    "lambda_txt": "weight of the patch text-conditional generator loss term",
    "lambda_pix": "weight of the patch shape-conditional generator loss term",
    "lambda_damsm": "weight of the image-text matching loss on generated images",
    "variant": "discriminator variant: plain or sn (spectral-normalized projection)",
    "fine_tune_text": "update the text encoder during image GAN training",
    "roi_bins": "output grid size of region-of-interest pooling",
    "roi_sampling": "bilinear samples per pooling bin axis",
    "interpolate_roi_inputs": "upscale object discriminator inputs 2x before encoding",
    "data_dir": "default dataset directory",
    "run_dir": "default checkpoint/log directory",
    "eval_distractors": "distractor captions per retrieval query",
}


def paper_scale() -> Config:
    """Full-scale preset mirroring the published architecture widths."""
    return replace(
        Config(),
        embed_dim=300,
        text_hidden=128,
        n_e=256,
        n_l=50,
        n_g=48,
        n_d=96,
        m0=7,
        m1=3,
        m2=3,
        base_resolution=64,
        image_size=256,
        noise_dim=100,
        interpolate_roi_inputs=True,
    )


def _parse_value(raw: str, typ: type):
    raw = raw.strip()
    if typ is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"cannot parse boolean from {raw!r}")
    return typ(raw)


def parse_config_text(text: str, base: Config | None = None, origin: str = "<config>") -> Config:
    """Parse flat key=value lines into a Config, starting from `base`."""
    cfg = base if base is not None else Config()
    by_name = {f.name: f for f in fields(Config)}
    overrides = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{origin}:{lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in by_name:
            raise ValueError(f"{origin}:{lineno}: unknown config key {key!r}")
        overrides[key] = _parse_value(raw, _field_type(by_name[key]))
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def load_config(path: str, base: Config | None = None) -> Config:
    """Parse a flat key=value file into a Config, starting from `base`."""
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base=base, origin=str(path))


def _field_type(field) -> type:
    mapping = {"int": int, "float": float, "str": str, "bool": bool}
    return mapping[field.type] if isinstance(field.type, str) else field.type


def dump_config(cfg: Config) -> str:
    lines = []
    for f in fields(Config):
        lines.append(f"{f.name}={getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"


def config_reference() -> str:
    """Document every key, its default, and its meaning (one line per key)."""
    lines = []
    default = Config()
    for f in fields(Config):
        help_text = HELP.get(f.name, "")
        lines.append(f"{f.name}={getattr(default, f.name)}  # {help_text}")
    return "\n".join(lines) + "\n"
