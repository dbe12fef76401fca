"""Procedural scene dataset: colored geometric objects with exact boxes, masks,
and templated captions whose word-object alignment is known by construction.

Directory layout written by `write_dataset`:
    images/NNNN.png        8-bit RGB scene render
    masks/NNNN_t.png       8-bit grayscale mask, one file per object
    annotations/NNNN.json  labels, normalized boxes, captions, alignment indices
    manifest.json          split listing plus class metadata
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

SHAPE_WORDS = ("circle", "square", "triangle", "diamond", "cross", "ring")
COLOR_WORDS = ("red", "green", "blue", "yellow", "purple", "orange")
NUM_CLASSES = len(SHAPE_WORDS) * len(COLOR_WORDS)

# colors in [-1, 1] image units
_COLOR_RGB = {
    "red": (1.0, -0.8, -0.8),
    "green": (-0.8, 1.0, -0.8),
    "blue": (-0.8, -0.8, 1.0),
    "yellow": (1.0, 1.0, -0.8),
    "purple": (0.8, -0.8, 1.0),
    "orange": (1.0, 0.2, -0.8),
}
_BACKGROUND = -0.95

# caption templates: (object count, text with {oK} slots, placement constraint)
TEMPLATES = (
    (1, "a {o0}", "none"),
    (2, "a {o0} and a {o1}", "none"),
    (2, "a {o0} to the left of a {o1}", "left"),
    (2, "a {o0} to the right of a {o1}", "right"),
    (2, "a {o0} above a {o1}", "above"),
    (2, "a {o0} below a {o1}", "below"),
    (1, "a small {o0}", "small"),
    (1, "a large {o0}", "large"),
    (3, "a {o0} and a {o1} and a {o2}", "none"),
    (3, "a {o0} between a {o1} and a {o2}", "between"),
)

_CAPTION_PREFIXES = ("", "a picture of ", "there is ", "a drawing of ", "an image of ")


class SceneGenerationError(RuntimeError):
    """Raised when object placement cannot satisfy the scene constraints."""


def label_id(shape_idx: int, color_idx: int) -> int:
    return shape_idx * len(COLOR_WORDS) + color_idx


def class_parts(label: int) -> tuple[str, str]:
    """Return (color word, shape word) for a class label."""
    shape_idx, color_idx = divmod(label, len(COLOR_WORDS))
    return COLOR_WORDS[color_idx], SHAPE_WORDS[shape_idx]


def class_name(label: int) -> str:
    color, shape = class_parts(label)
    return f"{color} {shape}"


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and punctuation."""
    return re.findall(r"[a-z0-9]+", text.lower())


@dataclass
class SceneSample:
    image: np.ndarray              # (H, W, 3) float32 in [-1, 1]
    labels: list[int]
    boxes: list[tuple[float, float, float, float]]   # normalized (x, y, w, h)
    masks: np.ndarray              # (T, H, W) float32 in {0, 1}
    captions: list[str]
    alignments: list[list[int]]    # per caption: token index of each object's shape word
    seed: int = 0
    name: str = ""


def _box_iou(a, b) -> float:
    ax0, ay0, aw, ah = a
    bx0, by0, bw, bh = b
    ix = max(0.0, min(ax0 + aw, bx0 + bw) - max(ax0, bx0))
    iy = max(0.0, min(ay0 + ah, by0 + bh) - max(ay0, by0))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def _centers(boxes):
    return [(x + w / 2, y + h / 2) for x, y, w, h in boxes]


def _relation_ok(relation: str, boxes) -> bool:
    c = _centers(boxes)
    margin = 0.05
    if relation in ("none", "small", "large"):
        return True
    if relation == "left":
        return c[0][0] < c[1][0] - margin
    if relation == "right":
        return c[0][0] > c[1][0] + margin
    if relation == "above":
        return c[0][1] < c[1][1] - margin
    if relation == "below":
        return c[0][1] > c[1][1] + margin
    if relation == "between":
        return c[1][0] + margin < c[0][0] < c[2][0] - margin
    raise ValueError(f"unknown relation {relation!r}")


# canonical center slots per relation; captions determine placement up to a
# small jitter, which keeps text-to-layout learnable
_ANCHORS = {
    ("none", 1): [(0.5, 0.5)],
    ("small", 1): [(0.5, 0.5)],
    ("large", 1): [(0.5, 0.5)],
    ("none", 2): [(0.3, 0.5), (0.7, 0.5)],
    ("left", 2): [(0.3, 0.5), (0.7, 0.5)],
    ("right", 2): [(0.7, 0.5), (0.3, 0.5)],
    ("above", 2): [(0.5, 0.3), (0.5, 0.7)],
    ("below", 2): [(0.5, 0.7), (0.5, 0.3)],
    ("none", 3): [(0.2, 0.5), (0.5, 0.5), (0.8, 0.5)],
    ("between", 3): [(0.5, 0.5), (0.2, 0.5), (0.8, 0.5)],
}
_CENTER_JITTER = 0.03


def _sample_boxes(rng: np.random.Generator, n: int, relation: str):
    if relation == "small":
        lo, hi = 0.10, 0.16
    elif relation == "large":
        lo, hi = 0.45, 0.60
    elif n == 1:
        lo, hi = 0.18, 0.38
    else:
        lo, hi = 0.16, 0.30
    anchors = _ANCHORS[(relation, n)]
    for _ in range(100):
        boxes = []
        for cx0, cy0 in anchors:
            # width and height jittered independently so box statistics are
            # not perfectly correlated
            s = float(rng.uniform(lo, hi))
            w = min(s * float(rng.uniform(0.9, 1.1)), 0.98)
            h = min(s * float(rng.uniform(0.9, 1.1)), 0.98)
            cx = cx0 + float(rng.uniform(-_CENTER_JITTER, _CENTER_JITTER))
            cy = cy0 + float(rng.uniform(-_CENTER_JITTER, _CENTER_JITTER))
            x = min(max(cx - w / 2, 0.0), 1.0 - w)
            y = min(max(cy - h / 2, 0.0), 1.0 - h)
            boxes.append((x, y, w, h))
        if not _relation_ok(relation, boxes):
            continue
        if any(
            _box_iou(boxes[i], boxes[j]) > 0.5
            for i in range(n)
            for j in range(i + 1, n)
        ):
            continue
        return boxes
    raise SceneGenerationError(
        f"no valid placement for relation {relation!r} after 100 attempts"
    )


def rasterize_shape(shape: str, box, size: int) -> np.ndarray:
    """Exact pixel-center rasterization of one shape inside its box."""
    x, y, w, h = box
    jj, ii = np.meshgrid(np.arange(size), np.arange(size))
    px = (jj + 0.5) / size
    py = (ii + 0.5) / size
    cx, cy = x + w / 2, y + h / 2
    inside_box = (px >= x) & (px < x + w) & (py >= y) & (py < y + h)
    dx, dy = px - cx, py - cy
    # radial coordinate normalized to the box half-sides
    rr = (dx / (w / 2)) ** 2 + (dy / (h / 2)) ** 2
    if shape == "circle":
        hit = rr <= 1.0
    elif shape == "square":
        hit = inside_box
    elif shape == "triangle":
        top, bottom = y, y + h
        span = np.clip((py - top) / h, 0.0, 1.0) * (w / 2)
        hit = (py >= top) & (py <= bottom) & (np.abs(dx) <= span)
    elif shape == "diamond":
        hit = np.abs(dx) / (w / 2) + np.abs(dy) / (h / 2) <= 1.0
    elif shape == "cross":
        hit = inside_box & ((np.abs(dx) <= w / 6) | (np.abs(dy) <= h / 6))
    elif shape == "ring":
        hit = (rr <= 1.0) & (rr >= 0.25)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return (hit & inside_box).astype(np.float32)


def generate_scene(
    seed: int,
    image_size: int = 64,
    min_objects: int = 1,
    max_objects: int = 4,
    captions_per_scene: int = 2,
    template_ids: list[int] | None = None,
) -> SceneSample:
    """Deterministically generate one scene from its seed."""
    if captions_per_scene < 1 or captions_per_scene > len(_CAPTION_PREFIXES):
        raise ValueError("captions_per_scene must be between 1 and 5")
    rng = np.random.default_rng(seed)
    allowed = template_ids if template_ids is not None else list(range(len(TEMPLATES)))
    candidates = [
        t for t in allowed if min_objects <= TEMPLATES[t][0] <= max_objects
    ]
    if not candidates:
        raise ValueError("no template satisfies the object count bounds")
    tid = int(rng.choice(candidates))
    n, text, relation = TEMPLATES[tid]

    shape_ids = rng.choice(len(SHAPE_WORDS), size=n, replace=False)
    color_ids = rng.integers(0, len(COLOR_WORDS), size=n)
    labels = [label_id(int(s), int(c)) for s, c in zip(shape_ids, color_ids)]
    boxes = _sample_boxes(rng, n, relation)

    masks = np.stack(
        [
            rasterize_shape(SHAPE_WORDS[int(s)], box, image_size)
            for s, box in zip(shape_ids, boxes)
        ]
    )
    image = np.full((image_size, image_size, 3), _BACKGROUND, dtype=np.float32)
    for t in range(n):
        color = np.array(_COLOR_RGB[COLOR_WORDS[int(color_ids[t])]], dtype=np.float32)
        image[masks[t] > 0] = color

    phrases = {f"o{t}": class_name(labels[t]) for t in range(n)}
    base = text.format(**phrases)
    captions, alignments = [], []
    for prefix in _CAPTION_PREFIXES[:captions_per_scene]:
        caption = prefix + base
        tokens = tokenize(caption)
        align = [tokens.index(SHAPE_WORDS[int(s)]) for s in shape_ids]
        captions.append(caption)
        alignments.append(align)

    return SceneSample(
        image=image,
        labels=labels,
        boxes=boxes,
        masks=masks,
        captions=captions,
        alignments=alignments,
        seed=seed,
    )


def parse_caption(caption: str) -> list[int]:
    """Invert the caption grammar, recovering the label multiset."""
    tokens = tokenize(caption)
    labels = []
    for i, tok in enumerate(tokens):
        if tok in SHAPE_WORDS:
            if i == 0 or tokens[i - 1] not in COLOR_WORDS:
                raise ValueError(f"shape word {tok!r} lacks a preceding color word")
            labels.append(
                label_id(SHAPE_WORDS.index(tok), COLOR_WORDS.index(tokens[i - 1]))
            )
    return sorted(labels)


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    """Map [-1, 1] floats to 8-bit, rounding half-up."""
    u = (np.asarray(image, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.floor(u + 0.5), 0, 255).astype(np.uint8)


def uint8_to_image(u8: np.ndarray) -> np.ndarray:
    return (u8.astype(np.float32) / 127.5) - 1.0


def write_dataset(samples: dict[str, list[SceneSample]], out_dir: str) -> None:
    """Write all splits plus a manifest; lossless except 8-bit image quantization."""
    root = Path(out_dir)
    for sub in ("images", "masks", "annotations"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    manifest = {
        "splits": {},
        "num_classes": NUM_CLASSES,
        "shape_words": list(SHAPE_WORDS),
        "color_words": list(COLOR_WORDS),
        "class_names": [class_name(c) for c in range(NUM_CLASSES)],
    }
    counter = 0
    for split, items in samples.items():
        names = []
        for sample in items:
            name = f"{counter:04d}"
            counter += 1
            names.append(name)
            Image.fromarray(image_to_uint8(sample.image)).save(
                root / "images" / f"{name}.png"
            )
            for t in range(len(sample.labels)):
                mask_u8 = (sample.masks[t] * 255).astype(np.uint8)
                Image.fromarray(mask_u8, mode="L").save(
                    root / "masks" / f"{name}_{t}.png"
                )
            ann = {
                "labels": sample.labels,
                "boxes": [list(b) for b in sample.boxes],
                "captions": sample.captions,
                "alignments": sample.alignments,
                "seed": sample.seed,
            }
            with open(root / "annotations" / f"{name}.json", "w", encoding="utf-8") as fh:
                json.dump(ann, fh, indent=1)
        manifest["splits"][split] = names
    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)


def read_manifest(data_dir: str) -> dict:
    with open(Path(data_dir) / "manifest.json", "r", encoding="utf-8") as fh:
        return json.load(fh)


def read_dataset(data_dir: str, split: str = "train") -> list[SceneSample]:
    root = Path(data_dir)
    manifest = read_manifest(data_dir)
    if split not in manifest["splits"]:
        raise ValueError(f"unknown split {split!r}")
    samples = []
    for name in manifest["splits"][split]:
        with open(root / "annotations" / f"{name}.json", "r", encoding="utf-8") as fh:
            ann = json.load(fh)
        image = uint8_to_image(
            np.asarray(Image.open(root / "images" / f"{name}.png"), dtype=np.uint8)
        )
        masks = []
        for t in range(len(ann["labels"])):
            m = np.asarray(Image.open(root / "masks" / f"{name}_{t}.png"), dtype=np.uint8)
            masks.append(m.astype(np.float32) / 255.0)
        masks = (
            np.stack(masks)
            if masks
            else np.zeros((0,) + image.shape[:2], dtype=np.float32)
        )
        samples.append(
            SceneSample(
                image=image,
                labels=list(ann["labels"]),
                boxes=[tuple(b) for b in ann["boxes"]],
                masks=masks,
                captions=list(ann["captions"]),
                alignments=[list(a) for a in ann["alignments"]],
                seed=ann["seed"],
                name=name,
            )
        )
    return samples


def make_dataset(cfg, master_seed: int) -> dict[str, list[SceneSample]]:
    """Generate disjoint train/val splits; per-sample seeds derive from the master seed."""
    kwargs = dict(
        image_size=cfg.image_size,
        min_objects=cfg.min_objects,
        max_objects=cfg.max_objects,
        captions_per_scene=cfg.captions_per_scene,
        template_ids=cfg.template_ids(),
    )
    base = master_seed * 1_000_003
    train = [generate_scene(base + i, **kwargs) for i in range(cfg.train_scenes)]
    val = [
        generate_scene(base + cfg.train_scenes + i, **kwargs)
        for i in range(cfg.val_scenes)
    ]
    return {"train": train, "val": val}
