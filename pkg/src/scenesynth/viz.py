"""Attention-map and image-grid emission."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .toyscenes import image_to_uint8


def save_image(tensor: torch.Tensor, path: str) -> None:
    """Write a (3, H, W) tensor in [-1, 1] as an 8-bit RGB file."""
    arr = tensor.detach().cpu().numpy().transpose(1, 2, 0)
    Image.fromarray(image_to_uint8(arr)).save(path)


def brightness_map(values: np.ndarray) -> np.ndarray:
    """Attention weights in [0, 1] to 8-bit brightness, rounding half-up."""
    u = np.asarray(values, dtype=np.float64) * 255.0
    return np.clip(np.floor(u + 0.5), 0, 255).astype(np.uint8)


def render_attention_maps(records: dict, tokens: list[str], masks: torch.Tensor,
                          out_dir: str, image_size: int = 64) -> dict:
    """Write per-word grid attention maps and per-object highlight maps.

    records: one sample's attention output. Grid attention rows must sum to 1;
    each word gets a brightness map. Each object gets its mask rendered as the
    highlight, named by the word its attention peaks at. Returns the emitted
    index (also written as index.json).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = {"grid": [], "object": []}

    beta_pat = records["beta_pat"][-1][0]              # (N, Ts) final refiner
    rows = beta_pat.detach().cpu().numpy()
    if not np.allclose(rows.sum(axis=1), 1.0, atol=1e-5):
        raise ValueError("grid attention rows must sum to 1")
    n = rows.shape[0]
    side = int(round(n ** 0.5))
    for i, token in enumerate(tokens):
        grid = rows[:, i].reshape(side, side)
        up = np.kron(brightness_map(grid), np.ones((image_size // side, image_size // side), dtype=np.uint8))
        fname = f"grid_{i:02d}_{token}.png"
        Image.fromarray(up, mode="L").save(out / fname)
        index["grid"].append({"word": token, "file": fname})

    beta_obj = records["beta_obj"][0]
    for t in range(beta_obj.size(0)):
        weights = beta_obj[t].detach().cpu().numpy()
        word = tokens[int(weights.argmax())]
        mask = masks[t].detach().cpu().numpy()
        mask_img = brightness_map(mask)
        if mask_img.shape[0] != image_size:
            mask_img = np.kron(
                mask_img, np.ones((image_size // mask_img.shape[0],) * 2, dtype=np.uint8)
            )
        fname = f"obj_{t:02d}_{word}.png"
        Image.fromarray(mask_img, mode="L").save(out / fname)
        index["object"].append({"object": t, "word": word, "file": fname})

    with open(out / "index.json", "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=1)
    return index
