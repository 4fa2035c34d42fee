"""Procedural texture dataset with injected, exactly-masked defects.

Each class is one parameterized texture family; defective images get
one to three injected regions of a single defect type with the
modified region recorded as the ground-truth mask. Everything is a
pure function of the seed, down to the bytes on disk.
"""

from __future__ import annotations

import json
import shutil
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from ..errors import DatasetError, ParameterError
from . import templates

# per-defect pixel-count targets as fractions of image area; with each
# region at >= 0.6% the 1..3-region union stays inside the advertised
# [0.5%, 10%] bounds
MIN_REGION_FRACTION = 0.006
REGION_FRACTION_RANGE = (0.008, 0.03)
TOTAL_FRACTION_BOUNDS = (0.005, 0.10)

_EIGHT = np.ones((3, 3), dtype=bool)


# ---------------------------------------------------------------------------
# texture families


def class_params(seed: int, class_idx: int) -> Dict[str, float]:
    """Per-class texture parameters, stable across images."""
    rng = np.random.default_rng([seed, 1000 + class_idx])
    family = templates.class_family(class_idx)
    p: Dict[str, float] = {"family": family}
    if family == "stripes":
        p["freq"] = float(rng.uniform(3.0, 6.0))
        p["angle"] = float(rng.uniform(0.0, np.pi))
        p["amp"] = float(rng.uniform(0.25, 0.35))
    elif family == "checker":
        p["cell"] = int(rng.integers(6, 11))
        p["amp"] = float(rng.uniform(0.22, 0.32))
    elif family == "mottle":
        p["grid"] = int(rng.integers(4, 7))
        p["amp"] = float(rng.uniform(0.22, 0.32))
    else:   # shade
        p["angle"] = float(rng.uniform(0.0, np.pi))
        p["waves"] = float(rng.uniform(1.5, 3.0))
    return p


def _coords(hw: Tuple[int, int]):
    h, w = hw
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return yy / max(h - 1, 1), xx / max(w - 1, 1)


def render_texture(params: Dict[str, float], rng: np.random.Generator,
                   hw: Tuple[int, int]) -> np.ndarray:
    """One grayscale texture image in [0, 1]."""
    h, w = hw
    family = params["family"]
    ty, tx = _coords(hw)
    if family == "stripes":
        angle = params["angle"]
        t = tx * np.cos(angle) + ty * np.sin(angle)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        img = 0.5 + params["amp"] * np.sin(2.0 * np.pi * params["freq"] * t
                                           + phase)
    elif family == "checker":
        cell = int(params["cell"])
        oy, ox = rng.integers(0, cell, size=2)
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        parity = ((yy + oy) // cell + (xx + ox) // cell) % 2
        img = 0.5 + params["amp"] * (2.0 * parity - 1.0)
    elif family == "mottle":
        g = int(params["grid"])
        coarse = rng.random((g, g))
        from ..patchsim import resize_bilinear
        field = resize_bilinear(coarse[:, :, None], hw)[:, :, 0]
        img = 0.5 + params["amp"] * (2.0 * field - 1.0)
    else:   # shade
        angle = params["angle"]
        t = tx * np.cos(angle) + ty * np.sin(angle)
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        img = 0.35 + 0.3 * t + 0.08 * np.sin(
            2.0 * np.pi * params["waves"] * t + phase)
    img = img + rng.normal(0.0, 0.02, size=hw)
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# defect regions


def _ellipse_region(rng: np.random.Generator,
                    hw: Tuple[int, int]) -> np.ndarray:
    h, w = hw
    area = h * w
    count = rng.uniform(*REGION_FRACTION_RANGE) * area
    aspect = rng.uniform(0.4, 1.0)
    a = np.sqrt(count / (np.pi * aspect))
    b = aspect * a
    a = min(a, min(h, w) / 3.0)
    angle = rng.uniform(0.0, np.pi)
    margin = int(np.ceil(max(a, b))) + 1
    cy = rng.uniform(margin, h - margin)
    cx = rng.uniform(margin, w - margin)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _scratch_region(rng: np.random.Generator,
                    hw: Tuple[int, int]) -> np.ndarray:
    h, w = hw
    length = rng.uniform(0.4, 0.85) * min(h, w)
    angle = rng.uniform(0.0, np.pi)
    dy, dx = np.sin(angle) * length, np.cos(angle) * length
    y0 = rng.uniform(2, h - 3 - abs(dy))
    x0 = rng.uniform(2, w - 3 - abs(dx)) if dx >= 0 else \
        rng.uniform(2 + abs(dx), w - 3)
    y1, x1 = y0 + dy, x0 + dx
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # distance from each pixel to the segment
    vy, vx = y1 - y0, x1 - x0
    tt = np.clip(((yy - y0) * vy + (xx - x0) * vx)
                 / max(vy * vy + vx * vx, 1e-9), 0.0, 1.0)
    dist = np.hypot(yy - (y0 + tt * vy), xx - (x0 + tt * vx))
    width = float(rng.choice((0.7, 1.2)))
    return dist <= width


def _apply_defect(img: np.ndarray, region: np.ndarray, defect_type: int,
                  rng: np.random.Generator, class_idx: int,
                  seed: int) -> np.ndarray:
    out = img.copy()
    if defect_type == 0:    # contrast shift
        gamma = float(rng.choice((0.3, 2.2)))
        delta = float(rng.choice((-0.3, 0.3))) + rng.uniform(-0.05, 0.05)
        out[region] = np.clip(0.5 + (img[region] - 0.5) * gamma + delta,
                              0.0, 1.0)
    elif defect_type == 1:  # texture swap
        other_idx = class_idx + 1 + int(rng.integers(0, 3))
        swap = render_texture(class_params(seed, other_idx), rng, img.shape)
        out[region] = swap[region]
    elif defect_type == 2:  # hole
        out[region] = rng.uniform(0.02, 0.08)
    elif defect_type == 3:  # scratch
        out[region] = float(rng.choice((0.02, 0.97)))
    else:
        raise ParameterError(f"unknown defect type {defect_type}")
    return out


def make_sample(seed: int, class_idx: int, split: str, index: int,
                hw: Tuple[int, int],
                abnormal: bool) -> Tuple[np.ndarray, np.ndarray, int]:
    """Render one image. Returns (image, mask, defect_type)."""
    split_id = 0 if split == "train" else 1
    rng = np.random.default_rng([seed, class_idx, split_id, index])
    img = render_texture(class_params(seed, class_idx), rng, hw)
    if not abnormal:
        return img, np.zeros(hw, dtype=bool), -1
    defect_type = int(rng.integers(0, 4))
    count = int(rng.integers(1, 4))
    region = np.zeros(hw, dtype=bool)
    for _ in range(count):
        piece = _scratch_region(rng, hw) if defect_type == 3 \
            else _ellipse_region(rng, hw)
        region |= piece
    floor = int(np.ceil(TOTAL_FRACTION_BOUNDS[0] * hw[0] * hw[1]))
    while region.sum() < floor:
        region = ndimage.binary_dilation(region, structure=_EIGHT)
    img = _apply_defect(img, region, defect_type, rng, class_idx, seed)
    return img, region, defect_type


# ---------------------------------------------------------------------------
# on-disk dataset


def _save_png(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(path, format="PNG")


def generate_dataset(root, num_classes: int = 4, per_class: int = 80,
                     image_hw: Tuple[int, int] = (64, 64), seed: int = 0,
                     overwrite: bool = False) -> Dict[str, int]:
    """Write the full dataset tree plus annotations.json.

    Layout: <root>/<class>/{train,test}/<id>.png with masks under a
    masks/ sibling; texts and defect ids in <root>/annotations.json.
    """
    if num_classes < 2:
        raise ParameterError("need at least 2 classes for a disjoint split")
    if per_class < 4:
        raise ParameterError("need at least 4 images per class")
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not overwrite:
            raise DatasetError(f"output dir {root} is not empty; "
                               "pass overwrite to replace it")
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)

    records = []
    n_split = per_class // 2
    n_abnormal = n_split // 2
    for class_idx in range(num_classes):
        family = templates.class_family(class_idx)
        class_id = f"{family}{class_idx:02d}"
        normal = templates.normal_text(class_idx)
        for split in ("train", "test"):
            img_dir = root / class_id / split
            mask_dir = img_dir / "masks"
            mask_dir.mkdir(parents=True)
            for index in range(n_split):
                abnormal = index >= n_split - n_abnormal
                img, mask, dtype = make_sample(seed, class_idx, split,
                                               index, image_hw, abnormal)
                image_id = f"{class_id}_{split}_{index:03d}"
                rgb = np.repeat(np.round(img * 255.0).astype(np.uint8)
                                [:, :, None], 3, axis=2)
                _save_png(img_dir / f"{image_id}.png", rgb)
                _save_png(mask_dir / f"{image_id}.png",
                          mask.astype(np.uint8) * 255)
                records.append({
                    "id": image_id,
                    "class": class_id,
                    "class_index": class_idx,
                    "split": split,
                    "defect_type": dtype,
                    "normal_text": normal,
                    "instruction": templates.seg_instruction(normal),
                    "answer": templates.seg_answer(),
                })

    payload = {
        "meta": {"num_classes": num_classes, "per_class": per_class,
                 "image_hw": list(image_hw), "seed": seed},
        "images": records,
    }
    with open(root / "annotations.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return {"classes": num_classes, "images": len(records)}
