"""Single-image inference: answer text, binary mask, heatmap."""

from __future__ import annotations

from pathlib import Path
from typing import Dict

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..errors import DatasetError
from ..numcore import set_default_dtype
from ..numcore.checkpoint import load_checkpoint
from ..patchsim import resize_bilinear
from .config import RunConfig
from .report import heatmap_figure
from .train import checkpoint_model_path, new_model

MASK_THRESHOLD = 0.5

# generic prompt for images without a known reference description
DEFAULT_INSTRUCTION = "is there any defect ? segment the anomaly ."


def read_image(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            return np.asarray(rgb, dtype=np.float64) / 255.0
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc


def run_infer(config: RunConfig, checkpoint, image_path,
              instruction=None, out_dir=None, log=print) -> Dict:
    """Answer + mask.png + heatmap.png for one image.

    Output PNGs match the input's pixel dimensions; the model computes
    at its own resolution and the probability map is resized back.
    """
    set_default_dtype(np.float64)
    image = read_image(image_path)
    in_hw = image.shape[:2]
    model = new_model(config)
    model.load_state(load_checkpoint(checkpoint_model_path(checkpoint)))

    work = image if in_hw == model.config.image_hw \
        else resize_bilinear(image, model.config.image_hw)
    if instruction is None:
        instruction = DEFAULT_INSTRUCTION
    answer, probs = model.answer_and_mask(work, instruction)
    if probs is None:
        probs = np.zeros(model.config.image_hw)
    if probs.shape != in_hw:
        probs = resize_bilinear(probs, in_hw)

    out_dir = Path(out_dir) if out_dir is not None else Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    mask = (probs >= MASK_THRESHOLD).astype(np.uint8) * 255
    Image.fromarray(mask, mode="L").save(out_dir / "mask.png")
    heatmap_figure(out_dir / "heatmap.png", probs)
    (out_dir / "answer.txt").write_text(answer + "\n", encoding="utf-8")
    log(f"answer: {answer}")
    log(f"wrote {out_dir / 'mask.png'} and {out_dir / 'heatmap.png'}")
    return {"answer": answer, "probs": probs, "out_dir": out_dir,
            "mask_fraction": float((probs >= MASK_THRESHOLD).mean())}
