"""On-disk dataset access and the cross-category split."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from ..errors import ContractError, DatasetError, ParameterError
from ..patchsim import LABEL_ABNORMAL, LABEL_NORMAL


@dataclass
class AnomalySample:
    """One image with its mask, texts, and provenance."""

    image: np.ndarray          # [H, W, 3] floats in [0, 1]
    mask: np.ndarray           # [H, W] binary floats
    class_id: str
    defect_type: int           # -1 for normal images
    normal_text: str
    instruction: str
    answer: str
    image_id: str = ""
    split: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ContractError(f"image must be [H, W, 3], "
                                f"got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise ContractError("mask and image dims differ")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ContractError("mask must be binary")
        has_defect = bool(self.mask.any())
        if has_defect != (self.defect_type >= 0):
            raise ContractError(
                f"mask nonempty={has_defect} contradicts defect type "
                f"{self.defect_type} for {self.image_id!r}")

    @property
    def label(self) -> int:
        return LABEL_ABNORMAL if self.defect_type >= 0 else LABEL_NORMAL


def _read_annotations(root: Path) -> dict:
    path = root / "annotations.json"
    if not path.exists():
        raise DatasetError(f"no annotations.json under {root}")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def list_classes(root) -> List[str]:
    payload = _read_annotations(Path(root))
    return sorted({rec["class"] for rec in payload["images"]})


def load_dataset(root, classes: Optional[Sequence[str]] = None,
                 split: Optional[str] = None) -> List[AnomalySample]:
    """Load samples, optionally filtered by class set and split."""
    root = Path(root)
    payload = _read_annotations(root)
    wanted = set(classes) if classes is not None else None
    out: List[AnomalySample] = []
    for rec in payload["images"]:
        if wanted is not None and rec["class"] not in wanted:
            continue
        if split is not None and rec["split"] != split:
            continue
        img_path = root / rec["class"] / rec["split"] / f"{rec['id']}.png"
        mask_path = img_path.parent / "masks" / f"{rec['id']}.png"
        if not img_path.exists() or not mask_path.exists():
            raise DatasetError(f"missing files for record {rec['id']!r}")
        image = np.asarray(Image.open(img_path), dtype=np.float64) / 255.0
        mask = (np.asarray(Image.open(mask_path), dtype=np.float64)
                > 127.0).astype(np.float64)
        out.append(AnomalySample(image=image, mask=mask,
                                 class_id=rec["class"],
                                 defect_type=int(rec["defect_type"]),
                                 normal_text=rec["normal_text"],
                                 instruction=rec["instruction"],
                                 answer=rec["answer"],
                                 image_id=rec["id"],
                                 split=rec["split"]))
    if not out:
        raise DatasetError("selection matched no samples")
    return out


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint train/test class partition."""

    train: Tuple
    test: Tuple

    def __post_init__(self):
        if not self.train or not self.test:
            raise ParameterError("both split sides must be nonempty")
        if set(self.train) & set(self.test):
            raise ParameterError("train and test classes overlap")


def make_split(classes: Union[int, Sequence], train_fraction: float,
               seed: int) -> SplitSpec:
    """Deterministic disjoint class partition."""
    names = list(range(classes)) if isinstance(classes, int) \
        else list(classes)
    n = len(names)
    if n < 2:
        raise ParameterError("need at least 2 classes to split")
    n_train = int(round(train_fraction * n))
    if not 1 <= n_train <= n - 1:
        raise ParameterError(
            f"train fraction {train_fraction} leaves an empty side "
            f"for {n} classes")
    order = np.random.default_rng(seed).permutation(n)
    train = tuple(sorted(names[i] for i in order[:n_train]))
    test = tuple(sorted(names[i] for i in order[n_train:]))
    return SplitSpec(train, test)


@dataclass
class EvalRecord:
    """Scores for one evaluated image."""

    image_id: str
    class_id: str
    label: int
    score: float
    score_map: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.score_map.shape != self.mask.shape:
            raise ContractError("score map and mask dims differ")
        if not np.isfinite(self.score) \
                or not np.isfinite(self.score_map).all():
            raise ContractError(f"non-finite scores for {self.image_id!r}")
