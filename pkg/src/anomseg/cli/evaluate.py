"""Cross-category evaluation: seg-template inference, ranked metrics."""

from __future__ import annotations

import time
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..databench.dataset import AnomalySample, EvalRecord, load_dataset
from ..databench.metrics import (aupro, auroc, average_precision,
                                 image_score)
from ..databench.templates import seg_instruction
from ..errors import ConfigError, ProtocolError
from ..numcore import set_default_dtype
from ..numcore.checkpoint import load_checkpoint
from ..pipeline import AnomalyModel
from .config import RunConfig
from .report import METRIC_NAMES, metrics_figure, write_csv, write_json
from .train import build_vocab, checkpoint_model_path, new_model

CSV_HEADER = ("class", "images", "missing_seg") + METRIC_NAMES


def _score_one(model: AnomalyModel, sample: AnomalySample,
               oracle: bool) -> Tuple[np.ndarray, bool]:
    """Probability map for one image, plus whether the mask request
    token was missing from the generated answer."""
    if oracle:
        return sample.mask.astype(np.float64), False
    instruction = seg_instruction(sample.normal_text)
    _, probs = model.answer_and_mask(sample.image, instruction)
    if probs is None:
        # counted with an all-zero map, never skipped
        return np.zeros(sample.image.shape[:2]), True
    return probs, False


def _worker(args):
    idx, sample, oracle = args
    probs, missing = _score_one(_worker.model, sample, oracle)
    return idx, probs, missing


def _score_all(model: AnomalyModel, samples: List[AnomalySample],
               oracle: bool, workers: int) -> List[Tuple[np.ndarray, bool]]:
    if workers <= 1:
        return [_score_one(model, s, oracle) for s in samples]
    # fork inherits the model; results merge by index so completion
    # order cannot matter
    import multiprocessing as mp
    ctx = mp.get_context("fork")
    _worker.model = model
    with ctx.Pool(workers) as pool:
        out: List[Optional[Tuple[np.ndarray, bool]]] = [None] * len(samples)
        jobs = [(i, s, oracle) for i, s in enumerate(samples)]
        for idx, probs, missing in pool.imap_unordered(_worker, jobs):
            out[idx] = (probs, missing)
    return out


def class_metrics(records: List[EvalRecord]) -> Dict[str, float]:
    labels = np.array([r.label for r in records])
    scores = np.array([r.score for r in records])
    flat_mask = np.concatenate([r.mask.ravel() for r in records])
    flat_map = np.concatenate([r.score_map.ravel() for r in records])
    return {
        "image_auroc": auroc(labels, scores),
        "pixel_auroc": auroc(flat_mask.astype(int), flat_map),
        "aupro": aupro(records),
        "pixel_ap": average_precision(flat_mask.astype(int), flat_map),
    }


def run_evaluate(config: RunConfig, checkpoint, split: str = "test",
                 oracle: bool = False, workers: int = 1,
                 out_dir=None, log=print) -> Dict[str, object]:
    """Evaluate a checkpoint on the held-out classes.

    Writes metrics.json, metrics.csv, and metrics.png under ``out_dir``
    (default: <config.out>/eval_<split>). ``oracle=True`` substitutes
    the ground-truth masks for the predictions, a harness self-test
    that must produce perfect pixel metrics.
    """
    set_default_dtype(np.float64)
    if not config.data.test_classes:
        raise ConfigError("config.data.test_classes is empty")
    overlap = set(config.data.test_classes) \
        & set(config.data.train_classes)
    if overlap:
        raise ProtocolError(f"evaluation classes were trained on: "
                            f"{sorted(overlap)}")
    if config.data.root is None:
        raise ConfigError("config.data.root is not set")

    model = new_model(config)
    model.load_state(load_checkpoint(checkpoint_model_path(checkpoint)))
    samples = load_dataset(config.data.root,
                           classes=config.data.test_classes, split=split)
    started = time.time()
    scored = _score_all(model, samples, oracle, workers)

    by_class: Dict[str, List[EvalRecord]] = {}
    missing_by_class: Dict[str, int] = {}
    for sample, (probs, missing) in zip(samples, scored):
        rec = EvalRecord(image_id=sample.image_id,
                         class_id=sample.class_id, label=sample.label,
                         score=image_score(probs), score_map=probs,
                         mask=sample.mask)
        by_class.setdefault(sample.class_id, []).append(rec)
        missing_by_class[sample.class_id] = \
            missing_by_class.get(sample.class_id, 0) + int(missing)

    per_class = {cid: class_metrics(recs)
                 for cid, recs in sorted(by_class.items())}
    macro = {m: float(np.mean([per_class[c][m] for c in per_class]))
             for m in METRIC_NAMES}

    out_dir = Path(out_dir) if out_dir is not None \
        else Path(config.out) / f"eval_{split}"
    rows = [[cid, len(by_class[cid]), missing_by_class[cid]]
            + [per_class[cid][m] for m in METRIC_NAMES]
            for cid in per_class]
    rows.append(["macro", len(samples), sum(missing_by_class.values())]
                + [macro[m] for m in METRIC_NAMES])
    write_csv(out_dir / "metrics.csv", CSV_HEADER, rows)
    payload = {"per_class": per_class, "macro": macro,
               "meta": {"split": split, "oracle": oracle,
                        "images": len(samples),
                        "missing_seg": sum(missing_by_class.values()),
                        "checkpoint": str(checkpoint)}}
    write_json(out_dir / "metrics.json", payload)
    metrics_figure(out_dir / "metrics.png", per_class, macro)
    log(f"evaluated {len(samples)} images in {time.time() - started:.1f}s"
        f" -> {out_dir}")
    for m in METRIC_NAMES:
        log(f"  macro {m}: {macro[m]:.4f}")
    return {"per_class": per_class, "macro": macro, "out_dir": out_dir,
            "missing_seg": sum(missing_by_class.values())}
