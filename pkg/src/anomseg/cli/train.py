"""Training loop: queue rebuilds, mixed tasks, scheduled AdamW."""

from __future__ import annotations

import json
import math
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .. import patchsim
from ..databench.dataset import load_dataset
from ..databench.templates import TASK_KINDS, build_task
from ..errors import ConfigError, DatasetError, NumericError
from ..numcore import set_default_dtype
from ..numcore.checkpoint import load_checkpoint, save_checkpoint
from ..numcore.optim import AdamW, cosine_lr
from ..pipeline import (AnomalyModel, ModelConfig, make_featurize,
                        sample_losses)
from ..encoders import Vocabulary
from ..databench.templates import vocabulary_words
from .config import RunConfig
from .report import loss_figure, write_csv

LOSS_COLUMNS = ("epoch", "total", "text", "seg", "align", "lr")


class TrainingAborted(RuntimeError):
    """Raised when a non-finite loss stops the run."""


def build_vocab() -> Vocabulary:
    return Vocabulary(vocabulary_words())


def new_model(config: RunConfig, vocab: Optional[Vocabulary] = None
              ) -> AnomalyModel:
    vocab = vocab or build_vocab()
    rng = np.random.default_rng([config.seed, 0])
    return AnomalyModel(rng, vocab, config.model)


# ---------------------------------------------------------------------------
# checkpoint directory layout: model.bin + optim.bin + state.json


def save_run_state(ckpt_dir, model: AnomalyModel, optimizer: AdamW,
                   epoch: int, config: RunConfig) -> None:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt_dir / "model.bin", model.state())
    save_checkpoint(ckpt_dir / "optim.bin", optimizer.export_state())
    payload = {"epoch": epoch, "config": config.to_dict()}
    with open(ckpt_dir / "state.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def checkpoint_model_path(checkpoint) -> Path:
    """Accept either the checkpoint directory or model.bin itself."""
    path = Path(checkpoint)
    if path.is_dir():
        path = path / "model.bin"
    if not path.exists():
        raise DatasetError(f"no model checkpoint at {path}")
    return path


def resume_run_state(ckpt_dir, model: AnomalyModel,
                     optimizer: AdamW) -> int:
    """Load model + optimizer state; returns the next epoch index."""
    ckpt_dir = Path(ckpt_dir)
    if ckpt_dir.is_file():
        ckpt_dir = ckpt_dir.parent
    model.load_state(load_checkpoint(ckpt_dir / "model.bin"))
    optim_path = ckpt_dir / "optim.bin"
    state_path = ckpt_dir / "state.json"
    if not optim_path.exists() or not state_path.exists():
        raise DatasetError(f"checkpoint dir {ckpt_dir} is missing "
                           "optim.bin or state.json; cannot resume")
    optimizer.import_state(load_checkpoint(optim_path))
    meta = json.loads(state_path.read_text(encoding="utf-8"))
    return int(meta["epoch"]) + 1


# ---------------------------------------------------------------------------
# the loop


def run_train(config: RunConfig, resume=None,
              log=print) -> Dict[str, object]:
    """Train per the config; returns paths and the loss table.

    Writes, under ``config.out``: checkpoint/{model.bin, optim.bin,
    state.json} (rolling, rewritten each epoch), losses.csv, and
    losses.png.
    """
    set_default_dtype(np.float64 if config.train.precision == "float64"
                      else np.float32)
    if not config.data.train_classes:
        raise ConfigError("config.data.train_classes is empty")
    if config.data.root is None:
        raise ConfigError("config.data.root is not set")
    samples = load_dataset(config.data.root,
                           classes=config.data.train_classes,
                           split="train")
    by_class: Dict[str, List] = {}
    for s in samples:
        by_class.setdefault(s.class_id, []).append((s, s.label))
    missing = set(config.data.train_classes) - set(by_class)
    if missing:
        raise DatasetError(f"train classes absent from dataset: "
                           f"{sorted(missing)}")

    vocab = build_vocab()
    model = new_model(config, vocab)
    optimizer = AdamW(list(model.named_parameters()), lr=config.train.lr,
                      weight_decay=config.train.weight_decay)
    start_epoch = 0
    if resume is not None:
        start_epoch = resume_run_state(resume, model, optimizer)
        log(f"resumed from {resume} at epoch {start_epoch}")

    n = len(samples)
    batch = config.train.batch_size
    steps_per_epoch = math.ceil(n / batch)
    total_steps = config.train.epochs * steps_per_epoch
    mix = np.array(config.train.task_mix, dtype=np.float64)
    mix = mix / mix.sum()
    align_on = config.loss.lambda_align != 0.0

    out_dir = Path(config.out)
    ckpt_dir = out_dir / "checkpoint"
    rows: List[List] = []
    if start_epoch > 0 and (out_dir / "losses.csv").exists():
        # keep the completed epochs' rows when continuing a run
        import csv as _csv
        with open(out_dir / "losses.csv", encoding="utf-8") as fh:
            for rec in list(_csv.DictReader(fh)):
                if int(rec["epoch"]) < start_epoch:
                    rows.append([int(rec["epoch"])]
                                + [float(rec[k]) for k in
                                   LOSS_COLUMNS[1:]])
    featurize = make_featurize(model)
    started = time.time()

    for epoch in range(start_epoch, config.train.epochs):
        # queues are rebuilt every epoch, even when the alignment loss
        # is switched off, so their statistics stay inspectable
        queues = patchsim.build_queues(by_class, featurize,
                                       seed=config.seed,
                                       fraction=config.train.queue_fraction,
                                       epoch=epoch)
        epoch_rng = np.random.default_rng([config.seed, 1, epoch])
        order = epoch_rng.permutation(n)
        kinds = epoch_rng.choice(len(TASK_KINDS), size=n, p=mix)
        sums = {"total": 0.0, "text": 0.0, "seg": 0.0, "align": 0.0}
        last_lr = 0.0
        for b in range(steps_per_epoch):
            picked = order[b * batch:(b + 1) * batch]
            optimizer.zero_grad()
            batch_parts = []
            for j in picked:
                s = samples[int(j)]
                task = build_task(TASK_KINDS[int(kinds[j])],
                                  s.normal_text, s.defect_type)
                queue = queues[s.class_id] if align_on else None
                try:
                    losses = sample_losses(model, s, task, queue,
                                           epoch_rng, config.loss)
                except NumericError as exc:
                    raise TrainingAborted(
                        f"non-finite loss at epoch {epoch} step {b} "
                        f"({s.image_id}): {exc}") from exc
                batch_parts.append(losses)
            combined = batch_parts[0].total
            for part in batch_parts[1:]:
                combined = combined + part.total
            (combined * (1.0 / len(batch_parts))).backward()
            step_index = epoch * steps_per_epoch + b
            last_lr = cosine_lr(step_index, total_steps, config.train.lr,
                                config.train.warmup_frac)
            optimizer.step(lr=last_lr)
            for part in batch_parts:
                for key, value in part.numbers().items():
                    sums[key] += value
        means = {k: v / n for k, v in sums.items()}
        rows.append([epoch, means["total"], means["text"], means["seg"],
                     means["align"], last_lr])
        save_run_state(ckpt_dir, model, optimizer, epoch, config)
        log(f"epoch {epoch}: total {means['total']:.4f} "
            f"text {means['text']:.4f} seg {means['seg']:.4f} "
            f"align {means['align']:.4f} lr {last_lr:.2e}")

    write_csv(out_dir / "losses.csv", LOSS_COLUMNS, rows)
    loss_figure(out_dir / "losses.png", [r[0] for r in rows],
                {"total": [r[1] for r in rows],
                 "text": [r[2] for r in rows],
                 "seg": [r[3] for r in rows],
                 "align": [r[4] for r in rows]})
    log(f"trained {config.train.epochs - start_epoch} epochs in "
        f"{time.time() - started:.1f}s; checkpoint at {ckpt_dir}")
    return {"checkpoint": ckpt_dir, "losses": rows,
            "losses_csv": out_dir / "losses.csv"}
