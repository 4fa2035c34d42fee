"""Built-in diagnostic suite: gradients, detachment, metric oracles.

Runs at 64-bit regardless of the training precision. Each check
prints one PASS/FAIL line; the command exits nonzero if anything
fails. ``inject_bug=True`` deliberately corrupts the first gradient
check's value function (a value/graph inconsistency the finite
difference must catch) — a negative control proving the harness can
fail.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from .. import patchsim
from ..databench.dataset import EvalRecord
from ..databench.metrics import auroc, average_precision, aupro
from ..encoders import Vocabulary
from ..numcore import Tensor, precision
from ..numcore import functional as F
from ..numcore.checkpoint import load_checkpoint, save_checkpoint
from ..numcore.gradcheck import grad_check
from ..pipeline import AnomalyModel, ModelConfig, sample_losses
from ..databench import generator, templates
from ..databench.dataset import AnomalySample
from ..seghead import LossWeights


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _tiny_model(seed: int = 0) -> AnomalyModel:
    vocab = Vocabulary(templates.vocabulary_words())
    cfg = ModelConfig(image_hw=(32, 32), patch=8, enc_width=12,
                      enc_levels=4, lm_width=12, lm_depth=1,
                      backbone_ch=16, seg_blocks=1, fuse_levels=2,
                      box_count=3)
    return AnomalyModel(np.random.default_rng(seed), vocab, cfg)


def _tiny_sample(abnormal: bool = True):
    img, mask, dt = generator.make_sample(0, 0, "train", 21, (32, 32),
                                          abnormal)
    img3 = np.repeat(img[:, :, None], 3, axis=2)
    normal = templates.normal_text(0)
    task = templates.build_task("seg", normal, dt)
    sample = AnomalySample(image=img3, mask=mask.astype(np.float64),
                           defect_type=dt, class_id="c0",
                           normal_text=normal,
                           instruction=task.instruction,
                           answer=task.answer)
    return sample, task


def _queue(model) -> patchsim.ReferenceQueue:
    from ..pipeline import make_featurize
    samples = []
    for i in range(4):
        img, mask, dt = generator.make_sample(0, 0, "train", i, (32, 32),
                                              abnormal=i >= 2)
        img3 = np.repeat(img[:, :, None], 3, axis=2)
        s = AnomalySample(image=img3, mask=mask.astype(np.float64),
                          defect_type=dt, class_id="c0",
                          normal_text=templates.normal_text(0),
                          instruction="x", answer="x")
        samples.append((s, s.label))
    return patchsim.build_queue("c0", samples, make_featurize(model),
                                np.random.default_rng(5), fraction=0.5)


# ---------------------------------------------------------------- checks


def check_projector_gradients(inject_bug: bool) -> str:
    model = _tiny_model()
    imgs = np.random.default_rng(1).random((1, 32, 32, 3))
    weight = model.ltc.to_llm.weight

    def fn(w):
        model.ltc.to_llm.weight = w
        out = model.ltc.project(model.enc(Tensor(imgs)))
        loss = (out * out).mean()
        if inject_bug:
            # value/graph inconsistency the difference quotient sees
            loss.data = loss.data + 1e-3 * float((w.data ** 2).sum())
        return loss

    try:
        report = grad_check(fn, [weight])
    finally:
        model.ltc.to_llm.weight = weight
    if not report.passed:
        raise AssertionError(str(report))
    return str(report)


def check_alignment_gradients(inject_bug: bool) -> str:
    model = _tiny_model()
    queue = _queue(model)
    sample, _ = _tiny_sample()
    boxes = patchsim.sample_patch_boxes((32, 32), 2,
                                        np.random.default_rng(3))
    weight = model.sim.vis_to_lm.weight

    def fn(w):
        model.sim.vis_to_lm.weight = w
        fmap = model.feature_map(Tensor(sample.image[None]))
        return patchsim.image_alignment_loss(
            sample.image, fmap, boxes, queue, model.sim, model.enc,
            model.ltc, model.lm)

    try:
        report = grad_check(fn, [weight])
    finally:
        model.sim.vis_to_lm.weight = weight
    if not report.passed:
        raise AssertionError(str(report))
    return str(report)


def check_alignment_detachment(inject_bug: bool) -> str:
    model = _tiny_model()
    queue = _queue(model)
    sample, _ = _tiny_sample()
    boxes = patchsim.sample_patch_boxes((32, 32), 2,
                                        np.random.default_rng(3))
    model.zero_grad()
    fmap = model.feature_map(Tensor(sample.image[None]))
    loss = patchsim.image_alignment_loss(
        sample.image, fmap, boxes, queue, model.sim, model.enc,
        model.ltc, model.lm)
    loss.backward()
    dirty = []
    for name, p in model.named_parameters():
        visual_side = name.startswith("bb.") \
            or name.startswith("sim.patch_head.") \
            or name.startswith("sim.global_head.")
        if visual_side and p.grad is not None and np.abs(p.grad).sum() > 0:
            dirty.append(name)
    model.zero_grad()
    if dirty:
        raise AssertionError(f"visual-branch gradients nonzero: {dirty[:4]}")
    return "visual branch grads identically zero under alignment backward"


def check_decoder_gradients(inject_bug: bool) -> str:
    model = _tiny_model()
    sample, task = _tiny_sample()
    vis = np.random.default_rng(2).random((4, 12))
    weight = model.seg.out_tokens.weight

    def fn(w):
        model.seg.out_tokens.weight = w
        seq = model.build_sequence(task.instruction, task.answer,
                                   Tensor(vis))
        _, hidden = model.forward_text(seq)
        prompt = model.seg.extract_prompt(hidden, seq, model.vocab.seg_id)
        fmap = model.feature_map(Tensor(sample.image[None]))
        pred = model.seg.decode(prompt, fmap)
        from ..seghead import seg_loss
        return seg_loss(pred, sample.mask, LossWeights())

    try:
        report = grad_check(fn, [weight])
    finally:
        model.seg.out_tokens.weight = weight
    if not report.passed:
        raise AssertionError(str(report))
    return str(report)


def check_total_loss_gradients(inject_bug: bool) -> str:
    model = _tiny_model()
    queue = _queue(model)
    sample, task = _tiny_sample()
    weight = model.lm.blocks[0].attn.wq.weight

    def fn(w):
        model.lm.blocks[0].attn.wq.weight = w
        losses = sample_losses(model, sample, task, queue,
                               np.random.default_rng(11), LossWeights())
        return losses.total

    try:
        report = grad_check(fn, [weight])
    finally:
        model.lm.blocks[0].attn.wq.weight = weight
    if not report.passed:
        raise AssertionError(str(report))
    return str(report)


def check_auroc_oracle(inject_bug: bool) -> str:
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(30):
        n = int(rng.integers(4, 33))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = rng.integers(0, 5, size=n) / 4.0
        pos = scores[labels == 1]
        neg = scores[labels == 0]
        wins = (pos[:, None] > neg[None, :]).sum() \
            + 0.5 * (pos[:, None] == neg[None, :]).sum()
        want = wins / (pos.size * neg.size)
        worst = max(worst, abs(auroc(labels, scores) - want))
    if worst > 1e-9:
        raise AssertionError(f"auroc oracle gap {worst:.3e}")
    return f"30 instances, worst gap {worst:.1e}"


def check_ap_oracle(inject_bug: bool) -> str:
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(30):
        n = int(rng.integers(3, 33))
        labels = rng.integers(0, 2, size=n)
        if labels.sum() == 0:
            labels[0] = 1
        scores = rng.integers(0, 6, size=n) / 5.0
        ap = 0.0
        prev_r = 0.0
        for t in sorted(set(scores.tolist()), reverse=True):
            admitted = labels[scores >= t]
            tp = int(admitted.sum())
            ap += (tp / labels.sum() - prev_r) * (tp / admitted.size)
            prev_r = tp / labels.sum()
        worst = max(worst, abs(average_precision(labels, scores) - ap))
    if worst > 1e-9:
        raise AssertionError(f"ap oracle gap {worst:.3e}")
    return f"30 instances, worst gap {worst:.1e}"


def check_aupro_oracle(inject_bug: bool) -> str:
    rng = np.random.default_rng(2)
    mask = np.zeros((8, 8))
    mask[2:4, 2:5] = 1.0
    rec = EvalRecord(image_id="x", class_id="c", label=1, score=1.0,
                     score_map=mask.copy(), mask=mask)
    perfect = aupro([rec])
    if abs(perfect - 1.0) > 1e-12:
        raise AssertionError(f"gt-injection aupro {perfect} != 1")
    rec0 = EvalRecord(image_id="y", class_id="c", label=1, score=0.0,
                      score_map=np.zeros((8, 8)), mask=mask)
    empty = aupro([rec0])
    if abs(empty) > 1e-12:
        raise AssertionError(f"empty-prediction aupro {empty} != 0")
    half = np.zeros((8, 8))
    half[2, 2:5] = 1.0
    rech = EvalRecord(image_id="z", class_id="c", label=1, score=1.0,
                      score_map=half, mask=mask)
    got = aupro([rech])
    if abs(got - 0.5) > 1e-12:
        raise AssertionError(f"half-overlap aupro {got} != 0.5")
    return "frozen cases: gt=1.0, empty=0.0, half=0.5"


def check_checkpoint_roundtrip(inject_bug: bool) -> str:
    import tempfile
    from pathlib import Path
    rng = np.random.default_rng(3)
    arrays = {f"p{i}": rng.standard_normal((3, i + 1)).astype(np.float32)
              for i in range(4)}
    with tempfile.TemporaryDirectory() as td:
        a = Path(td) / "a.bin"
        b = Path(td) / "b.bin"
        save_checkpoint(a, arrays)
        save_checkpoint(b, load_checkpoint(a))
        if a.read_bytes() != b.read_bytes():
            raise AssertionError("file -> arrays -> file is not bit-exact")
    return "file round-trip bit-exact"


CHECKS: List = [
    ("projector-gradients", check_projector_gradients),
    ("alignment-gradients", check_alignment_gradients),
    ("alignment-detachment", check_alignment_detachment),
    ("mask-decoder-gradients", check_decoder_gradients),
    ("total-loss-gradients", check_total_loss_gradients),
    ("metric-auroc-oracle", check_auroc_oracle),
    ("metric-ap-oracle", check_ap_oracle),
    ("metric-aupro-oracle", check_aupro_oracle),
    ("checkpoint-roundtrip", check_checkpoint_roundtrip),
]


def run_selfcheck(inject_bug: bool = False,
                  log=print) -> List[CheckResult]:
    """Run every check at 64-bit; returns per-check results."""
    results: List[CheckResult] = []
    with precision(np.float64):
        for name, fn in CHECKS:
            t0 = time.time()
            try:
                detail = fn(inject_bug)
                passed = True
            except AssertionError as exc:
                detail = str(exc)
                passed = False
            dt = time.time() - t0
            results.append(CheckResult(name, passed, detail, dt))
            status = "PASS" if passed else "FAIL"
            log(f"[{status}] {name} ({dt:.2f}s): {detail}")
    failures = sum(1 for r in results if not r.passed)
    log(f"{len(results) - failures}/{len(results)} checks passed")
    return results
