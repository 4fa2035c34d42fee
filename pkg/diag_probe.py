"""Throwaway: dissect the smoke checkpoint's pixel-level behaviour."""
import sys
import numpy as np

from anomseg import numcore
from anomseg.cli.config import RunConfig
from anomseg.cli.train import checkpoint_model_path, new_model
from anomseg.numcore.checkpoint import load_checkpoint
from anomseg.databench.dataset import load_dataset, list_classes
from anomseg.databench.templates import seg_instruction
from anomseg.databench.metrics import auroc

ROOT = "/tmp/smoke2/toy"
CKPT = "/tmp/smoke2/run/checkpoint"

numcore.set_default_dtype(np.float64)
config = RunConfig.from_dict({"seed": 0, "data": {"root": ROOT,
                                                  "train_classes": [],
                                                  "test_classes": []}})
model = new_model(config)
model.load_state(load_checkpoint(checkpoint_model_path(CKPT)))

names = list_classes(ROOT)
print("classes:", names)

train_names = ["checker05", "mottle02", "shade03", "stripes00"]
test_names = [n for n in names if n not in train_names]


def probe_class(name, limit=20):
    samples = load_dataset(ROOT, [name], "test")
    in_means, out_means, hits = [], [], 0
    flat_s, flat_y = [], []
    per_img = []
    n_ab = 0
    for s in samples[:limit] + samples[-limit:]:
        probs = model.answer_and_mask(s.image, seg_instruction(s.normal_text))[1]
        if probs is None:
            probs = np.zeros(s.image.shape[:2])
        flat_s.append(probs.ravel())
        flat_y.append(s.mask.ravel())
        mk = s.mask.astype(bool)
        if mk.any():
            n_ab += 1
            in_means.append(probs[mk].mean())
            out_means.append(probs[~mk].mean())
            iy, ix = np.unravel_index(np.argmax(probs), probs.shape)
            hits += bool(mk[iy, ix])
            per_img.append(auroc(s.mask.ravel().astype(float), probs.ravel()))
    a = auroc(np.concatenate(flat_y).astype(float), np.concatenate(flat_s))
    print(f"{name}: pooled_px_auroc={a:.3f} per_img_px_auroc={np.mean(per_img):.3f} "
          f"in={np.mean(in_means):.3f} out_ab={np.mean(out_means):.3f} "
          f"argmax_in_gt={hits}/{n_ab}")


for n in test_names:
    probe_class(n)
for n in train_names:
    probe_class(n)
