"""Throwaway probe: criterion-5 style smoke run, prints metrics + timing."""
import sys
import time
from pathlib import Path

from anomseg.cli.config import RunConfig
from anomseg.cli.evaluate import run_evaluate
from anomseg.cli.train import run_train
from anomseg.databench.dataset import list_classes, make_split
from anomseg.databench.generator import generate_dataset

root = Path(sys.argv[1]) / "toy"
out = Path(sys.argv[1]) / "run"

t0 = time.time()
generate_dataset(root, num_classes=6, per_class=80, image_hw=(64, 64), seed=5)
names = list_classes(root)
split = make_split(names, train_fraction=4 / 6, seed=5)
print(f"gen {time.time()-t0:.1f}s train={split.train} test={split.test}", flush=True)

raw = {
    "data": {"root": str(root), "train_classes": list(split.train),
             "test_classes": list(split.test)},
    "seed": 0,
    "out": str(out),
}
config = RunConfig.from_dict(raw)
t0 = time.time()
run_train(config, log=lambda *a: print(*a, flush=True))
t_train = time.time() - t0
t0 = time.time()
res = run_evaluate(config, out / "checkpoint", log=lambda *a: print(*a, flush=True))
t_eval = time.time() - t0
print(f"TRAIN {t_train:.0f}s EVAL {t_eval:.0f}s")
print("MACRO", res["macro"])
print("PER_CLASS", res["per_class"])
print("MISSING", res["missing_seg"])
