"""Synthetic texture benchmark: generation, IO, tasks, and metrics."""

from .dataset import (AnomalySample, EvalRecord, SplitSpec, list_classes,
                      load_dataset, make_split)
from .generator import class_params, generate_dataset, make_sample, render_texture
from .metrics import (aupro, auroc, average_precision, image_score,
                      pro_curve)
from .templates import (DEFECT_NAMES, FAMILIES, TASK_KINDS, TaskRecord,
                        build_task, class_family, normal_text, seg_answer,
                        seg_full_answer, seg_instruction, vocabulary_words,
                        vqa_answer, vqa_instruction)

__all__ = [
    "AnomalySample", "EvalRecord", "SplitSpec", "list_classes",
    "load_dataset", "make_split",
    "class_params", "generate_dataset", "make_sample", "render_texture",
    "aupro", "auroc", "average_precision", "image_score", "pro_curve",
    "DEFECT_NAMES", "FAMILIES", "TASK_KINDS", "TaskRecord", "build_task",
    "class_family", "normal_text", "seg_answer", "seg_full_answer",
    "seg_instruction", "vocabulary_words", "vqa_answer", "vqa_instruction",
]
