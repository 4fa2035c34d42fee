"""Instruction and answer templates over a closed word inventory.

Every string the pipeline ever tokenizes is produced here, so the
vocabulary can be enumerated up front and unknown words stay a hard
error elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

from ..encoders import SEG_TOKEN, word_tokenize
from ..errors import ContractError, ParameterError

FAMILIES = ("stripes", "checker", "mottle", "shade")

_FAMILY_WORDS = {
    "stripes": "striped",
    "checker": "checkered",
    "mottle": "mottled",
    "shade": "shaded",
}

_ADJECTIVES = ("fine", "coarse", "smooth", "soft", "dense", "pale")

DEFECT_NAMES = {
    0: "a discolored patch",
    1: "a foreign texture patch",
    2: "a hole",
    3: "a scratch",
}

TASK_KINDS = ("seg", "seg_answer", "vqa")


def class_family(class_idx: int) -> str:
    return FAMILIES[class_idx % len(FAMILIES)]


def normal_text(class_idx: int) -> str:
    """Short normal-scene description, distinct per class for up to 24."""
    adj = _ADJECTIVES[(class_idx // len(FAMILIES)) % len(_ADJECTIVES)]
    return f"a {adj} {_FAMILY_WORDS[class_family(class_idx)]} surface"


def seg_instruction(normal: str) -> str:
    return (f"this should be {normal} . is there any defect ? "
            "segment the anomaly .")


def seg_answer() -> str:
    return f"it is {SEG_TOKEN}"


def seg_full_answer(defect_type: int) -> str:
    if defect_type < 0:
        return f"no defect here . it is {SEG_TOKEN}"
    return f"yes , {DEFECT_NAMES[defect_type]} . it is {SEG_TOKEN}"


def vqa_instruction(normal: str) -> str:
    return f"this should be {normal} . is there any defect ?"


def vqa_answer(defect_type: int) -> str:
    if defect_type < 0:
        return "no ."
    return f"yes , {DEFECT_NAMES[defect_type]} ."


@dataclass(frozen=True)
class TaskRecord:
    """One training prompt: what is asked, what is supervised."""

    kind: str
    instruction: str
    answer: str
    wants_mask: bool

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ParameterError(f"unknown task kind {self.kind!r}")
        has_seg = SEG_TOKEN in self.answer
        if self.kind == "vqa" and has_seg:
            raise ContractError("vqa answers must not request a mask")
        if self.kind != "vqa" and not self.answer.endswith(SEG_TOKEN):
            raise ContractError(f"{self.kind} answers must end with the "
                                "mask-request token")


def build_task(kind: str, normal: str, defect_type: int) -> TaskRecord:
    """Instantiate the templates for one sample and task kind."""
    if kind == "seg":
        return TaskRecord(kind, seg_instruction(normal), seg_answer(), True)
    if kind == "seg_answer":
        return TaskRecord(kind, seg_instruction(normal),
                          seg_full_answer(defect_type), True)
    if kind == "vqa":
        return TaskRecord(kind, vqa_instruction(normal),
                          vqa_answer(defect_type), False)
    raise ParameterError(f"unknown task kind {kind!r}")


def vocabulary_words(max_classes: int = 64) -> List[str]:
    """Every plain word any template can emit, sorted."""
    corpus = []
    for idx in range(max_classes):
        for kind in TASK_KINDS:
            for dtype in (-1, 0, 1, 2, 3):
                task = build_task(kind, normal_text(idx), dtype)
                corpus.append(task.instruction)
                corpus.append(task.answer)
    words = set()
    for text in corpus:
        words.update(word_tokenize(text))
    return sorted(words)
