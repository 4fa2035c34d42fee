"""Full model assembly and per-sample loss computation.

Wires the visual encoder, the token compressor, the conv backbone,
the language model, the similarity heads, and the mask decoder into
one checkpointable module, and exposes the per-sample training and
inference entry points the CLI builds on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import patchsim
from .databench.dataset import AnomalySample
from .databench.templates import TaskRecord
from .encoders import (Backbone, TinyLM, TokenSequence, VisualEncoder,
                       Vocabulary)
from .errors import ConfigError, ContractError
from .numcore import Tensor, no_grad
from .numcore.checkpoint import load_checkpoint, save_checkpoint
from .numcore.module import Module
from .projector import CompressorConfig, PooledProjector, TokenCompressor
from .seghead import (LossWeights, MaskPrediction, SegmentationHead,
                      seg_loss, text_loss, total_loss)

PROJECTOR_KINDS = ("compressor", "pooled")


@dataclass(frozen=True)
class ModelConfig:
    """Desk-scale model geometry; every knob is validated downstream."""

    image_hw: Tuple[int, int] = (64, 64)
    patch: int = 8
    enc_width: int = 48
    enc_levels: int = 6
    lm_width: int = 48
    lm_depth: int = 2
    max_context: int = 160
    backbone_ch: int = 32
    seg_blocks: int = 2
    projector: str = "compressor"
    rho: int = 2
    learner_blocks: int = 2
    taps: int = 4
    fuse_levels: int = 4
    temperature: float = 0.1
    box_count: int = 8

    def __post_init__(self):
        if self.projector not in PROJECTOR_KINDS:
            raise ConfigError(f"projector must be one of {PROJECTOR_KINDS}, "
                              f"got {self.projector!r}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, "
                              f"got {self.temperature}")
        if self.box_count < 1:
            raise ConfigError("box_count must be at least 1")

    def compressor_config(self) -> CompressorConfig:
        return CompressorConfig(rho=self.rho,
                                learner_blocks=self.learner_blocks,
                                taps=self.taps,
                                fuse_levels=self.fuse_levels)

    def to_dict(self) -> Dict:
        return {"image_hw": list(self.image_hw), "patch": self.patch,
                "enc_width": self.enc_width, "enc_levels": self.enc_levels,
                "lm_width": self.lm_width, "lm_depth": self.lm_depth,
                "max_context": self.max_context,
                "backbone_ch": self.backbone_ch,
                "seg_blocks": self.seg_blocks,
                "projector": self.projector, "rho": self.rho,
                "learner_blocks": self.learner_blocks, "taps": self.taps,
                "fuse_levels": self.fuse_levels,
                "temperature": self.temperature,
                "box_count": self.box_count}

    @classmethod
    def from_dict(cls, raw: Dict) -> "ModelConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown model options: {sorted(unknown)}")
        raw = dict(raw)
        if "image_hw" in raw:
            raw["image_hw"] = tuple(raw["image_hw"])
        return cls(**raw)


class AnomalyModel(Module):
    """Everything trainable, under stable state-dict prefixes.

    Child names double as checkpoint prefixes: enc. ltc. bb. lm.
    seg. sim.
    """

    def __init__(self, rng: np.random.Generator, vocab: Vocabulary,
                 config: ModelConfig):
        super().__init__()
        self.config = config
        self.vocab = vocab
        self.enc = VisualEncoder(rng, image_hw=config.image_hw,
                                 patch=config.patch,
                                 width=config.enc_width,
                                 num_levels=config.enc_levels)
        grid_side = self.enc.grid[0]
        if self.enc.grid[0] != self.enc.grid[1]:
            raise ConfigError("projector requires a square token grid")
        proj_cls = TokenCompressor if config.projector == "compressor" \
            else PooledProjector
        self.ltc = proj_cls(rng, grid_side, config.enc_width,
                            config.enc_levels, config.lm_width,
                            config.compressor_config())
        self.bb = Backbone(rng, out_ch=config.backbone_ch)
        self.lm = TinyLM(rng, vocab, width=config.lm_width,
                         depth=config.lm_depth,
                         max_context=config.max_context)
        self.seg = SegmentationHead(rng, config.lm_width,
                                    config.backbone_ch,
                                    blocks=config.seg_blocks)
        self.sim = patchsim.AlignmentHeads(rng, config.backbone_ch,
                                           config.enc_width,
                                           config.lm_width)

    # -- building blocks -----------------------------------------------

    def visual_tokens(self, images: Tensor) -> Tensor:
        """[B, M, lm_width] compressed tokens for the LM."""
        return self.ltc.project(self.enc(images))

    def feature_map(self, images: Tensor) -> Tensor:
        """[Hf, Wf, C] backbone map for a single image batch."""
        fmap = self.bb(images)
        if fmap.shape[0] != 1:
            raise ContractError("feature_map expects a single-image batch")
        return fmap.reshape(fmap.shape[1:])

    def build_sequence(self, instruction: str, answer: str,
                       visual: Optional[Tensor]) -> TokenSequence:
        ins = self.vocab.encode(instruction)
        ans = self.vocab.encode(answer)
        return TokenSequence(ids=np.concatenate([ins, ans]),
                             visual=visual, answer_start=ins.size)

    def forward_text(self, seq: TokenSequence) -> Tuple[Tensor, Tensor]:
        """(logits [T, V], hidden [T, width]) over the spliced sequence."""
        return self.lm(self.lm.splice(seq))

    # -- inference -----------------------------------------------------

    def answer_and_mask(self, image: np.ndarray, instruction: str,
                        max_new: int = 64
                        ) -> Tuple[str, Optional[np.ndarray]]:
        """Greedy answer plus the decoded mask probabilities.

        Returns (answer text, probs or None). The mask is decoded only
        when the generated answer requests one; callers that need a
        score map for every image substitute zeros for None.
        """
        with no_grad():
            images = Tensor(image[None])
            vis = self.visual_tokens(images)
            vis = vis.reshape(vis.shape[1:])
            ins = self.vocab.encode(instruction)
            prefix = self.lm.splice(TokenSequence(ids=ins, visual=vis,
                                                  answer_start=ins.size))
            generated = self.lm.greedy_decode(prefix, max_new=max_new,
                                              stop_id=self.vocab.seg_id)
            answer = self.vocab.decode(generated)
            if self.vocab.seg_id not in generated:
                return answer, None
            seq = TokenSequence(
                ids=np.concatenate([ins, np.asarray(generated)]),
                visual=vis, answer_start=ins.size)
            _, hidden = self.forward_text(seq)
            prompt = self.seg.extract_prompt(hidden, seq,
                                             self.vocab.seg_id)
            pred = self.seg.decode(prompt, self.feature_map(images))
            return answer, pred.probs.data.copy()


# ---------------------------------------------------------------------------
# queue featurization


def make_featurize(model: AnomalyModel) -> patchsim.Featurize:
    """Queue featurizer: detached global snapshots for one sample.

    Normal entries carry the class reference text; abnormal entries a
    short defect description, so the semantic tokens separate in LM
    space.
    """
    from .databench import templates

    def featurize(sample: AnomalySample, label: int) -> patchsim.QueueEntry:
        images = Tensor(sample.image[None])
        fmap = model.feature_map(images)
        z_vis = model.sim.embed_global(fmap)
        tokens = model.enc(images).levels[-1]
        tokens = tokens.reshape(tokens.shape[1:])
        z_tok = model.sim.embed_tokens(tokens)
        _, text_embed = model.lm.embed_text(sample.normal_text)
        text = sample.normal_text if label == patchsim.LABEL_NORMAL \
            else templates.vqa_answer(sample.defect_type)
        theta = model.sim.semantic_token(Tensor(z_tok.data.copy()),
                                         text_embed)
        return patchsim.QueueEntry(label, z_vis.data.copy(),
                                   z_tok.data.copy(), theta.data.copy(),
                                   text, source=sample.image_id)

    return featurize


# ---------------------------------------------------------------------------
# per-sample losses


@dataclass
class StepLosses:
    """Scalar loss tensors for one sample; missing parts stay None."""

    total: Tensor
    text: Optional[Tensor] = None
    seg: Optional[Tensor] = None
    align: Optional[Tensor] = None

    def numbers(self) -> Dict[str, float]:
        out = {"total": float(self.total.data)}
        for name in ("text", "seg", "align"):
            part = getattr(self, name)
            out[name] = float(part.data) if part is not None else 0.0
        return out


def sample_losses(model: AnomalyModel, sample: AnomalySample,
                  task: TaskRecord,
                  queue: Optional[patchsim.ReferenceQueue],
                  rng: np.random.Generator,
                  weights: LossWeights) -> StepLosses:
    """All loss components for one (sample, task) pair.

    The alignment part is computed only for mask-bearing tasks and only
    when a queue is supplied; pass ``queue=None`` to disable it (its
    logged value is then exactly zero).
    """
    cfg = model.config
    images = Tensor(sample.image[None])
    vis = model.visual_tokens(images)
    vis = vis.reshape(vis.shape[1:])
    seq = model.build_sequence(task.instruction, task.answer, vis)
    logits, hidden = model.forward_text(seq)
    text = text_loss(logits, seq)

    seg = None
    align = None
    if task.wants_mask:
        fmap = model.feature_map(images)
        prompt = model.seg.extract_prompt(hidden, seq, model.vocab.seg_id)
        if prompt is None:
            raise ContractError("mask-bearing task lost its request token")
        pred = model.seg.decode(prompt, fmap)
        seg = seg_loss(pred, sample.mask, weights)
        if queue is not None:
            boxes = patchsim.sample_patch_boxes(sample.image.shape[:2],
                                                cfg.box_count, rng)
            align = patchsim.image_alignment_loss(
                sample.image, fmap, boxes, queue, model.sim, model.enc,
                model.ltc, model.lm, temperature=cfg.temperature)
    total = total_loss(text, seg, align, weights)
    return StepLosses(total=total, text=text, seg=seg, align=align)


# ---------------------------------------------------------------------------
# persistence


def save_model(path, model: AnomalyModel) -> None:
    save_checkpoint(path, model.state())


def load_model(path, vocab: Vocabulary, config: ModelConfig,
               seed: int = 0) -> AnomalyModel:
    """Rebuild the architecture, then overwrite every parameter."""
    model = AnomalyModel(np.random.default_rng(seed), vocab, config)
    model.load_state(load_checkpoint(path))
    return model
