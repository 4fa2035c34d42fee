"""Mask decoding driven by the LM's segmentation token.

When the language model emits its mask-request token, the hidden state
at that position becomes a query prompt. A small two-way attention
decoder lets the prompt read the backbone feature map and the feature
map read the prompt, and a per-cell dot product turns the result into
a coarse logit map that is upsampled to image resolution.

The training losses live here too: pixel loss (weighted binary
cross-entropy plus overlap loss), next-token text loss over the answer
span, and the weighted total.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .encoders import TokenSequence
from .errors import ContractError, NumericError, ParameterError, ShapeError
from .numcore import (MLP, LayerNorm, Linear, Module, ModuleList, Tensor,
                      functional as F)

BCE_CLAMP = 1e-7
DICE_SMOOTHING = 1.0

# Defect masks cover a few percent of the image, so the mask logits
# start at that base rate; a zero start lets the background term of
# the pixel loss drive the whole map into sigmoid saturation before
# the feature signal can form.
MASK_PRIOR_LOGIT = -3.5

# Defect cells are cells without a near twin elsewhere in the same map,
# so the decoder carries a soft nearest-neighbour distance per cell.
# Distances are divided by their own mean, which makes the channel
# independent of the feature scale; the temperature is relative to that
# normalised scale. The score itself is also divided by its per-map
# mean: the prompt dot-product channel is bounded (unit rows times a
# learned scale), and the two channels only stay comparable on inputs
# unlike the training classes if both have a construction-time scale,
# not a learned one. The gate starts open: the dot-product path can fit
# the training classes on its own, so a closed gate would see almost no
# gradient and the channel would never engage.
NOVELTY_SOFTMIN_TAU = 0.02
NOVELTY_GATE_INIT = 1.0
DOT_SCALE_INIT = 4.0
_DIAG_EXCLUSION = 1e9
_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class SegPrompt:
    """Projected mask-request embedding and where it came from."""

    vector: Tensor
    position: int


@dataclass(frozen=True)
class MaskPrediction:
    """Full-resolution mask logits with their coarse source map."""

    logits: Tensor
    probs: Tensor
    coarse: Tensor

    @property
    def shape(self) -> Tuple[int, int]:
        return self.logits.shape


class CrossAttention(Module):
    """Single-head attention from one token set onto another."""

    def __init__(self, rng: np.random.Generator, dim: int):
        super().__init__()
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)
        self.scale = 1.0 / np.sqrt(dim)

    def forward(self, queries: Tensor, context: Tensor) -> Tensor:
        q = self.wq(queries)
        k = self.wk(context)
        v = self.wv(context)
        att = F.softmax((q @ k.transpose((1, 0))) * self.scale, axis=-1)
        return self.wo(att @ v)

    __call__ = forward


class TwoWayBlock(Module):
    """Prompt reads the features, then the features read the prompt."""

    def __init__(self, rng: np.random.Generator, dim: int):
        super().__init__()
        self.ln_p1 = LayerNorm(dim)
        self.prompt_from_tokens = CrossAttention(rng, dim)
        self.ln_p2 = LayerNorm(dim)
        self.prompt_mlp = MLP(rng, dim, 2 * dim, dim)
        self.ln_t = LayerNorm(dim)
        self.tokens_from_prompt = CrossAttention(rng, dim)

    def forward(self, prompt: Tensor, tokens: Tensor):
        prompt = prompt + self.prompt_from_tokens(self.ln_p1(prompt), tokens)
        prompt = prompt + self.prompt_mlp(self.ln_p2(prompt))
        tokens = tokens + self.tokens_from_prompt(self.ln_t(tokens), prompt)
        return prompt, tokens

    __call__ = forward


def _unit_rows(x: Tensor) -> Tensor:
    """Rows scaled to unit length; the floor keeps zero rows at zero
    and the square root smooth."""
    sq = (x * x).sum(axis=1)
    norm = (sq + _NORM_FLOOR).sqrt()
    return (x.transpose((1, 0)) / norm).transpose((1, 0))


class SegmentationHead(Module):
    """Prompt projection plus the two-way mask decoder."""

    def __init__(self, rng: np.random.Generator, lm_width: int,
                 feat_width: int, blocks: int = 2, upsample: int = 4):
        super().__init__()
        if blocks < 1:
            raise ParameterError("decoder needs at least one block")
        self.prompt_mlp = MLP(rng, lm_width, lm_width, feat_width)
        self.ln_tokens = LayerNorm(feat_width)
        self.blocks = ModuleList([TwoWayBlock(rng, feat_width)
                                  for _ in range(blocks)])
        self.out_prompt = Linear(rng, feat_width, feat_width)
        self.out_tokens = Linear(rng, feat_width, feat_width)
        self.mask_bias = Tensor(np.full(1, MASK_PRIOR_LOGIT),
                                requires_grad=True)
        self.novelty_gate = Tensor(np.full(1, NOVELTY_GATE_INIT),
                                   requires_grad=True)
        self.dot_scale = Tensor(np.full(1, DOT_SCALE_INIT),
                                requires_grad=True)
        self.feat_width = feat_width
        self.upsample = upsample

    def extract_prompt(self, hidden: Tensor, seq: TokenSequence,
                       seg_id: int) -> Optional[SegPrompt]:
        """Project the hidden state at the mask-request token.

        Returns None when the sequence never asks for a mask; the
        caller skips the pixel loss (or reports no anomaly path).
        """
        pos = seq.seg_position(seg_id)
        if pos is None:
            return None
        if not 0 <= pos < hidden.shape[0]:
            raise ShapeError(f"seg position {pos} outside hidden "
                             f"states of length {hidden.shape[0]}")
        row = F.take_rows(hidden, np.array([pos]))
        vector = self.prompt_mlp(row).reshape((self.feat_width,))
        return SegPrompt(vector, pos)

    def cell_novelty(self, cells: Tensor) -> Tensor:
        """Soft distance from each cell to its nearest other cell.

        The row max is subtracted as a constant before the logsumexp;
        that changes neither the value nor the gradient, only the
        floating-point range, so gradient checks stay exact.
        """
        n, c = cells.shape
        if n < 2:
            return Tensor(np.zeros((n, 1)))
        sq = (cells * cells).sum(axis=1)
        cross = cells @ cells.transpose((1, 0))
        d2 = (((cross * -2.0 + sq).transpose((1, 0)) + sq)
              .transpose((1, 0)) * (1.0 / c))
        mean_off = d2.sum() * (1.0 / (n * (n - 1)))
        scaled = (d2 / (mean_off + 1e-8)
                  + Tensor(np.eye(n) * _DIAG_EXCLUSION))
        v = scaled * (-1.0 / NOVELTY_SOFTMIN_TAU)
        shift = v.data.max(axis=1)
        inner = (v.transpose((1, 0)) - Tensor(shift)).exp().sum(axis=0)
        lse = inner.log() + Tensor(shift)
        # lse <= log(n-1) exactly, so this score has floor zero; the
        # per-map mean then pins its spread near one regardless of how
        # concentrated the pairwise distances are.
        score = (lse * -NOVELTY_SOFTMIN_TAU
                 + NOVELTY_SOFTMIN_TAU * np.log(n - 1))
        return (score / (score.mean() + 1e-8)).reshape((n, 1))

    def decode(self, prompt: SegPrompt, fmap: Tensor) -> MaskPrediction:
        """Attend prompt and features to each other, then dot-product."""
        if fmap.ndim != 3 or fmap.shape[2] != self.feat_width:
            raise ShapeError(f"expected [Hf, Wf, {self.feat_width}] "
                             f"features, got {fmap.shape}")
        fh, fw, c = fmap.shape
        cells = fmap.reshape((fh * fw, c))
        tokens = self.ln_tokens(cells)
        p = prompt.vector.reshape((1, c))
        for block in self.blocks:
            p, tokens = block(p, tokens)
        q = _unit_rows(self.out_prompt(p))
        k = _unit_rows(self.out_tokens(tokens))
        dots = (k @ q.transpose((1, 0))) * self.dot_scale
        novelty = self.cell_novelty(cells) * self.novelty_gate
        coarse = (dots + novelty + self.mask_bias).reshape((fh, fw))
        logits = F.upsample_bilinear(
            coarse, (fh * self.upsample, fw * self.upsample))
        return MaskPrediction(logits, logits.sigmoid(), coarse)


# ---------------------------------------------------------------------------
# losses


def _check_binary(gt: np.ndarray) -> np.ndarray:
    gt = np.asarray(gt, dtype=float)
    if not np.isin(gt, (0.0, 1.0)).all():
        raise ContractError("ground-truth mask must be binary")
    return gt


def bce_loss(probs: Tensor, gt: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with clamped certainty."""
    gt = _check_binary(gt)
    if probs.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {probs.shape} vs {gt.shape}")
    p = probs.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    g = Tensor(gt)
    ones = Tensor(np.ones_like(gt))
    nll = g * p.log() + (ones - g) * (ones - p).log()
    return nll.mean() * -1.0


def dice_loss(probs: Tensor, gt: np.ndarray) -> Tensor:
    """One minus the smoothed overlap ratio (smoothing = 1)."""
    gt = _check_binary(gt)
    if probs.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {probs.shape} vs {gt.shape}")
    g = Tensor(gt)
    inter = (probs * g).sum()
    denom = probs.sum() + g.sum() + DICE_SMOOTHING
    return 1.0 - (inter * 2.0 + DICE_SMOOTHING) / denom


@dataclass(frozen=True)
class LossWeights:
    """Non-negative blend weights for the three training losses."""

    lambda_txt: float = 1.0
    lambda_seg: float = 1.0
    lambda_align: float = 0.5
    lambda_bce: float = 2.0
    lambda_dice: float = 0.5

    def __post_init__(self):
        vals = (self.lambda_txt, self.lambda_seg, self.lambda_align,
                self.lambda_bce, self.lambda_dice)
        if any(v < 0 for v in vals):
            raise ParameterError(f"negative loss weight in {vals}")
        if all(v == 0 for v in vals):
            raise ParameterError("all loss weights are zero")


def seg_loss(pred: MaskPrediction, gt: np.ndarray,
             weights: LossWeights = LossWeights()) -> Tensor:
    """Pixel loss: weighted cross-entropy plus weighted overlap loss."""
    return (bce_loss(pred.probs, gt) * weights.lambda_bce
            + dice_loss(pred.probs, gt) * weights.lambda_dice)


def text_loss(logits: Tensor, seq: TokenSequence) -> Tensor:
    """Mean next-token cross-entropy over the answer span only.

    ``logits`` covers the spliced sequence (visual prefix + text);
    position t predicts the token at t+1, so answer token k is scored
    from the logits one step earlier.
    """
    if seq.answer_start >= seq.ids.size:
        raise ContractError("sequence has an empty answer span")
    if logits.shape[0] != seq.length:
        raise ShapeError(f"logit rows {logits.shape[0]} != spliced "
                         f"length {seq.length}")
    targets = seq.ids[seq.answer_start:]
    rows = seq.num_visual + seq.answer_start + np.arange(targets.size) - 1
    if rows[0] < 0:
        raise ContractError("answer span starts at position 0; nothing "
                            "conditions the first token")
    log_probs = F.log_softmax(F.take_rows(logits, rows), axis=-1)
    vocab = logits.shape[1]
    picked = F.take_flat(log_probs, np.arange(targets.size) * vocab + targets)
    return picked.mean() * -1.0


def total_loss(text, seg, align,
               weights: LossWeights = LossWeights()) -> Tensor:
    """Weighted sum of whichever loss components the sample produced.

    Components are scalar tensors (or plain numbers) and may be None
    when a sample lacks that task. In-graph tensors can never hold a
    NaN (the finite guard rejects them at creation), so the explicit
    check here mainly catches bad plain-number components by name.
    """
    total = Tensor(np.zeros(()))
    for name, part, weight in (("text", text, weights.lambda_txt),
                               ("seg", seg, weights.lambda_seg),
                               ("align", align, weights.lambda_align)):
        if part is None:
            continue
        data = part.data if isinstance(part, Tensor) else np.asarray(
            part, dtype=float)
        if data.size != 1:
            raise ShapeError(f"{name} loss must be scalar, got {data.shape}")
        if not np.isfinite(data).all():
            raise NumericError(f"{name} loss component is not finite")
        term = part if isinstance(part, Tensor) else Tensor(data.reshape(()))
        total = total + term * weight
    return total
