"""Cross-modal patch-similarity alignment.

The anomaly signal lives in how a local patch relates to global
references: a patch of defect looks unlike every normal reference
image, a clean patch looks like all of them. This module measures
that relation twice, once in the visual feature space of the
segmentation backbone and once in the language-model token space,
and learns to make the second distribution match the first.

The visual side is treated as ground truth and never receives
gradients; the LM side (patch tokens, the visual-to-LM projection,
and the text adapter) is what trains.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, DatasetError, ParameterError, ShapeError
from .numcore import MLP, Linear, Module, Tensor, functional as F, no_grad

LABEL_NORMAL = 0
LABEL_ABNORMAL = 1

DEFAULT_TEMPERATURE = 0.1
DEFAULT_BOX_COUNT = 8
DEFAULT_QUEUE_FRACTION = 1.0 / 20.0

# floor applied to probabilities before log; keeps the loss finite
PROB_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# patch boxes


@dataclass(frozen=True)
class PatchBox:
    """Half-open pixel rectangle: columns [x0, x1), rows [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ParameterError(f"degenerate box {self}")
        if min(self.x0, self.y0) < 0:
            raise ParameterError(f"negative box corner {self}")

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def width(self) -> int:
        return self.x1 - self.x0


def sample_patch_boxes(image_hw: Tuple[int, int], count: int,
                       rng) -> List[PatchBox]:
    """Uniform random boxes with sides in [25%, 50%] of min(H, W)."""
    if count < 1:
        raise ParameterError(f"need at least one box, got {count}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    h, w = image_hw
    m = min(h, w)
    lo = int(np.ceil(0.25 * m))
    hi = int(np.floor(0.50 * m))
    if lo < 1 or hi < lo:
        raise ParameterError(f"image {image_hw} too small for patch boxes")
    boxes = []
    for _ in range(count):
        bh = int(rng.integers(lo, hi + 1))
        bw = int(rng.integers(lo, hi + 1))
        y0 = int(rng.integers(0, h - bh + 1))
        x0 = int(rng.integers(0, w - bw + 1))
        boxes.append(PatchBox(x0, y0, x0 + bw, y0 + bh))
    return boxes


def roi_cells(feat_hw: Tuple[int, int], image_hw: Tuple[int, int],
              box: PatchBox) -> np.ndarray:
    """Flat indices of feature cells whose centres fall inside the box.

    An empty selection snaps to the single cell nearest the box centre
    (with a warning) so a tiny box still yields a pooled vector.
    """
    fh, fw = feat_hw
    ih, iw = image_hw
    cy = (np.arange(fh) + 0.5) * ih / fh
    cx = (np.arange(fw) + 0.5) * iw / fw
    inside = ((cy >= box.y0) & (cy < box.y1))[:, None] \
        & ((cx >= box.x0) & (cx < box.x1))[None, :]
    rows, cols = np.nonzero(inside)
    if rows.size == 0:
        warnings.warn(f"box {box} covers no feature-cell centre; "
                      "snapping to the nearest cell", RuntimeWarning)
        i = int(np.argmin(np.abs(cy - (box.y0 + box.y1) / 2.0)))
        j = int(np.argmin(np.abs(cx - (box.x0 + box.x1) / 2.0)))
        return np.array([i * fw + j])
    return rows * fw + cols


def l2_normalize(x: Tensor) -> Tensor:
    """Scale a vector to unit length (safe at zero)."""
    if x.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {x.shape}")
    sq = (x * x).sum() + 1e-12
    return x * sq ** -0.5


def _vec(module, v: Tensor) -> Tensor:
    """Apply a row-oriented module to a single vector."""
    out = module(v.reshape((1, v.shape[0])))
    return out.reshape((out.shape[1],))


# ---------------------------------------------------------------------------
# embedding heads


class AlignmentHeads(Module):
    """Projection heads shared by both similarity branches.

    patch_head / global_head embed backbone features (the visual
    branch); token_head embeds encoder tokens for the reference side
    of the LM branch; vis_to_lm and text_adapter combine into semantic
    tokens. The adapter's output layer starts at zero so semantic
    tokens begin as pure visual projections.
    """

    def __init__(self, rng: np.random.Generator, vis_width: int,
                 enc_width: int, lm_width: int):
        super().__init__()
        self.patch_head = MLP(rng, vis_width, vis_width, vis_width)
        self.global_head = MLP(rng, vis_width, vis_width, vis_width)
        self.token_head = MLP(rng, enc_width, enc_width, enc_width)
        self.vis_to_lm = Linear(rng, enc_width, lm_width)
        self.text_adapter = MLP(rng, lm_width, max(4, lm_width // 4),
                                lm_width, zero_init_out=True)
        self.vis_width = vis_width
        self.enc_width = enc_width
        self.lm_width = lm_width

    def embed_patch(self, fmap: Tensor, box: PatchBox,
                    image_hw: Tuple[int, int]) -> Tensor:
        """ROI-mean the feature map over the box, project, normalize."""
        fh, fw, c = fmap.shape
        cells = roi_cells((fh, fw), image_hw, box)
        pooled = F.take_rows(fmap.reshape((fh * fw, c)), cells).mean(axis=0)
        return l2_normalize(_vec(self.patch_head, pooled))

    def embed_global(self, fmap: Tensor) -> Tensor:
        """Whole-map mean, projected and normalized."""
        fh, fw, c = fmap.shape
        pooled = fmap.reshape((fh * fw, c)).mean(axis=0)
        return l2_normalize(_vec(self.global_head, pooled))

    def embed_tokens(self, tokens: Tensor) -> Tensor:
        """Mean over encoder tokens, projected and normalized."""
        if tokens.ndim != 2:
            raise ShapeError(f"expected [N, C] tokens, got {tokens.shape}")
        return l2_normalize(_vec(self.token_head, tokens.mean(axis=0)))

    def semantic_token(self, z: Tensor, text_embed: Tensor) -> Tensor:
        """Additive fusion: project the visual global, add adapted text."""
        return _vec(self.vis_to_lm, z) + _vec(self.text_adapter, text_embed)


@dataclass(frozen=True)
class SemanticToken:
    """A class-reference token in LM space, with its provenance."""

    theta: Tensor
    source: str
    text: str


def semantic_token(heads: AlignmentHeads, lm, tokens: Tensor, text: str,
                   source: str = "") -> SemanticToken:
    """Build the semantic token for one image and its reference text."""
    if not text:
        raise ContractError("semantic tokens need a reference text")
    z = heads.embed_tokens(tokens)
    _, text_embed = lm.embed_text(text)
    return SemanticToken(heads.semantic_token(z, text_embed), source, text)


# ---------------------------------------------------------------------------
# reference queue


@dataclass(frozen=True)
class QueueEntry:
    """Detached per-image snapshot used as a similarity reference.

    z_visual: unit global embedding from the backbone branch.
    z_tokens: unit global embedding from the encoder-token branch.
    theta:    semantic-token snapshot (diagnostics; the loss recomputes
              it live from z_tokens and text so the heads can train).
    """

    label: int
    z_visual: np.ndarray
    z_tokens: np.ndarray
    theta: np.ndarray
    text: str
    source: str = ""


@dataclass(frozen=True)
class ReferenceQueue:
    """Per-class bank of reference snapshots, rebuilt each epoch."""

    class_id: str
    entries: Tuple[QueueEntry, ...]
    epoch: int = 0

    def __post_init__(self):
        if not self.entries:
            raise ContractError(f"empty queue for class {self.class_id!r}")
        for e in self.entries:
            for v in (e.z_visual, e.z_tokens):
                n = float(np.linalg.norm(v))
                if abs(n - 1.0) > 1e-6:
                    raise ContractError(
                        f"queue entry norm {n:.8f} is not 1 "
                        f"(class {self.class_id!r})")
        if self.positives.size == 0:
            raise ContractError(
                f"queue for class {self.class_id!r} has no normal entries")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries])

    @property
    def positives(self) -> np.ndarray:
        """Indices of normal-labelled entries (the positive set)."""
        return np.nonzero(self.labels == LABEL_NORMAL)[0]

    @property
    def visual_matrix(self) -> np.ndarray:
        return np.stack([e.z_visual for e in self.entries])

    @property
    def theta_matrix(self) -> np.ndarray:
        return np.stack([e.theta for e in self.entries])


Featurize = Callable[[Any, int], QueueEntry]


def build_queue(class_id: str, samples: Sequence[Tuple[Any, int]],
                featurize: Featurize, rng,
                fraction: float = DEFAULT_QUEUE_FRACTION,
                min_per_label: int = 2, epoch: int = 0) -> ReferenceQueue:
    """Subsample one class and snapshot its reference features.

    Takes `fraction` of each label (at least `min_per_label` when that
    many exist). `featurize` must return detached arrays; it runs under
    no_grad here as a belt-and-braces guarantee.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    by_label: Dict[int, List[Any]] = {LABEL_NORMAL: [], LABEL_ABNORMAL: []}
    for sample, label in samples:
        if label not in by_label:
            raise ParameterError(f"unknown label {label!r}")
        by_label[label].append(sample)
    if not by_label[LABEL_NORMAL]:
        raise DatasetError(
            f"class {class_id!r} has no normal samples; the positive "
            "set would be empty")
    entries: List[QueueEntry] = []
    with no_grad():
        for label in (LABEL_NORMAL, LABEL_ABNORMAL):
            pool = by_label[label]
            if not pool:
                continue
            want = max(min_per_label, int(round(fraction * len(pool))))
            want = min(want, len(pool))
            picks = np.sort(rng.choice(len(pool), size=want, replace=False))
            for i in picks:
                entries.append(featurize(pool[int(i)], label))
    return ReferenceQueue(class_id, tuple(entries), epoch=epoch)


def build_queues(samples_by_class: Dict[str, Sequence[Tuple[Any, int]]],
                 featurize: Featurize, seed: int,
                 fraction: float = DEFAULT_QUEUE_FRACTION,
                 min_per_label: int = 2,
                 epoch: int = 0) -> Dict[str, ReferenceQueue]:
    """Rebuild every per-class queue with one derived seed per class."""
    queues = {}
    for k, class_id in enumerate(sorted(samples_by_class)):
        rng = np.random.default_rng([seed, epoch, k])
        queues[class_id] = build_queue(class_id,
                                       samples_by_class[class_id],
                                       featurize, rng, fraction=fraction,
                                       min_per_label=min_per_label,
                                       epoch=epoch)
    return queues


def dump_queues(queues: Dict[str, ReferenceQueue], path) -> None:
    """Write queue vectors to a text file, one entry-branch per line."""
    names = {LABEL_NORMAL: "normal", LABEL_ABNORMAL: "abnormal"}
    with open(path, "w", encoding="utf-8") as fh:
        for class_id in sorted(queues):
            for e in queues[class_id].entries:
                for branch, vec in (("visual", e.z_visual),
                                    ("text", e.theta)):
                    vals = " ".join(f"{v:.8g}" for v in vec)
                    fh.write(f"{class_id},{names[e.label]},{branch},{vals}\n")


# ---------------------------------------------------------------------------
# similarity distributions


@dataclass
class SimilarityDistribution:
    """Probabilities over queue entries, optionally gradient-carrying.

    `probs` is always a plain array snapshot; `live` is set only on
    the branch that trains.
    """

    probs: np.ndarray
    indices: np.ndarray
    live: Optional[Tensor] = None

    def __post_init__(self):
        total = float(self.probs.sum())
        if abs(total - 1.0) > 1e-9:
            raise ContractError(f"probabilities sum to {total!r}, not 1")
        if self.probs.shape != self.indices.shape:
            raise ContractError("probability/index length mismatch")


def _stable_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max()
    e = np.exp(shifted)
    return e / e.sum()


def visual_similarity(v: np.ndarray, queue: ReferenceQueue,
                      temperature: float = DEFAULT_TEMPERATURE
                      ) -> SimilarityDistribution:
    """Patch-vs-references distribution in visual space (no gradient)."""
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    v = np.asarray(v, dtype=float)
    probs = _stable_softmax(queue.visual_matrix @ v / temperature)
    return SimilarityDistribution(probs, np.arange(len(queue)))


def queue_semantic_tokens(queue: ReferenceQueue, heads: AlignmentHeads,
                          lm) -> Tensor:
    """Recompute every entry's semantic token through the live heads.

    The stored z_tokens snapshots stay frozen (no path back into the
    encoder that produced them); gradients reach only vis_to_lm, the
    text adapter, and the LM's token embeddings.
    """
    rows = []
    for e in queue.entries:
        z = Tensor(e.z_tokens)
        _, text_embed = lm.embed_text(e.text)
        theta = heads.semantic_token(z, text_embed)
        rows.append(theta.reshape((1, theta.shape[0])))
    return F.concat(rows, axis=0)


def text_visual_similarity(token: Tensor, thetas: Tensor,
                           temperature: float = DEFAULT_TEMPERATURE
                           ) -> SimilarityDistribution:
    """Patch-token-vs-semantic-tokens distribution in LM space (live)."""
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    if token.ndim != 1 or thetas.ndim != 2 \
            or thetas.shape[1] != token.shape[0]:
        raise ShapeError(
            f"expected [C] against [M, C], got {token.shape} "
            f"and {thetas.shape}")
    scores = (thetas * token).sum(axis=-1)
    live = F.softmax(scores, axis=-1, temperature=temperature)
    return SimilarityDistribution(live.data.copy(),
                                  np.arange(thetas.shape[0]), live=live)


# ---------------------------------------------------------------------------
# alignment loss


def alignment_loss(pairs: Sequence[Tuple[SimilarityDistribution,
                                         SimilarityDistribution]],
                   positives: np.ndarray) -> Tensor:
    """Cross-entropy from the visual distribution onto the LM one.

    Per box: sum over normal references of -p * log(q). The p factors
    are plain numbers, so gradients flow only through q.
    """
    positives = np.asarray(positives)
    if positives.size == 0:
        raise ContractError("positive set is empty")
    if not pairs:
        raise ContractError("no distribution pairs given")
    total = None
    for p, q in pairs:
        if q.live is None:
            raise ContractError("LM-side distribution has no live tensor")
        if p.probs.shape != q.probs.shape:
            raise ContractError("paired distributions index different queues")
        q_pos = F.take_rows(q.live, positives)
        if (q_pos.data < PROB_FLOOR).any():
            warnings.warn("similarity probability underflow; clamping "
                          f"at {PROB_FLOOR}", RuntimeWarning)
        term = (q_pos.clamp(PROB_FLOOR, 1.0).log()
                * Tensor(p.probs[positives])).sum()
        total = term if total is None else total + term
    return total * (-1.0 / len(pairs))


# ---------------------------------------------------------------------------
# LM-space patch tokens


def resize_bilinear(img: np.ndarray, out_hw: Tuple[int, int]) -> np.ndarray:
    """Plain-array bilinear resize with half-pixel centres.

    Same-size calls return an exact copy, so a full-image crop is a
    no-op. Raw pixels carry no gradient; this stays in numpy.
    """
    h, w = img.shape[:2]
    oh, ow = out_hw
    if h < 1 or w < 1:
        raise ShapeError("cannot resize an empty image")
    ys = (np.arange(oh) + 0.5) * h / oh - 0.5
    xs = (np.arange(ow) + 0.5) * w / ow - 0.5
    y0f = np.floor(ys)
    x0f = np.floor(xs)
    fy = (ys - y0f)[:, None, None]
    fx = (xs - x0f)[None, :, None]
    y0 = np.clip(y0f.astype(int), 0, h - 1)
    y1 = np.clip(y0f.astype(int) + 1, 0, h - 1)
    x0 = np.clip(x0f.astype(int), 0, w - 1)
    x1 = np.clip(x0f.astype(int) + 1, 0, w - 1)
    flat = img.reshape(h, w, -1).astype(float)
    top = flat[y0][:, x0] * (1.0 - fx) + flat[y0][:, x1] * fx
    bot = flat[y1][:, x0] * (1.0 - fx) + flat[y1][:, x1] * fx
    out = top * (1.0 - fy) + bot * fy
    return out.reshape((oh, ow) + img.shape[2:])


def patch_tokens_lm(image: np.ndarray, boxes: Sequence[PatchBox],
                    encoder, projector) -> Tensor:
    """Crop each box, resize to encoder input, project to LM tokens.

    Returns [N_boxes, C_lm]: the mean projected token per crop. Crops
    run as one batch through the encoder and projector.
    """
    if not boxes:
        raise ParameterError("need at least one box")
    crops = []
    for box in boxes:
        crop = image[box.y0:box.y1, box.x0:box.x1]
        if crop.shape[0] < 2 or crop.shape[1] < 2:
            raise ShapeError(f"crop for {box} is too small to resize")
        crops.append(resize_bilinear(crop, encoder.image_hw))
    feats = encoder(Tensor(np.stack(crops)))
    tokens = projector.project(feats)
    return tokens.mean(axis=1)


# ---------------------------------------------------------------------------
# per-image loss assembly


def image_alignment_loss(image: np.ndarray, fmap: Tensor,
                         boxes: Sequence[PatchBox], queue: ReferenceQueue,
                         heads: AlignmentHeads, encoder, projector, lm,
                         temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Full alignment loss for one image against its class queue."""
    image_hw = image.shape[:2]
    visual_dists = []
    with no_grad():
        for box in boxes:
            v = heads.embed_patch(fmap, box, image_hw)
            visual_dists.append(visual_similarity(v.data, queue, temperature))
    thetas = queue_semantic_tokens(queue, heads, lm)
    tokens = patch_tokens_lm(image, boxes, encoder, projector)
    pairs = []
    for j, p in enumerate(visual_dists):
        row = F.take_rows(tokens, np.array([j])).reshape((tokens.shape[1],))
        pairs.append((p, text_visual_similarity(row, thetas, temperature)))
    return alignment_loss(pairs, queue.positives)
