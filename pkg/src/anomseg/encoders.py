"""Stand-in encoders: a small ViT, a conv backbone, and a word-level LM.

These are deliberately tiny versions of the usual frozen giants. The
visual encoder exposes one token grid per stage (the patch embedding is
level 0, each transformer block adds one more) so downstream consumers
can fuse shallow and deep features. The backbone produces a single
feature map at a fixed fraction of the input resolution. The language
model is a causal transformer over a word-level vocabulary extended
with the ``<image>`` and ``<seg>`` placeholder tokens.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (CapacityError, ContractError, ParameterError, ShapeError,
                     TokenizationError)
from .numcore import (Embedding, LayerNorm, Linear, Module, ModuleList, Tensor,
                      functional as F)

IMAGE_TOKEN = "<image>"
SEG_TOKEN = "<seg>"

_WORD_RE = re.compile(r"<image>|<seg>|[a-z0-9]+|[.,?:]")


# ---------------------------------------------------------------------------
# attention building blocks


class SelfAttention(Module):
    """Single-head scaled dot-product self-attention over [B, N, C]."""

    def __init__(self, rng: np.random.Generator, dim: int):
        super().__init__()
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)
        self.scale = 1.0 / math.sqrt(dim)

    def forward(self, x: Tensor, additive_mask: Optional[np.ndarray] = None) -> Tensor:
        q, k, v = self.wq(x), self.wk(x), self.wv(x)
        scores = (q @ k.transpose((0, 2, 1))) * self.scale
        if additive_mask is not None:
            scores = scores + Tensor(additive_mask)
        att = F.softmax(scores, axis=-1)
        return self.wo(att @ v)

    __call__ = forward


class TransformerBlock(Module):
    """Pre-norm block: attention then a 4x MLP, both residual."""

    def __init__(self, rng: np.random.Generator, dim: int):
        super().__init__()
        self.ln1 = LayerNorm(dim)
        self.attn = SelfAttention(rng, dim)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, 4 * dim)
        self.fc2 = Linear(rng, 4 * dim, dim)

    def forward(self, x: Tensor, additive_mask: Optional[np.ndarray] = None) -> Tensor:
        x = x + self.attn(self.ln1(x), additive_mask)
        return x + self.fc2(self.fc1(self.ln2(x)).relu())

    __call__ = forward


def causal_mask(n: int) -> np.ndarray:
    """Additive mask forbidding attention to future positions.

    Uses a large finite negative instead of -inf so the graph's finite
    guard stays meaningful; the exp underflows to exactly zero, which
    keeps prefix logits bit-identical under suffix edits.
    """
    mask = np.zeros((n, n))
    mask[np.triu_indices(n, k=1)] = -1e9
    return mask[None]


# ---------------------------------------------------------------------------
# visual encoder


@dataclass
class MultiLevelFeatures:
    """Per-stage token grids from the visual encoder.

    ``levels[0]`` is the shallowest (the raw patch embedding);
    ``levels[-1]`` is the deepest block output. All levels share the
    same [B, N, C] shape and N must be a perfect square.
    """

    levels: List[Tensor]

    def __post_init__(self):
        if not self.levels:
            raise ShapeError("MultiLevelFeatures needs at least one level")
        shape = self.levels[0].shape
        for i, lvl in enumerate(self.levels):
            if lvl.shape != shape:
                raise ShapeError(f"level {i} shape {lvl.shape} != level 0 {shape}")
        side = int(round(math.sqrt(shape[1])))
        if side * side != shape[1]:
            raise ShapeError(f"token count {shape[1]} is not a perfect square")

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def grid_side(self) -> int:
        return int(round(math.sqrt(self.levels[0].shape[1])))

    @property
    def width(self) -> int:
        return self.levels[0].shape[2]


class VisualEncoder(Module):
    """Patch-embedding transformer that keeps every intermediate level.

    ``num_levels`` counts the patch embedding as level 0, so the model
    runs ``num_levels - 1`` transformer blocks.
    """

    def __init__(self, rng: np.random.Generator, image_hw: Tuple[int, int] = (64, 64),
                 patch: int = 8, width: int = 64, num_levels: int = 6):
        super().__init__()
        h, w = image_hw
        if h % patch or w % patch:
            raise ParameterError(f"patch {patch} must divide image {image_hw}")
        if num_levels < 2:
            raise ParameterError("need at least the embedding level plus one block")
        self.image_hw = (h, w)
        self.patch = patch
        self.width = width
        self.num_levels = num_levels
        self.grid = (h // patch, w // patch)
        n_tokens = self.grid[0] * self.grid[1]
        self.embed = Linear(rng, patch * patch * 3, width)
        self.pos = Tensor(rng.normal(0.0, 0.02, size=(n_tokens, width)),
                          requires_grad=True)
        self.blocks = ModuleList([TransformerBlock(rng, width)
                                  for _ in range(num_levels - 1)])

    def patchify(self, images: Tensor) -> Tensor:
        b, h, w, c = images.shape
        if (h, w) != self.image_hw or c != 3:
            raise ShapeError(f"expected [B,{self.image_hw[0]},{self.image_hw[1]},3], "
                             f"got {images.shape}")
        p = self.patch
        gh, gw = self.grid
        x = images.reshape((b, gh, p, gw, p, c))
        x = x.transpose((0, 1, 3, 2, 4, 5))
        return x.reshape((b, gh * gw, p * p * c))

    def forward(self, images: Tensor) -> MultiLevelFeatures:
        x = self.embed(self.patchify(images)) + self.pos
        levels = [x]
        for block in self.blocks:
            x = block(x)
            levels.append(x)
        return MultiLevelFeatures(levels)

    __call__ = forward


# ---------------------------------------------------------------------------
# segmentation backbone


class Backbone(Module):
    """Residual conv stack producing one map at 1/4 input resolution."""

    STRIDES = (2, 1, 2, 1)

    def __init__(self, rng: np.random.Generator, out_ch: int = 64):
        super().__init__()
        from .numcore import Conv2d, ResidualBlock
        widths = [max(16, out_ch // 2), max(16, out_ch // 2),
                  out_ch, out_ch]
        self.stem = Conv2d(rng, 3, widths[0], kernel=3, stride=1, padding=1)
        blocks = []
        in_ch = widths[0]
        for w_, s in zip(widths, self.STRIDES):
            blocks.append(ResidualBlock(rng, in_ch, w_, stride=s))
            in_ch = w_
        self.blocks = ModuleList(blocks)
        self.out_ch = out_ch
        self.stride = 1
        for s in self.STRIDES:
            self.stride *= s

    def forward(self, images: Tensor) -> Tensor:
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ShapeError(f"backbone expects [B,H,W,3], got {images.shape}")
        if images.shape[1] % self.stride or images.shape[2] % self.stride:
            raise ShapeError(f"input spatial dims {images.shape[1:3]} must be "
                             f"divisible by the total stride {self.stride}")
        x = self.stem(images).relu()
        for block in self.blocks:
            x = block(x)
        return x

    __call__ = forward


# ---------------------------------------------------------------------------
# tokenizer and vocabulary


def word_tokenize(text: str) -> List[str]:
    """Lowercased word-level tokens; punctuation splits off, and the
    ``<image>``/``<seg>`` placeholders survive as single tokens."""
    return _WORD_RE.findall(text.lower())


class Vocabulary:
    """Closed word-level vocabulary. Unknown words are an error, not an
    UNK bucket: the synthetic corpus is fully enumerable."""

    def __init__(self, words: Sequence[str]):
        seen: Dict[str, int] = {}
        for w in [IMAGE_TOKEN, SEG_TOKEN, *words]:
            if w not in seen:
                seen[w] = len(seen)
        self.token_to_id = seen
        self.id_to_token = {i: t for t, i in seen.items()}

    @classmethod
    def from_corpus(cls, texts: Sequence[str]) -> "Vocabulary":
        words: List[str] = []
        for text in texts:
            words.extend(word_tokenize(text))
        return cls(sorted(set(words)))

    def __len__(self) -> int:
        return len(self.token_to_id)

    @property
    def image_id(self) -> int:
        return self.token_to_id[IMAGE_TOKEN]

    @property
    def seg_id(self) -> int:
        return self.token_to_id[SEG_TOKEN]

    def encode(self, text: str) -> np.ndarray:
        tokens = word_tokenize(text)
        if not tokens:
            raise TokenizationError(f"no tokens in text: {text!r}")
        missing = sorted({t for t in tokens if t not in self.token_to_id})
        if missing:
            raise TokenizationError(f"words not in vocabulary: {missing}")
        return np.array([self.token_to_id[t] for t in tokens], dtype=np.int64)

    def decode(self, ids: Sequence[int]) -> str:
        bad = [i for i in ids if int(i) not in self.id_to_token]
        if bad:
            raise TokenizationError(f"ids not in vocabulary: {bad}")
        return " ".join(self.id_to_token[int(i)] for i in ids)


# ---------------------------------------------------------------------------
# token sequences


@dataclass
class TokenSequence:
    """One multimodal LM input.

    ``ids`` covers only the text positions. The final embedding layout
    is ``visual tokens first, then text``; ``answer_start`` indexes into
    the text ids where the supervised answer begins.
    """

    ids: np.ndarray
    visual: Optional[Tensor]
    answer_start: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 1 or self.ids.size == 0:
            raise ShapeError("TokenSequence needs a non-empty 1-D id array")
        if not 0 <= self.answer_start <= self.ids.size:
            raise ShapeError(f"answer_start {self.answer_start} outside sequence "
                             f"of {self.ids.size} text tokens")

    @property
    def num_visual(self) -> int:
        return 0 if self.visual is None else self.visual.shape[0]

    @property
    def length(self) -> int:
        return self.num_visual + self.ids.size

    def seg_position(self, seg_id: int) -> Optional[int]:
        """Absolute position of the single ``<seg>`` token, if present."""
        hits = np.flatnonzero(self.ids == seg_id)
        if hits.size == 0:
            return None
        if hits.size > 1:
            raise ContractError(f"sequence contains {hits.size} seg tokens")
        return self.num_visual + int(hits[0])


# ---------------------------------------------------------------------------
# language model


class TinyLM(Module):
    """Word-level causal transformer with spliced visual embeddings."""

    def __init__(self, rng: np.random.Generator, vocab: Vocabulary,
                 width: int = 128, depth: int = 2, max_context: int = 160):
        super().__init__()
        self.vocab = vocab
        self.width = width
        self.max_context = max_context
        self.tok = Embedding(rng, len(vocab), width)
        self.pos = Tensor(rng.normal(0.0, 0.02, size=(max_context, width)),
                          requires_grad=True)
        self.blocks = ModuleList([TransformerBlock(rng, width)
                                  for _ in range(depth)])
        self.ln_f = LayerNorm(width)
        self.head = Linear(rng, width, len(vocab))

    # -- embedding assembly -------------------------------------------------

    def splice(self, seq: TokenSequence) -> Tensor:
        """[T, width] embeddings: visual tokens (already in LM space)
        followed by text token embeddings."""
        text = self.tok(seq.ids)
        if seq.visual is None:
            return text
        if seq.visual.ndim != 2 or seq.visual.shape[1] != self.width:
            raise ShapeError(f"visual tokens must be [M,{self.width}], got "
                             f"{seq.visual.shape}")
        return F.concat([seq.visual, text], axis=0)

    # -- forward ------------------------------------------------------------

    def forward(self, embeds: Tensor) -> Tuple[Tensor, Tensor]:
        """Run the causal stack over [T, width] embeddings.

        Returns (logits [T, vocab], hidden [T, width]); hidden is the
        final normed state the logits are read from.
        """
        if embeds.ndim != 2 or embeds.shape[1] != self.width:
            raise ShapeError(f"expected [T,{self.width}] embeddings, got "
                             f"{embeds.shape}")
        t = embeds.shape[0]
        if t > self.max_context:
            raise CapacityError(f"sequence length {t} exceeds context "
                                f"{self.max_context}")
        x = (embeds + F.narrow(self.pos, 0, 0, t)).reshape((1, t, self.width))
        mask = causal_mask(t)
        for block in self.blocks:
            x = block(x, mask)
        hidden = self.ln_f(x).reshape((t, self.width))
        logits = self.head(hidden)
        return logits, hidden

    __call__ = forward

    def embed_text(self, text: str) -> Tuple[np.ndarray, Tensor]:
        """Tokenize and mean-pool the embedding rows: a fixed-length
        encoding used by the text-conditioning head."""
        ids = self.vocab.encode(text)
        return ids, self.tok(ids).mean(axis=0)

    def greedy_decode(self, prefix: Tensor, max_new: int = 64,
                      stop_id: Optional[int] = None) -> List[int]:
        """Greedily extend [T, width] prefix embeddings.

        Deterministic argmax decoding; stops after emitting ``stop_id``
        or after ``max_new`` tokens. Returns only the generated ids.
        """
        from .numcore import no_grad
        out: List[int] = []
        embeds = prefix
        with no_grad():
            for _ in range(max_new):
                if embeds.shape[0] >= self.max_context:
                    break
                logits, _ = self.forward(embeds)
                next_id = int(np.argmax(logits.data[-1]))
                out.append(next_id)
                if stop_id is not None and next_id == stop_id:
                    break
                nxt = self.tok(np.array([next_id]))
                embeds = F.concat([embeds, nxt], axis=0)
        return out
