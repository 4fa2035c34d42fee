"""Locality-aware compression of visual tokens for the language model.

The projector turns the encoder's last token grid into a shorter
sequence while pulling in detail from earlier levels:

1. a local-context learner alternates self-attention with deformable
   sampling layers, letting each grid cell gather features from learned
   nearby offsets;
2. a spatial downsampler (residual conv blocks around an average pool)
   shrinks the side length by ``rho``, so N tokens become N / rho**2;
3. for each of the last ``fuse_levels`` earlier encoder levels, every
   coarse token attends only over its own rho x rho sub-region of that
   level's grid (coarse-to-fine attention);
4. the per-level attention outputs are concatenated and passed through
   a zero-initialized fusion linear, then added residually to the
   downsampled tokens. At init the whole refinement is therefore an
   exact no-op on the downsampled tokens.

A plain pooled-linear projector with the same output geometry is
provided as the ablation baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .encoders import MultiLevelFeatures, SelfAttention
from .errors import ParameterError, ShapeError
from .numcore import (LayerNorm, Linear, Module, ModuleList, ResidualBlock,
                      Tensor, functional as F)


@dataclass
class CompressorConfig:
    """Geometry and capacity knobs for :class:`TokenCompressor`."""

    rho: int = 2                 # side-length reduction; tokens shrink by rho**2
    learner_blocks: int = 2      # attention+deformable pairs in the learner
    taps: int = 4                # sampling taps per query in a deformable layer
    stride: int = 1              # spacing multiplier for tap offsets
    attn_dim: Optional[int] = None   # query/key width; defaults to token width
    fuse_levels: int = 4         # how many earlier levels feed the fusion

    def validate(self, grid_side: int, num_levels: int) -> None:
        if self.rho < 1:
            raise ParameterError(f"rho must be >= 1, got {self.rho}")
        if grid_side % self.rho:
            raise ParameterError(f"rho {self.rho} must divide grid side {grid_side}")
        if self.learner_blocks < 1:
            raise ParameterError("learner needs at least one block")
        if self.taps < 1:
            raise ParameterError(f"taps must be >= 1, got {self.taps}")
        if self.stride < 1:
            raise ParameterError(f"stride must be >= 1, got {self.stride}")
        if not 1 <= self.fuse_levels <= num_levels - 2:
            raise ParameterError(f"fuse_levels must lie in [1, {num_levels - 2}] "
                                 f"for {num_levels} levels, got {self.fuse_levels}")
        if self.attn_dim is not None and self.attn_dim < 1:
            raise ParameterError("attn_dim must be positive")


def tap_offsets(taps: int) -> np.ndarray:
    """Fixed base offsets for the sampling taps: the first ``taps``
    cells of the smallest square grid, row-major, anchored at the query."""
    side = math.ceil(math.sqrt(taps))
    grid = [(r, c) for r in range(side) for c in range(side)]
    return np.array(grid[:taps], dtype=float)


class DeformableSampler(Module):
    """Offset-predicting sampler with per-tap mixing matrices.

    Each query at grid position p samples ``taps`` locations
    ``p + stride * (base_k + delta_k)`` bilinearly, where the deltas
    come from a zero-initialized linear head on the query itself. The
    samples are mixed by learned per-tap matrices and summed. With the
    head still at zero the layer equals fixed strided sampling with the
    same mixing weights, bit for bit.
    """

    def __init__(self, rng: np.random.Generator, grid_side: int, width: int,
                 taps: int = 4, stride: int = 1):
        super().__init__()
        self.grid_side = grid_side
        self.width = width
        self.taps = taps
        self.stride = stride
        self.offset_head = Linear(rng, width, 2 * taps, zero_init=True)
        self.mix = Tensor(rng.normal(0.0, 1.0 / math.sqrt(taps * width),
                                     size=(taps * width, width)),
                          requires_grad=True)
        self.mix_bias = Tensor(np.zeros(width), requires_grad=True)
        rows, cols = np.divmod(np.arange(grid_side * grid_side), grid_side)
        pos = np.stack([rows, cols], axis=-1).astype(float)       # [N, 2]
        self.base_points = pos[:, None, :] + stride * tap_offsets(taps)[None]

    def forward(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        g = self.grid_side
        if n != g * g or c != self.width:
            raise ShapeError(f"expected [B,{g * g},{self.width}] tokens, got "
                             f"{x.shape}")
        k = self.taps
        deltas = self.offset_head(x).reshape((b, n, k, 2))
        pts = deltas * float(self.stride) + Tensor(self.base_points)
        sampled = F.bilinear_sample(x.reshape((b, g, g, c)),
                                    pts.reshape((b, n * k, 2)))
        mixed = sampled.reshape((b, n, k * c)) @ self.mix
        return mixed + self.mix_bias

    __call__ = forward


class LearnerBlock(Module):
    """Self-attention then deformable sampling, both pre-norm residual."""

    def __init__(self, rng: np.random.Generator, grid_side: int, width: int,
                 taps: int, stride: int):
        super().__init__()
        self.ln1 = LayerNorm(width)
        self.attn = SelfAttention(rng, width)
        self.ln2 = LayerNorm(width)
        self.deform = DeformableSampler(rng, grid_side, width, taps, stride)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.deform(self.ln2(x))

    __call__ = forward


class SpatialDownsampler(Module):
    """Residual conv blocks around an average pool to the coarse grid."""

    def __init__(self, rng: np.random.Generator, grid_side: int, width: int,
                 rho: int, blocks: int):
        super().__init__()
        self.grid_side = grid_side
        self.rho = rho
        self.width = width
        self.pre = ModuleList([ResidualBlock(rng, width, width)
                               for _ in range(blocks)])
        self.post = ModuleList([ResidualBlock(rng, width, width)
                                for _ in range(blocks)])

    def forward(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        g = self.grid_side
        if n != g * g:
            raise ShapeError(f"expected {g * g} tokens, got {n}")
        out_side = g // self.rho
        grid = x.reshape((b, g, g, c))
        for block in self.pre:
            grid = block(grid)
        grid = F.adaptive_avg_pool(grid, (out_side, out_side))
        for block in self.post:
            grid = block(grid)
        return grid.reshape((b, out_side * out_side, c))

    __call__ = forward


def region_indices(grid_side: int, rho: int) -> np.ndarray:
    """[M, rho*rho] indices of the fine tokens under each coarse cell."""
    out_side = grid_side // rho
    idx = np.arange(grid_side * grid_side).reshape(grid_side, grid_side)
    regions = []
    for ci in range(out_side):
        for cj in range(out_side):
            block = idx[ci * rho:(ci + 1) * rho, cj * rho:(cj + 1) * rho]
            regions.append(block.reshape(-1))
    return np.stack(regions)


class CoarseToFine(Module):
    """Each coarse query attends over its own sub-region of a fine level.

    Keys and queries live in ``attn_dim``; values stay at token width so
    the output can be fused residually. Tokens outside a query's region
    can never influence that query.
    """

    def __init__(self, rng: np.random.Generator, grid_side: int, width: int,
                 rho: int, attn_dim: int):
        super().__init__()
        self.rho = rho
        self.grid_side = grid_side
        self.wq = Linear(rng, width, attn_dim)
        self.wk = Linear(rng, width, attn_dim)
        self.wv = Linear(rng, width, width)
        self.scale = 1.0 / math.sqrt(attn_dim)
        self.regions = region_indices(grid_side, rho)

    def forward(self, coarse: Tensor, fine: Tensor) -> Tensor:
        b, m, c = coarse.shape
        if m != self.regions.shape[0]:
            raise ShapeError(f"expected {self.regions.shape[0]} coarse tokens, "
                             f"got {m}")
        if fine.shape[0] != b or fine.shape[1] != self.grid_side ** 2:
            raise ShapeError(f"fine level shape {fine.shape} does not match "
                             f"grid side {self.grid_side}")
        r2 = self.regions.shape[1]
        fine_t = fine.transpose((1, 0, 2))                     # [N, B, C]
        gathered = F.take_rows(fine_t, self.regions)           # [M, r2, B, C]
        gathered = gathered.transpose((2, 0, 1, 3))            # [B, M, r2, C]
        q = self.wq(coarse).reshape((b, m, -1, 1))             # [B, M, d, 1]
        keys = self.wk(gathered)                               # [B, M, r2, d]
        vals = self.wv(gathered)                               # [B, M, r2, C]
        scores = (keys @ q) * self.scale                       # [B, M, r2, 1]
        att = F.softmax(scores, axis=2)
        out = att.transpose((0, 1, 3, 2)) @ vals               # [B, M, 1, C]
        return out.reshape((b, m, c))

    __call__ = forward


class TokenCompressor(Module):
    """Full projector: learn local context, downsample, fuse, project."""

    def __init__(self, rng: np.random.Generator, grid_side: int, width: int,
                 num_levels: int, lm_width: int,
                 cfg: Optional[CompressorConfig] = None):
        super().__init__()
        self.cfg = cfg or CompressorConfig()
        self.cfg.validate(grid_side, num_levels)
        self.grid_side = grid_side
        self.width = width
        self.num_levels = num_levels
        attn_dim = self.cfg.attn_dim or width
        self.learner = ModuleList([
            LearnerBlock(rng, grid_side, width, self.cfg.taps, self.cfg.stride)
            for _ in range(self.cfg.learner_blocks)])
        self.down = SpatialDownsampler(rng, grid_side, width, self.cfg.rho,
                                       self.cfg.learner_blocks)
        self.cross = ModuleList([
            CoarseToFine(rng, grid_side, width, self.cfg.rho, attn_dim)
            for _ in range(self.cfg.fuse_levels)])
        self.fusion = Linear(rng, self.cfg.fuse_levels * width, width,
                             zero_init=True)
        self.to_llm = Linear(rng, width, lm_width)

    @property
    def num_tokens(self) -> int:
        return (self.grid_side // self.cfg.rho) ** 2

    def fused_level_range(self) -> range:
        """Indices of the encoder levels consumed by the fusion stage:
        the ``fuse_levels`` levels immediately before the last one."""
        last = self.num_levels - 1
        return range(last - self.cfg.fuse_levels, last)

    def refine_last(self, feats: MultiLevelFeatures) -> Tensor:
        x = feats.levels[-1]
        for block in self.learner:
            x = block(x)
        return x

    def downsample(self, refined: Tensor) -> Tensor:
        return self.down(refined)

    def fuse(self, coarse: Tensor, feats: MultiLevelFeatures) -> Tensor:
        attended: List[Tensor] = []
        for cross, lvl in zip(self.cross, self.fused_level_range()):
            attended.append(cross(coarse, feats.levels[lvl]))
        return self.fusion(F.concat(attended, axis=-1))

    def compress(self, feats: MultiLevelFeatures) -> Tensor:
        """[B, M, width] compressed tokens before the LM-space projection."""
        if feats.num_levels != self.num_levels:
            raise ShapeError(f"expected {self.num_levels} levels, got "
                             f"{feats.num_levels}")
        if feats.grid_side != self.grid_side:
            raise ShapeError(f"expected grid side {self.grid_side}, got "
                             f"{feats.grid_side}")
        coarse = self.downsample(self.refine_last(feats))
        return coarse + self.fuse(coarse, feats)

    def project(self, feats: MultiLevelFeatures) -> Tensor:
        """[B, M, lm_width] visual tokens for the language model."""
        return self.to_llm(self.compress(feats))

    __call__ = project


class PooledProjector(Module):
    """Ablation baseline: average-pool the last level and apply a linear
    map. Same output geometry as :class:`TokenCompressor`, none of the
    locality machinery."""

    def __init__(self, rng: np.random.Generator, grid_side: int, width: int,
                 num_levels: int, lm_width: int,
                 cfg: Optional[CompressorConfig] = None):
        super().__init__()
        self.cfg = cfg or CompressorConfig()
        self.cfg.validate(grid_side, num_levels)
        self.grid_side = grid_side
        self.num_levels = num_levels
        self.to_llm = Linear(rng, width, lm_width)

    @property
    def num_tokens(self) -> int:
        return (self.grid_side // self.cfg.rho) ** 2

    def project(self, feats: MultiLevelFeatures) -> Tensor:
        b, n, c = feats.levels[-1].shape
        g = self.grid_side
        out_side = g // self.cfg.rho
        grid = feats.levels[-1].reshape((b, g, g, c))
        pooled = F.adaptive_avg_pool(grid, (out_side, out_side))
        return self.to_llm(pooled.reshape((b, out_side * out_side, c)))

    __call__ = project
