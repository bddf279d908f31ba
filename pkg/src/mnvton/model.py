"""Full denoisers: embedders, block stacks and the zero-initialised output layer."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import rng as rngmod
from .blocks import (
    GROUPINGS,
    REFERENCE_GROUPING,
    BlockVariant,
    DiTBlock,
    block_forward,
    dual_layer_forward,
    modulate,
)
from .modality import (
    GridShape,
    ModalityLayout,
    ModalityTag,
    TokenStream,
    assemble_sequence,
    build_pos_embed,
    interpolate_pos_embed,
    patchify,
)
from .errors import ConfigError
from .nn import Linear, Module
from .tensor import Tensor, add, parameter, reshape, silu, split

PAD, UPPER, LOWER = 0, 1, 2
LABELS = {"upper": UPPER, "lower": LOWER}


@dataclass(frozen=True)
class ModelConfig:
    d: int = 48
    heads: int = 4
    depth: int = 2
    patch: int = 2
    mlp_ratio: int = 4
    freq_dim: int = 256
    temporal: bool = True
    vocab: int = 3
    text_len: int = 1
    channels: int = 3
    garment_size: int = 8
    height: int = 16
    width: int = 16
    frames: int = 1

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} must be divisible by heads={self.heads}")
        axes = 3 if self.temporal else 2
        if self.d % (2 * axes):
            raise ConfigError(f"d={self.d} must be divisible by {2 * axes} for position embeddings")

    @property
    def garment_grid(self) -> GridShape:
        return GridShape(1, self.garment_size, self.garment_size, self.channels)

    @property
    def target_grid(self) -> GridShape:
        return GridShape(self.frames, self.height, self.width, self.channels)

    @property
    def target_in_dim(self) -> int:
        # noisy target | agnostic target | mask, channel-concatenated per pixel
        return self.patch * self.patch * (2 * self.channels + 1)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    """Model inputs for ``B`` samples; visual arrays are ``[B, f, h, w, c]``."""

    text_ids: np.ndarray  # [B, n] int
    garment: np.ndarray  # [B, 1, hg, wg, c]
    noisy: np.ndarray  # [B, f, h, w, c]
    agnostic: np.ndarray  # [B, f, h, w, c]
    mask: np.ndarray  # [B, f, h, w, 1]

    def __len__(self) -> int:
        return self.noisy.shape[0]

    def with_noisy(self, noisy: np.ndarray) -> Batch:
        return Batch(self.text_ids, self.garment, noisy, self.agnostic, self.mask)

    def target_tokens(self, patch: int) -> np.ndarray:
        return patchify(np.concatenate([self.noisy, self.agnostic, self.mask], axis=-1), patch)

    def garment_tokens(self, patch: int) -> np.ndarray:
        """The garment laid out like clean, unmasked target context: ``[0 | garment | 0]``."""
        g = self.garment
        empty = np.zeros(g.shape[:-1] + (1,))
        return patchify(np.concatenate([np.zeros_like(g), g, empty], axis=-1), patch)


def timestep_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


class TimestepEmbedder(Module):
    def __init__(self, rng: np.random.Generator, d: int, freq_dim: int):
        self.freq_dim = freq_dim
        self.fc1 = Linear(rng, freq_dim, d, init="normal")
        self.fc2 = Linear(rng, d, d, init="normal")

    def __call__(self, t: np.ndarray) -> Tensor:
        return self.fc2(silu(self.fc1(Tensor(timestep_embedding(t, self.freq_dim)))))


class GlobalModulation(Module):
    """``silu(t_emb) -> [B, 6d]``; the gate rows start at zero (AdaLN-zero)."""

    def __init__(self, rng: np.random.Generator, d: int):
        self.proj = Linear(rng, d, 6 * d, init="normal")
        w = self.proj.weight.data.reshape(d, 6, d)
        w[:, 2, :] = 0.0
        w[:, 5, :] = 0.0

    def __call__(self, temb: Tensor) -> Tensor:
        return self.proj(silu(temb))


class PosEmbedCache:
    def __init__(self, base: GridShape, patch: int, d: int, temporal: bool):
        self.base, self.patch = base, patch
        self.table = build_pos_embed(base, patch, d, temporal)
        self._cache: dict[GridShape, np.ndarray] = {base: self.table}

    def __call__(self, grid: GridShape) -> np.ndarray:
        key = GridShape(grid.frames, grid.height, grid.width, self.base.channels)
        if key not in self._cache:
            self._cache[key] = interpolate_pos_embed(self.table, self.base, key, self.patch)
        return self._cache[key]


class FinalLayer(Module):
    def __init__(self, d: int, out_dim: int):
        self.table = parameter(np.zeros((2, d)))
        self.proj = Linear(None, d, out_dim, init="zeros")

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        b, d = temb.shape
        mod = add(reshape(temb, (b, 1, d)), self.table)
        shift, scale = split(mod, [1, 1], axis=1)
        return self.proj(modulate(x, shift, scale))


class ReferenceNet(Module):
    """Independent garment-only stack mirroring the main network's layers."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.t_embedder = TimestepEmbedder(rng, cfg.d, cfg.freq_dim)
        self.t_block = GlobalModulation(rng, cfg.d)
        self.patch_proj = Linear(rng, cfg.target_in_dim, cfg.d)
        self.blocks = [
            DiTBlock(rng, cfg.d, cfg.heads, len(REFERENCE_GROUPING), cfg.mlp_ratio)
            for _ in range(cfg.depth)
        ]


class Denoiser(Module):
    """Epsilon-prediction transformer over ``[text | garment | target]`` tokens."""

    def __init__(self, cfg: ModelConfig, variant: BlockVariant | str, seed: int = 0):
        self.cfg = cfg
        self.variant = BlockVariant(variant)
        rng = rngmod.generator(seed, "init", self.variant.value)
        d = cfg.d
        self.text_embed = parameter(rng.normal(0.0, 0.02, size=(cfg.vocab, d)))
        self.segment_embed = parameter(rng.normal(0.0, 0.02, size=(3, d)))
        self.t_embedder = TimestepEmbedder(rng, d, cfg.freq_dim)
        self.t_block = GlobalModulation(rng, d)
        # one patch embedding for garment and target, so both live in the same token space
        self.patch_proj = Linear(rng, cfg.target_in_dim, d)
        n_groups = len(GROUPINGS[self.variant])
        self.blocks = [DiTBlock(rng, d, cfg.heads, n_groups, cfg.mlp_ratio) for _ in range(cfg.depth)]
        self.final = FinalLayer(d, cfg.patch_dim)
        if self.variant is BlockVariant.DUAL:
            self.reference = ReferenceNet(rng, cfg)
        self._garment_pos = PosEmbedCache(cfg.garment_grid, cfg.patch, d, cfg.temporal)
        self._target_pos = PosEmbedCache(cfg.target_grid, cfg.patch, d, cfg.temporal)

    # -- inputs ------------------------------------------------------------------------
    def _garment_tokens(self, proj: Linear, batch: Batch) -> Tensor:
        grid = GridShape.of(batch.garment)
        return add(proj(Tensor(batch.garment_tokens(self.cfg.patch))), self._garment_pos(grid))

    def _target_tokens(self, batch: Batch) -> Tensor:
        grid = GridShape.of(batch.noisy)
        return add(self.patch_proj(Tensor(batch.target_tokens(self.cfg.patch))), self._target_pos(grid))

    def embed(self, batch: Batch, with_garment: bool = True) -> TokenStream:
        garment = self._garment_tokens(self.patch_proj, batch) if with_garment else None
        return assemble_sequence(
            batch.text_ids,
            garment,
            self._target_tokens(batch),
            self.text_embed,
            segment_embed=self.segment_embed,
            grids={
                ModalityTag.GARMENT: GridShape.of(batch.garment),
                ModalityTag.TARGET: GridShape.of(batch.noisy),
            },
        )

    # -- forward -----------------------------------------------------------------------
    def __call__(self, batch: Batch, t: np.ndarray, capture: list | None = None) -> Tensor:
        """Predicted noise for the target tokens, ``[B, L_target, p*p*c]``."""
        t = np.broadcast_to(np.asarray(t), (len(batch),))
        temb = self.t_embedder(t)
        cond = self.t_block(temb)
        if self.variant is BlockVariant.DUAL:
            stream = self._dual_stack(batch, t, cond, capture)
        else:
            stream = self.embed(batch)
            for block in self.blocks:
                if self.variant is BlockVariant.NAIVE_SPLIT:
                    stream = block_forward(
                        stream, cond, block, GROUPINGS[self.variant],
                        query_tags=(ModalityTag.TEXT, ModalityTag.TARGET),
                    ).stream
                else:
                    stream = block_forward(stream, cond, block, GROUPINGS[self.variant]).stream
                if capture is not None:
                    capture.append(stream)
        return self.final(stream.segment(ModalityTag.TARGET), temb)

    def _dual_stack(self, batch: Batch, t: np.ndarray, cond: Tensor, capture: list | None) -> TokenStream:
        ref_net = self.reference
        ref_cond = ref_net.t_block(ref_net.t_embedder(t))
        garment = self._garment_tokens(ref_net.patch_proj, batch)
        ref = TokenStream(garment, ModalityLayout.from_counts(0, garment.shape[-2], 0))
        main = self.embed(batch, with_garment=False)
        for mb, rb in zip(self.blocks, ref_net.blocks):
            main, ref = dual_layer_forward(main, ref, cond, ref_cond, mb, rb)
            if capture is not None:
                capture.append(ref)
        return main


def make_text_ids(labels, text_len: int = 1) -> np.ndarray:
    """Label names or ids -> ``[B, text_len]`` ids (label first, then padding)."""
    ids = np.full((len(labels), text_len), PAD, dtype=np.int64)
    if text_len:
        ids[:, 0] = [LABELS[x] if isinstance(x, str) else int(x) for x in labels]
    return ids


def count_params(model: Module) -> int:
    return model.num_parameters()
