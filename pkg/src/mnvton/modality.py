"""Token streams: patchification, modality layouts and sin-cos position embeddings."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, add, concat, gather_rows, split


class ModalityTag(enum.IntEnum):
    TEXT = 0
    GARMENT = 1
    TARGET = 2


CANONICAL_ORDER = (ModalityTag.TEXT, ModalityTag.GARMENT, ModalityTag.TARGET)


class VocabularyError(KeyError):
    pass


@dataclass(frozen=True)
class GridShape:
    frames: int
    height: int
    width: int
    channels: int

    def __post_init__(self):
        for name in ("frames", "height", "width", "channels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"GridShape.{name} must be positive, got {getattr(self, name)}")

    @classmethod
    def of(cls, array: np.ndarray) -> GridShape:
        f, h, w, c = array.shape[-4:]
        return cls(f, h, w, c)

    def token_grid(self, patch: int) -> tuple[int, int, int]:
        if self.height % patch or self.width % patch:
            raise ValueError(
                f"patch size {patch} does not divide grid {self.height}x{self.width}"
            )
        return self.frames, self.height // patch, self.width // patch

    def tokens(self, patch: int) -> int:
        f, gh, gw = self.token_grid(patch)
        return f * gh * gw


@dataclass(frozen=True)
class ModalityLayout:
    """Token ranges ``[start, end)`` for text, garment and target, in canonical order."""

    text: tuple[int, int]
    garment: tuple[int, int]
    target: tuple[int, int]

    @classmethod
    def from_counts(cls, n_text: int, n_garment: int, n_target: int) -> ModalityLayout:
        a = n_text
        b = a + n_garment
        return cls((0, a), (a, b), (b, b + n_target))

    def __post_init__(self):
        prev = 0
        for tag in CANONICAL_ORDER:
            s, e = self[tag]
            if s != prev or e < s:
                raise ValueError(f"layout ranges must be contiguous in canonical order: {self}")
            prev = e

    def __getitem__(self, tag: ModalityTag) -> tuple[int, int]:
        return (self.text, self.garment, self.target)[int(tag)]

    @property
    def total(self) -> int:
        return self.target[1]

    def length(self, tag: ModalityTag) -> int:
        s, e = self[tag]
        return e - s

    def counts(self) -> tuple[int, int, int]:
        return tuple(self.length(t) for t in CANONICAL_ORDER)

    def present(self) -> tuple[ModalityTag, ...]:
        return tuple(t for t in CANONICAL_ORDER if self.length(t) > 0)

    def span(self, tags) -> tuple[int, int]:
        """Range covered by a set of modalities; they must be adjacent."""
        ranges = sorted(self[t] for t in tags if self.length(t) > 0)
        if not ranges:
            return (0, 0)
        for (_, e), (s, _) in zip(ranges, ranges[1:]):
            if e != s:
                raise ValueError(f"modalities {sorted(tags)} are not contiguous in {self}")
        return ranges[0][0], ranges[-1][1]


@dataclass
class TokenStream:
    tokens: Tensor  # [..., L, d]
    layout: ModalityLayout
    grids: dict[ModalityTag, GridShape] | None = None

    def __post_init__(self):
        if self.tokens.shape[-2] != self.layout.total:
            raise ValueError(
                f"token count {self.tokens.shape[-2]} != layout total {self.layout.total}"
            )

    def segment(self, tag: ModalityTag) -> Tensor | None:
        return split_tokens(self.tokens, self.layout)[int(tag)]


# concat / split along the token axis -------------------------------------------------

def concat_tokens(parts: Sequence[Tensor | None]) -> tuple[Tensor, list[int]]:
    """Concatenate along the token axis (-2); ``None`` parts are empty segments."""
    present = [p for p in parts if p is not None]
    lengths = [0 if p is None else p.shape[-2] for p in parts]
    return concat(present, axis=-2), lengths


def split_tokens(tokens: Tensor, layout: ModalityLayout | Sequence[int]) -> list[Tensor | None]:
    counts = layout.counts() if isinstance(layout, ModalityLayout) else list(layout)
    if any(c < 0 for c in counts) or sum(counts) != tokens.shape[-2]:
        raise IndexError(f"layout {counts} does not match {tokens.shape[-2]} tokens")
    return split(tokens, counts, axis=-2)


# patchify --------------------------------------------------------------------------

def patchify(grid: np.ndarray, patch: int) -> np.ndarray:
    """``[..., f, h, w, c]`` -> ``[..., f*(h/p)*(w/p), p*p*c]``; frame-major token order."""
    *lead, f, h, w, c = grid.shape
    if h % patch or w % patch:
        raise ValueError(f"patch size {patch} does not divide grid {h}x{w}")
    gh, gw = h // patch, w // patch
    x = grid.reshape(*lead, f, gh, patch, gw, patch, c)
    n = len(lead)
    x = np.moveaxis(x, n + 3, n + 2)  # [..., f, gh, gw, p, p, c]
    return np.ascontiguousarray(x).reshape(*lead, f * gh * gw, patch * patch * c)


def unpatchify(tokens: np.ndarray, grid: GridShape, patch: int) -> np.ndarray:
    *lead, L, _ = tokens.shape
    f, gh, gw = grid.token_grid(patch)
    if L != f * gh * gw:
        raise ValueError(f"{L} tokens do not match grid {grid} with patch {patch}")
    x = tokens.reshape(*lead, f, gh, gw, patch, patch, grid.channels)
    n = len(lead)
    x = np.moveaxis(x, n + 2, n + 3)  # [..., f, gh, p, gw, p, c]
    return np.ascontiguousarray(x).reshape(*lead, f, grid.height, grid.width, grid.channels)


# position embeddings ------------------------------------------------------------------

def axis_frequencies(dim: int) -> np.ndarray:
    """Angular frequencies ``pi * 2**-k`` for one axis occupying ``dim`` channels.

    Octave spacing starts at the Nyquist rate, so neighbouring patches differ
    sharply in the fastest channel, and the code is injective on integer
    positions ``0 .. 2**(dim // 2) - 1``. Log-spaced frequencies with base
    10000 barely separate neighbours on a 4x4 token grid, which in practice
    left the denoiser unable to tell garment patches apart.
    """
    return np.pi * 2.0 ** -np.arange(dim // 2, dtype=np.float64)


def sincos_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    """``[n] -> [n, dim]``: sin of each frequency, then cos of each frequency."""
    angles = np.asarray(positions, dtype=np.float64)[:, None] * axis_frequencies(dim)[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _axis_dims(d: int, temporal: bool) -> int:
    n_axes = 3 if temporal else 2
    if d <= 0 or d % (2 * n_axes):
        raise ConfigError(f"embedding width {d} is not divisible by 2 x {n_axes} axes")
    return d // n_axes


def pos_embed_at(coords: np.ndarray, d: int, temporal: bool = True) -> np.ndarray:
    """Factorised embedding of continuous ``(frame, row, col)`` coordinates ``[n, 3]``."""
    per_axis = _axis_dims(d, temporal)
    axes = (0, 1, 2) if temporal else (1, 2)
    return np.concatenate([sincos_1d(coords[:, a], per_axis) for a in axes], axis=1)


def token_coords(grid: GridShape, patch: int) -> np.ndarray:
    f, gh, gw = grid.token_grid(patch)
    ff, rr, cc = np.meshgrid(np.arange(f), np.arange(gh), np.arange(gw), indexing="ij")
    return np.stack([ff.ravel(), rr.ravel(), cc.ravel()], axis=1).astype(np.float64)


def build_pos_embed(grid: GridShape, patch: int, d: int, temporal: bool = True) -> np.ndarray:
    """Sin-cos embedding ``[L, d]`` over patch coordinates (frame, row, col).

    With ``temporal=False`` only the two spatial axes are embedded, which
    lowers the divisibility requirement on ``d`` from 6 to 4.
    """
    return pos_embed_at(token_coords(grid, patch), d, temporal)


def _lerp_axis(values: np.ndarray, axis: int, n_dst: int) -> np.ndarray:
    n_src = values.shape[axis]
    if n_src == n_dst:
        return values
    if n_dst == 1 or n_src == 1:
        pos = np.zeros(n_dst)
    else:
        # corner-aligned: first and last samples coincide
        pos = np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))
    lo = np.clip(np.floor(pos).astype(np.int64), 0, n_src - 1)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = pos - lo
    a = np.take(values, lo, axis=axis)
    b = np.take(values, hi, axis=axis)
    shape = [1] * values.ndim
    shape[axis] = n_dst
    frac = frac.reshape(shape)
    exact = frac == 0.0
    return np.where(exact, a, a * (1.0 - frac) + b * frac)


def interpolate_pos_embed(
    embed: np.ndarray, src_grid: GridShape, dst_grid: GridShape, patch: int
) -> np.ndarray:
    """Resample a ``[L_src, d]`` embedding table onto ``dst_grid``.

    Bilinear within a frame, linear across frames, corner-aligned. Equal
    grids return the input unchanged.
    """
    src = src_grid.token_grid(patch)
    dst = dst_grid.token_grid(patch)
    if src == dst:
        return embed
    vol = embed.reshape(*src, embed.shape[-1])
    for axis in range(3):
        vol = _lerp_axis(vol, axis, dst[axis])
    return np.ascontiguousarray(vol).reshape(-1, embed.shape[-1])


# sequence assembly ------------------------------------------------------------------

def embed_text(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.shape[0])]
        raise VocabularyError(f"text id {int(bad[0])} outside vocabulary of {table.shape[0]}")
    return gather_rows(table, ids)


def assemble_sequence(
    text_ids: np.ndarray,
    garment: Tensor | None,
    target: Tensor,
    embed_table: Tensor,
    *,
    garment_pos: np.ndarray | None = None,
    target_pos: np.ndarray | None = None,
    segment_embed: Tensor | None = None,
    grids: dict[ModalityTag, GridShape] | None = None,
) -> TokenStream:
    """Build ``[text | garment | target]`` from label ids and projected visual tokens.

    ``text_ids`` is ``[B, n]``; visual tokens are ``[B, L_m, d]``; a ``None``
    garment gives an empty garment segment (the dual network's main stream).
    Position embeddings are added to visual tokens only; ``segment_embed``
    (rows indexed by :class:`ModalityTag`) is added to every token.
    """
    text_ids = np.asarray(text_ids, dtype=np.int64)
    text = embed_text(embed_table, text_ids) if text_ids.shape[-1] > 0 else None
    if garment is not None and garment_pos is not None:
        garment = add(garment, garment_pos)
    if target_pos is not None:
        target = add(target, target_pos)
    if segment_embed is not None:
        if text is not None:
            text = add(text, gather_rows(segment_embed, np.array([ModalityTag.TEXT])))
        if garment is not None:
            garment = add(garment, gather_rows(segment_embed, np.array([ModalityTag.GARMENT])))
        target = add(target, gather_rows(segment_embed, np.array([ModalityTag.TARGET])))
    tokens, counts = concat_tokens([text, garment, target])
    return TokenStream(tokens, ModalityLayout.from_counts(*counts), grids)


def split_sequence(stream: TokenStream) -> list[Tensor | None]:
    return split_tokens(stream.tokens, stream.layout)
