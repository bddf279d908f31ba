"""DiT blocks for the five token-fusion variants.

Modality-specific normalisation (``MN_V1``/``MN_V2``/``MN_V3``) normalises
each modality group separately, modulates it with its own AdaLN-zero
parameters, concatenates the groups back along the token axis and runs one
shared self-attention over the whole sequence. ``NAIVE_SPLIT`` keeps a single
normalisation but restricts queries to text+target, so garment tokens drop
out of the residual stream. ``DUAL`` pairs a main stack (text+target) with an
independent reference stack over garment tokens whose normalised features
are appended to the main stack's keys and values.

AdaLN-zero follows the adaLN-single layout: a per-network linear map turns the
timestep embedding into six width-``d`` vectors (shift, scale, gate for the
attention and MLP branches) and every block adds a learned ``[6, d]`` table
per modality group.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .modality import ModalityLayout, ModalityTag, TokenStream, split_tokens
from .nn import Linear, Module
from .tensor import (
    Tensor,
    add,
    concat,
    gelu,
    layer_norm,
    matmul,
    mul,
    parameter,
    reshape,
    softmax,
    split,
    take,
    transpose,
)

TEXT, GARMENT, TARGET = ModalityTag.TEXT, ModalityTag.GARMENT, ModalityTag.TARGET


class BlockVariant(str, enum.Enum):
    DUAL = "dual"
    NAIVE_SPLIT = "naive_split"
    MN_V1 = "mn_v1"
    MN_V2 = "mn_v2"
    MN_V3 = "mn_v3"

    @property
    def is_mn(self) -> bool:
        return self in (BlockVariant.MN_V1, BlockVariant.MN_V2, BlockVariant.MN_V3)


Group = frozenset

GROUPINGS: dict[BlockVariant, tuple[frozenset, ...]] = {
    BlockVariant.MN_V1: (Group({TEXT, GARMENT}), Group({TARGET})),
    BlockVariant.MN_V2: (Group({TEXT}), Group({GARMENT}), Group({TARGET})),
    BlockVariant.MN_V3: (Group({TEXT}), Group({GARMENT, TARGET})),
    BlockVariant.NAIVE_SPLIT: (Group({TEXT, GARMENT, TARGET}),),
    BlockVariant.DUAL: (Group({TEXT, TARGET}),),
}
REFERENCE_GROUPING: tuple[frozenset, ...] = (Group({GARMENT}),)

# query side of the naive split; garment tokens only serve as keys/values
NAIVE_QUERY_TAGS = (TEXT, TARGET)

# Small enough that rescaling a token by 0.1 or 10 moves its normalised
# features by well under 1e-9; the usual 1e-6 would move them by ~1e-5.
NORM_EPS = 1e-12


class AdaLNZero(Module):
    """Per-group ``[6, d]`` modulation tables added to the network's global modulation."""

    N_CHUNKS = 6

    def __init__(self, d: int, n_groups: int):
        self.d = d
        self.tables = [parameter(np.zeros((self.N_CHUNKS, d))) for _ in range(n_groups)]

    def chunks(self, cond: Tensor, group: int) -> list[Tensor]:
        """``cond`` is the global modulation ``[B, 6d]``; returns six ``[B, 1, d]`` tensors."""
        if not 0 <= group < len(self.tables):
            raise ContractError(f"group {group} not present (variant has {len(self.tables)})")
        b = cond.shape[0]
        mod = add(reshape(cond, (b, self.N_CHUNKS, self.d)), self.tables[group])
        return split(mod, [1] * self.N_CHUNKS, axis=1)


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return add(mul(layer_norm(x, NORM_EPS), add(scale, 1.0)), shift)


def adaln_modulate(
    x: Tensor, cond: Tensor, ada: AdaLNZero, group: int
) -> tuple[Tensor, tuple[Tensor, Tensor]]:
    """Attention-branch input for one group plus the (attention, MLP) gates."""
    shift1, scale1, gate1, _, _, gate2 = ada.chunks(cond, group)
    return modulate(x, shift1, scale1), (gate1, gate2)


class DiTBlock(Module):
    def __init__(self, rng: np.random.Generator, d: int, heads: int, n_groups: int, mlp_ratio: int = 4):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(rng, d, d)
        self.k = Linear(rng, d, d)
        self.v = Linear(rng, d, d)
        self.o = Linear(rng, d, d)
        self.fc1 = Linear(rng, d, mlp_ratio * d)
        self.fc2 = Linear(rng, mlp_ratio * d, d)
        self.ada = AdaLNZero(d, n_groups)


def _heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return transpose(reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def multihead_attention(
    block: DiTBlock, q_in: Tensor, kv_in: Tensor, trace: dict | None = None
) -> Tensor:
    b, lq, d = q_in.shape
    h = block.heads
    q, k, v = block.q(q_in), block.k(kv_in), block.v(kv_in)
    if trace is not None:
        trace.update(q=q, k=k, v=v)
    scores = mul(matmul(_heads(q, h), transpose(_heads(k, h), (0, 1, 3, 2))), 1.0 / np.sqrt(d // h))
    probs = softmax(scores)
    out = matmul(probs, _heads(v, h))
    out = reshape(transpose(out, (0, 2, 1, 3)), (b, lq, d))
    return block.o(out)


@dataclass
class _Groups:
    spans: list[tuple[int, int]]
    index: list[int]  # AdaLN table per span

    @classmethod
    def resolve(cls, layout: ModalityLayout, groups) -> _Groups:
        spans, index = [], []
        for i, g in enumerate(groups):
            s, e = layout.span(g)
            if e > s:
                spans.append((s, e))
                index.append(i)
        covered = sum(e - s for s, e in spans)
        if covered != layout.total:
            raise ContractError(f"groups {groups} do not cover layout {layout}")
        return cls(spans, index)

    def pieces(self, x: Tensor) -> list[Tensor]:
        return [take(x, s, e, axis=-2) for s, e in self.spans]


@dataclass
class BlockOutput:
    stream: TokenStream
    normed: Tensor  # F'_l: the modulated attention input
    trace: dict = field(default_factory=dict)


def block_forward(
    stream: TokenStream,
    cond: Tensor,
    block: DiTBlock,
    groups,
    *,
    query_tags: tuple[ModalityTag, ...] | None = None,
    extra_kv: Tensor | None = None,
    trace: dict | None = None,
) -> BlockOutput:
    """Generic block: per-group AdaLN-zero, fused attention, gated residual, MLP.

    ``query_tags`` restricts which modalities act as queries (and survive in
    the output); ``extra_kv`` appends reference features to keys/values.
    """
    x, layout = stream.tokens, stream.layout
    grp = _Groups.resolve(layout, groups)
    chunks = [block.ada.chunks(cond, gi) for gi in grp.index]
    x_parts = grp.pieces(x)

    normed = concat([modulate(xp, c[0], c[1]) for xp, c in zip(x_parts, chunks)], axis=-2)
    if trace is not None:
        trace["normed"] = normed

    if query_tags is None:
        q_in, q_layout, q_parts_spec = normed, layout, grp
    else:
        if len(grp.index) != 1:
            raise ContractError("query restriction needs a single shared normalisation group")
        q_spans = [layout[t] for t in query_tags if layout.length(t) > 0]
        q_in = concat([take(normed, s, e, axis=-2) for s, e in q_spans], axis=-2)
        counts = [layout.length(t) if t in query_tags else 0 for t in (TEXT, GARMENT, TARGET)]
        q_layout = ModalityLayout.from_counts(*counts)
        q_parts_spec = _Groups.resolve(q_layout, groups_for_queries(groups, query_tags))
        x = concat([take(x, s, e, axis=-2) for s, e in q_spans], axis=-2)
        # the only group's modulation is reused for the query tokens
        chunks = [chunks[0]] * len(q_parts_spec.spans)

    kv_in = normed if extra_kv is None else concat([normed, extra_kv], axis=-2)
    attn = multihead_attention(block, q_in, kv_in, trace)

    attn_parts = q_parts_spec.pieces(attn)
    x_parts = q_parts_spec.pieces(x)
    x = concat([add(xp, mul(c[2], ap)) for xp, ap, c in zip(x_parts, attn_parts, chunks)], axis=-2)

    x_parts = q_parts_spec.pieces(x)
    outs = []
    for xp, c in zip(x_parts, chunks):
        h = block.fc2(gelu(block.fc1(modulate(xp, c[3], c[4]))))
        outs.append(add(xp, mul(c[5], h)))
    x = concat(outs, axis=-2)
    return BlockOutput(TokenStream(x, q_layout, stream.grids), normed, trace or {})


def groups_for_queries(groups, query_tags) -> tuple[frozenset, ...]:
    return tuple(Group(g & set(query_tags)) for g in groups if g & set(query_tags))


def mn_block_forward(
    stream: TokenStream, cond: Tensor, block: DiTBlock, variant: BlockVariant, trace: dict | None = None
) -> TokenStream:
    if not variant.is_mn:
        raise ContractError(f"mn_block_forward needs an MN variant, got {variant.value}")
    return block_forward(stream, cond, block, GROUPINGS[variant], trace=trace).stream


def naive_split_forward(
    stream: TokenStream, cond: Tensor, block: DiTBlock, trace: dict | None = None
) -> TokenStream:
    """Queries from text+target only; output drops the garment tokens."""
    return block_forward(
        stream, cond, block, GROUPINGS[BlockVariant.NAIVE_SPLIT], query_tags=NAIVE_QUERY_TAGS, trace=trace
    ).stream


def dual_layer_forward(
    main: TokenStream,
    ref: TokenStream,
    main_cond: Tensor,
    ref_cond: Tensor,
    main_block: DiTBlock,
    ref_block: DiTBlock,
    ref_features: Tensor | None = None,
    trace: dict | None = None,
) -> tuple[TokenStream, TokenStream]:
    """One dual-network layer.

    The reference block runs plain self-attention over garment tokens; its
    normalised attention input is appended to the main block's keys and
    values. ``ref_features`` overrides those features (used by tests).
    """
    ref_out = block_forward(ref, ref_cond, ref_block, REFERENCE_GROUPING)
    feats = ref_out.normed if ref_features is None else ref_features
    main_out = block_forward(main, main_cond, main_block, GROUPINGS[BlockVariant.DUAL], extra_kv=feats, trace=trace)
    if trace is not None:
        trace["ref_features"] = feats
    return main_out.stream, ref_out.stream


def dual_forward(
    main: TokenStream,
    ref: TokenStream,
    main_cond: Tensor,
    ref_cond: Tensor,
    main_blocks: list[DiTBlock],
    ref_blocks: list[DiTBlock],
    capture: list | None = None,
) -> TokenStream:
    if len(main_blocks) != len(ref_blocks):
        raise ConfigError(
            f"reference stack has {len(ref_blocks)} layers, main stack has {len(main_blocks)}"
        )
    for mb, rb in zip(main_blocks, ref_blocks):
        main, ref = dual_layer_forward(main, ref, main_cond, ref_cond, mb, rb)
        if capture is not None:
            capture.append((main, ref))
    return main


def split_dual_streams(stream: TokenStream) -> tuple[TokenStream, TokenStream]:
    """``[text | garment | target]`` -> main ``[text | target]`` and reference ``[garment]``."""
    text, garment, target = split_tokens(stream.tokens, stream.layout)
    if garment is None:
        raise ContractError("the dual network needs garment tokens")
    main_parts = [p for p in (text, target) if p is not None]
    main_tokens = main_parts[0] if len(main_parts) == 1 else concat(main_parts, axis=-2)
    main = TokenStream(main_tokens, ModalityLayout.from_counts(stream.layout.length(TEXT), 0, stream.layout.length(TARGET)))
    ref = TokenStream(garment, ModalityLayout.from_counts(0, garment.shape[-2], 0))
    return main, ref


class BlockStack(Module):
    """``depth`` blocks of one variant; the dual network owns a second, reference stack."""

    def __init__(self, rng: np.random.Generator, variant, d: int, heads: int, depth: int, mlp_ratio: int = 4):
        self.variant = BlockVariant(variant)
        n_groups = len(GROUPINGS[self.variant])
        self.blocks = [DiTBlock(rng, d, heads, n_groups, mlp_ratio) for _ in range(depth)]
        if self.variant is BlockVariant.DUAL:
            self.ref_blocks = [DiTBlock(rng, d, heads, 1, mlp_ratio) for _ in range(depth)]

    def __call__(self, stream: TokenStream, cond: Tensor, ref_cond: Tensor | None = None) -> TokenStream:
        if self.variant is BlockVariant.DUAL:
            main, ref = split_dual_streams(stream)
            return dual_forward(main, ref, cond, cond if ref_cond is None else ref_cond, self.blocks, self.ref_blocks)
        for block in self.blocks:
            if self.variant is BlockVariant.NAIVE_SPLIT:
                stream = naive_split_forward(stream, cond, block)
            else:
                stream = mn_block_forward(stream, cond, block, self.variant)
        return stream
