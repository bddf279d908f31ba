import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mnvton.blocks import (
    GROUPINGS,
    NORM_EPS,
    AdaLNZero,
    BlockStack,
    BlockVariant,
    DiTBlock,
    block_forward,
    dual_forward,
    dual_layer_forward,
    mn_block_forward,
    multihead_attention,
    naive_split_forward,
    split_dual_streams,
)
from mnvton.errors import ConfigError, ContractError
from mnvton.model import Denoiser, ModelConfig, count_params
from mnvton.modality import ModalityLayout, ModalityTag, TokenStream
from mnvton.tensor import Tensor, grad_check, layer_norm, mean, mul, sum_

TEXT, GARMENT, TARGET = ModalityTag.TEXT, ModalityTag.GARMENT, ModalityTag.TARGET
MN = [BlockVariant.MN_V1, BlockVariant.MN_V2, BlockVariant.MN_V3]
D, H = 8, 2
COUNTS = (2, 4, 8)


def _stream(seed=0, counts=COUNTS, b=2, d=D, requires_grad=False):
    g = np.random.default_rng(seed)
    lay = ModalityLayout.from_counts(*counts)
    return TokenStream(Tensor(g.normal(size=(b, lay.total, d)), requires_grad=requires_grad), lay)


def _block(variant, seed=1, randomize=False, d=D):
    g = np.random.default_rng(seed)
    blk = DiTBlock(g, d, H, len(GROUPINGS[BlockVariant(variant)]))
    if randomize:
        for p in blk.parameters():
            p.data[...] = g.normal(0.0, 0.3, size=p.shape)
    return blk


def _cond(b=2, d=D, seed=2, zero=False):
    if zero:
        return Tensor(np.zeros((b, 6 * d)))
    return Tensor(np.random.default_rng(seed).normal(0.0, 0.3, size=(b, 6 * d)))


def _layer_norm(x):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(((x - mu) ** 2).mean(-1, keepdims=True) + NORM_EPS)


# identity at initialisation ---------------------------------------------------------------


@pytest.mark.parametrize("variant", MN)
def test_mn_block_is_identity_at_init(variant):
    s = _stream()
    out = mn_block_forward(s, _cond(zero=True), _block(variant), variant)
    assert out.layout == s.layout
    assert np.max(np.abs(out.tokens.data - s.tokens.data)) <= 1e-12


def test_identity_holds_for_any_conditioning_when_gate_rows_are_zero():
    # only the gates need to vanish; shifts and scales may be anything
    blk = _block(BlockVariant.MN_V3)
    cond = _cond().data.reshape(2, 6, D)
    cond[:, 2] = 0.0
    cond[:, 5] = 0.0
    s = _stream()
    out = mn_block_forward(s, Tensor(cond.reshape(2, -1)), blk, BlockVariant.MN_V3)
    assert np.array_equal(out.tokens.data, s.tokens.data)


def test_naive_split_identity_on_query_segment():
    s = _stream()
    out = naive_split_forward(s, _cond(zero=True), _block(BlockVariant.NAIVE_SPLIT))
    text, target = s.layout.text, s.layout.target
    expected = np.concatenate([s.tokens.data[:, slice(*text)], s.tokens.data[:, slice(*target)]], axis=1)
    assert np.max(np.abs(out.tokens.data - expected)) <= 1e-12


def test_dual_identity_at_init():
    s = _stream()
    main, ref = split_dual_streams(s)
    rng = np.random.default_rng(0)
    mains = [DiTBlock(rng, D, H, 1) for _ in range(2)]
    refs = [DiTBlock(rng, D, H, 1) for _ in range(2)]
    out = dual_forward(main, ref, _cond(zero=True), _cond(zero=True), mains, refs)
    assert np.max(np.abs(out.tokens.data - main.tokens.data)) <= 1e-12


@pytest.mark.parametrize("variant", list(BlockVariant))
def test_block_stack_identity_at_init(variant):
    stack = BlockStack(np.random.default_rng(0), variant, D, H, depth=3)
    s = _stream()
    out = stack(s, _cond(zero=True))
    expected = s.tokens.data
    if variant in (BlockVariant.DUAL, BlockVariant.NAIVE_SPLIT):
        expected = np.delete(expected, np.arange(*s.layout.garment), axis=1)
    assert np.max(np.abs(out.tokens.data - expected)) <= 1e-12


# modulation and groups --------------------------------------------------------------------


def test_zero_conditioning_gives_plain_layer_norm():
    trace = {}
    s = _stream()
    block_forward(s, _cond(zero=True), _block(BlockVariant.MN_V2), GROUPINGS[BlockVariant.MN_V2], trace=trace)
    assert np.max(np.abs(trace["normed"].data - _layer_norm(s.tokens.data))) < 1e-12


def test_modulation_matches_closed_form():
    blk = _block(BlockVariant.MN_V3, randomize=True)
    cond = _cond()
    trace = {}
    s = _stream()
    block_forward(s, cond, blk, GROUPINGS[BlockVariant.MN_V3], trace=trace)
    lay = s.layout
    for gi, tags in enumerate(GROUPINGS[BlockVariant.MN_V3]):
        mod = cond.data.reshape(2, 6, D) + blk.ada.tables[gi].data
        shift, scale = mod[:, 0:1], mod[:, 1:2]
        lo, hi = lay.span(tags)
        x = s.tokens.data[:, lo:hi]
        expected = (1.0 + scale) * _layer_norm(x) + shift
        assert np.max(np.abs(trace["normed"].data[:, lo:hi] - expected)) < 1e-12


def test_one_table_per_group():
    assert [len(_block(v).ada.tables) for v in MN] == [2, 3, 2]
    assert len(_block(BlockVariant.NAIVE_SPLIT).ada.tables) == 1


def test_groupings():
    g = GROUPINGS
    assert g[BlockVariant.MN_V3] == (frozenset({TEXT}), frozenset({GARMENT, TARGET}))
    assert g[BlockVariant.MN_V2] == (frozenset({TEXT}), frozenset({GARMENT}), frozenset({TARGET}))
    assert g[BlockVariant.MN_V1] == (frozenset({TEXT, GARMENT}), frozenset({TARGET}))


def test_missing_group_is_contract_error():
    ada = AdaLNZero(D, 2)
    with pytest.raises(ContractError):
        ada.chunks(_cond(), 2)
    with pytest.raises(ContractError):
        mn_block_forward(_stream(), _cond(), _block(BlockVariant.DUAL), BlockVariant.DUAL)


def test_width_must_divide_heads():
    with pytest.raises(ValueError):
        DiTBlock(np.random.default_rng(0), 9, 2, 1)


@settings(max_examples=30, deadline=None)
@given(
    st.sampled_from(MN),
    st.integers(0, 2),
    st.lists(st.sampled_from([0.1, 10.0]), min_size=14, max_size=14),
    st.integers(0, 1000),
)
def test_group_scale_invariance(variant, group_idx, factors, seed):
    groups = GROUPINGS[variant]
    group_idx %= len(groups)
    blk = _block(variant, seed=seed, randomize=True)
    cond = _cond(seed=seed + 1)
    s = _stream(seed)
    lo, hi = s.layout.span(groups[group_idx])
    scaled = s.tokens.data.copy()
    scaled[:, lo:hi] *= np.asarray(factors[: hi - lo])[None, :, None]
    t0, t1 = {}, {}
    block_forward(s, cond, blk, groups, trace=t0)
    block_forward(TokenStream(Tensor(scaled), s.layout), cond, blk, groups, trace=t1)
    # pre-affine features as the block computes them
    pre0 = layer_norm(Tensor(s.tokens.data[:, lo:hi]), NORM_EPS).data
    pre1 = layer_norm(Tensor(scaled[:, lo:hi]), NORM_EPS).data
    assert np.max(np.abs(pre1 - pre0)) < 1e-9
    # the modulated features inherit the bound times the affine gain |1 + scale|
    gi = [i for i, g in enumerate(groups) if g == groups[group_idx]][0]
    gain = np.abs(1.0 + cond.data.reshape(2, 6, D)[:, 1] + blk.ada.tables[gi].data[1]).max()
    assert np.max(np.abs(t1["normed"].data[:, lo:hi] - t0["normed"].data[:, lo:hi])) < 1e-9 * max(gain, 1.0)


def test_v3_text_scaling_leaves_visual_features_untouched():
    v = BlockVariant.MN_V3
    blk, cond, s = _block(v, randomize=True), _cond(), _stream()
    loud = s.tokens.data.copy()
    loud[:, slice(*s.layout.text)] *= 100.0
    t0, t1 = {}, {}
    block_forward(s, cond, blk, GROUPINGS[v], trace=t0)
    block_forward(TokenStream(Tensor(loud), s.layout), cond, blk, GROUPINGS[v], trace=t1)
    vis = slice(s.layout.garment[0], s.layout.total)
    assert np.array_equal(t0["normed"].data[:, vis], t1["normed"].data[:, vis])


# attention -------------------------------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_key_value_permutation_invariance(seed):
    g = np.random.default_rng(seed)
    blk = _block(BlockVariant.MN_V3, seed=seed, randomize=True)
    q = Tensor(g.normal(size=(1, 5, D)))
    kv = g.normal(size=(1, 9, D))
    perm = g.permutation(9)
    a = multihead_attention(blk, q, Tensor(kv)).data
    b = multihead_attention(blk, q, Tensor(kv[:, perm])).data
    assert np.max(np.abs(a - b)) < 1e-12


def test_attention_matches_numpy_reference():
    g = np.random.default_rng(5)
    blk = _block(BlockVariant.MN_V3, randomize=True)
    q_in, kv_in = g.normal(size=(2, 3, D)), g.normal(size=(2, 7, D))
    out = multihead_attention(blk, Tensor(q_in), Tensor(kv_in)).data
    assert np.max(np.abs(out - _np_attention(blk, q_in, kv_in))) < 1e-12


def _np_attention(blk, q_in, kv_in):
    lin = lambda m, x: x @ m.weight.data + m.bias.data  # noqa: E731
    q, k, v = lin(blk.q, q_in), lin(blk.k, kv_in), lin(blk.v, kv_in)
    dh = D // H
    heads = []
    for h in range(H):
        sl = slice(h * dh, (h + 1) * dh)
        s = q[..., sl] @ np.swapaxes(k[..., sl], -1, -2) / np.sqrt(dh)
        p = np.exp(s - s.max(-1, keepdims=True))
        heads.append((p / p.sum(-1, keepdims=True)) @ v[..., sl])
    return lin(blk.o, np.concatenate(heads, -1))


# layout ----------------------------------------------------------------------------------


@pytest.mark.parametrize("variant", MN)
def test_layout_preserved_through_stack(variant):
    stack = BlockStack(np.random.default_rng(3), variant, D, H, depth=3)
    for blk in stack.blocks:
        for p in blk.parameters():
            p.data[...] = np.random.default_rng(7).normal(0, 0.2, size=p.shape)
    s = _stream()
    out = stack(s, _cond())
    assert out.layout == s.layout and out.tokens.shape == s.tokens.shape


# naive split -----------------------------------------------------------------------------


def test_naive_split_shrinks_and_shares_key_values():
    v = BlockVariant.NAIVE_SPLIT
    blk, cond, s = _block(v, randomize=True), _cond(), _stream()
    t_naive, t_fused = {}, {}
    out = naive_split_forward(s, cond, blk, trace=t_naive)
    # same weights, same single normalisation, every token a query
    block_forward(s, cond, blk, GROUPINGS[v], trace=t_fused)
    assert out.tokens.shape[1] == s.layout.length(TEXT) + s.layout.length(TARGET) < s.layout.total
    assert out.layout.length(GARMENT) == 0
    assert np.array_equal(t_naive["k"].data, t_fused["k"].data)
    assert np.array_equal(t_naive["v"].data, t_fused["v"].data)
    assert t_naive["q"].shape[1] < t_fused["q"].shape[1]


def test_naive_split_second_layer_loses_garment():
    stack = BlockStack(np.random.default_rng(0), BlockVariant.NAIVE_SPLIT, D, H, depth=2)
    out = stack(_stream(), _cond())
    assert out.layout.counts() == (COUNTS[0], 0, COUNTS[2])


# dual network ----------------------------------------------------------------------------


def _dual_pair(seed=4):
    g = np.random.default_rng(seed)
    blocks = [DiTBlock(g, D, H, 1) for _ in range(2)]
    for blk in blocks:
        for p in blk.parameters():
            p.data[...] = g.normal(0.0, 0.3, size=p.shape)
    return blocks


def _np_block(blk, x, cond, extra_kv):
    """Independent single-group block: modulate, attend over [normed | extra], MLP."""
    mod = cond.reshape(x.shape[0], 6, D) + blk.ada.tables[0].data
    sh1, sc1, g1, sh2, sc2, g2 = (mod[:, i : i + 1] for i in range(6))
    normed = (1 + sc1) * _layer_norm(x) + sh1
    x = x + g1 * _np_attention(blk, normed, np.concatenate([normed, extra_kv], axis=1))
    h = (1 + sc2) * _layer_norm(x) + sh2
    h = h @ blk.fc1.weight.data + blk.fc1.bias.data
    h = 0.5 * h * (1 + np.tanh(np.sqrt(2 / np.pi) * (h + 0.044715 * h**3)))
    return x + g2 * (h @ blk.fc2.weight.data + blk.fc2.bias.data)


def test_dual_zero_reference_features_add_uniform_mass():
    main_blk, ref_blk = _dual_pair()
    for lin in (main_blk.k, main_blk.v):
        lin.bias.data[...] = 0.0  # zero features give zero keys: score 0, weight exp(0)
    main, ref = split_dual_streams(_stream())
    cond = _cond()
    zeros = np.zeros((2, COUNTS[1], D))
    out, _ = dual_layer_forward(main, ref, cond, cond, main_blk, ref_blk, ref_features=Tensor(zeros))
    expected = _np_block(main_blk, main.tokens.data, cond.data, zeros)
    assert np.max(np.abs(out.tokens.data - expected)) < 1e-9

    # the same thing written as main-only attention plus L_g units of mass on value 0
    mod = cond.data.reshape(2, 6, D) + main_blk.ada.tables[0].data
    normed = (1 + mod[:, 1:2]) * _layer_norm(main.tokens.data) + mod[:, 0:1]
    lin = lambda m, x: x @ m.weight.data + m.bias.data  # noqa: E731
    q, k, v = lin(main_blk.q, normed), lin(main_blk.k, normed), lin(main_blk.v, normed)
    dh = D // H
    heads = []
    for h in range(H):
        sl = slice(h * dh, (h + 1) * dh)
        w = np.exp(q[..., sl] @ np.swapaxes(k[..., sl], -1, -2) / np.sqrt(dh))
        heads.append(w @ v[..., sl] / (w.sum(-1, keepdims=True) + COUNTS[1]))
    trace = {}
    dual_layer_forward(main, ref, cond, cond, main_blk, ref_blk, ref_features=Tensor(zeros), trace=trace)
    assert trace["k"].shape[1] == main.layout.total + COUNTS[1]
    attn = lin(main_blk.o, np.concatenate(heads, -1))
    x_mid = main.tokens.data + mod[:, 2:3] * attn
    # the residual after attention is the only place the extra mass enters
    h = (1 + mod[:, 4:5]) * _layer_norm(x_mid) + mod[:, 3:4]
    h = h @ main_blk.fc1.weight.data + main_blk.fc1.bias.data
    h = 0.5 * h * (1 + np.tanh(np.sqrt(2 / np.pi) * (h + 0.044715 * h**3)))
    direct = x_mid + mod[:, 5:6] * (h @ main_blk.fc2.weight.data + main_blk.fc2.bias.data)
    assert np.max(np.abs(out.tokens.data - direct)) < 1e-9


def test_dual_layer_matches_numpy_reference():
    main_blk, ref_blk = _dual_pair(9)
    main, ref = split_dual_streams(_stream(3))
    cond = _cond(seed=8)
    out_main, out_ref = dual_layer_forward(main, ref, cond, cond, main_blk, ref_blk)
    ref_mod = cond.data.reshape(2, 6, D) + ref_blk.ada.tables[0].data
    ref_feats = (1 + ref_mod[:, 1:2]) * _layer_norm(ref.tokens.data) + ref_mod[:, 0:1]
    assert np.max(np.abs(out_main.tokens.data - _np_block(main_blk, main.tokens.data, cond.data, ref_feats))) < 1e-12
    empty = np.zeros((2, 0, D))
    assert np.max(np.abs(out_ref.tokens.data - _np_block(ref_blk, ref.tokens.data, cond.data, empty))) < 1e-12


def test_reference_stream_gets_nothing_from_main():
    main_blk, ref_blk = _dual_pair()
    s = _stream()
    main, ref = split_dual_streams(s)
    other = TokenStream(Tensor(main.tokens.data * -3.0 + 1.0), main.layout)
    cond = _cond()
    _, r0 = dual_layer_forward(main, ref, cond, cond, main_blk, ref_blk)
    _, r1 = dual_layer_forward(other, ref, cond, cond, main_blk, ref_blk)
    assert np.array_equal(r0.tokens.data, r1.tokens.data)


def test_garment_gradient_flows_only_through_reference_features():
    main_blk, ref_blk = _dual_pair()
    main, _ = split_dual_streams(_stream())
    g = np.random.default_rng(11)
    garment = Tensor(g.normal(size=(2, COUNTS[1], D)), requires_grad=True)
    lay = ModalityLayout.from_counts(0, COUNTS[1], 0)
    cond = _cond()
    w = g.normal(size=main.tokens.shape)

    def loss(frozen_features=None):
        out, _ = dual_layer_forward(
            main, TokenStream(garment, lay), cond, cond, main_blk, ref_blk, ref_features=frozen_features
        )
        return mean(mul(out.tokens, Tensor(w)))

    l = loss()
    l.backward()
    assert np.abs(garment.grad).max() > 1e-6
    assert grad_check(loss, garment) < 1e-6

    # with the reference features held fixed the garment is disconnected
    garment.grad = None
    trace = {}
    dual_layer_forward(main, TokenStream(garment, lay), cond, cond, main_blk, ref_blk, trace=trace)
    frozen = Tensor(trace["ref_features"].data)
    loss(frozen).backward()
    assert garment.grad is None or not np.any(garment.grad)

    # the main query projection still feels the garment through keys and values
    def q_grad(feats):
        for p in main_blk.parameters():
            p.grad = None
        loss(Tensor(feats)).backward()
        return main_blk.q.weight.grad.copy()

    assert not np.allclose(q_grad(frozen.data), q_grad(frozen.data * 2.0))


def test_dual_layer_count_mismatch_is_config_error():
    main, ref = split_dual_streams(_stream())
    blocks = _dual_pair()
    with pytest.raises(ConfigError):
        dual_forward(main, ref, _cond(), _cond(), blocks, blocks[:1])


def test_dual_needs_garment():
    with pytest.raises(ContractError):
        split_dual_streams(_stream(counts=(2, 0, 8)))


# parameter accounting --------------------------------------------------------------------


def test_dual_has_about_twice_the_parameters():
    cfg = ModelConfig()
    dual = count_params(Denoiser(cfg, BlockVariant.DUAL))
    v3 = count_params(Denoiser(cfg, BlockVariant.MN_V3))
    assert 1.8 <= dual / v3 <= 2.1


def test_mn_variants_differ_only_by_modulation_tables():
    cfg = ModelConfig()
    counts = {v: count_params(Denoiser(cfg, v)) for v in MN}
    per_table = 6 * cfg.d * cfg.depth
    assert counts[BlockVariant.MN_V2] - counts[BlockVariant.MN_V3] == per_table
    assert counts[BlockVariant.MN_V1] == counts[BlockVariant.MN_V3]


def test_stack_gradient_is_well_formed():
    stack = BlockStack(np.random.default_rng(0), BlockVariant.MN_V3, D, H, depth=1)
    for p in stack.parameters():
        p.data[...] = np.random.default_rng(1).normal(0, 0.3, size=p.shape)
    x = _stream(requires_grad=True)
    out = stack(x, _cond())
    sum_(out.tokens).backward()
    assert x.tokens.grad.shape == x.tokens.shape and np.all(np.isfinite(x.tokens.grad))
