"""Fusion tests: adapter math, hierarchical sum oracle, interleaving, dropping."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geofuse.encoders import BlockFeatures, EncoderConfig, GeometryEncoder, SemanticEncoder
from geofuse.errors import ContractError
from geofuse.fusion import (GEOMETRY, SEMANTIC, Adapter, EmbeddingSequence,
                            FusionConfig, HierarchicalAdapter, adapter_forward,
                            build_visual_embedding, de_interleave, drop_clip_mask,
                            hierarchical_forward, interleave, zero_geometry_branch)
from geofuse.tensor import Tensor, finite_difference_check, tensor_sum


def make_adapter(rng, d_in=6, d_hidden=5, d_out=4):
    return Adapter.init(rng, d_in, d_hidden, d_out)


def zero_adapter(d_in, d_hidden, d_out):
    a = Adapter.init(np.random.default_rng(0), d_in, d_hidden, d_out)
    for t in a.tensors().values():
        t.data[...] = 0.0
    return a


def random_blocks(rng, n_blocks=4, n_tokens=3, d=6):
    return BlockFeatures([Tensor(rng.normal(0, 1, (n_tokens, d))) for _ in range(n_blocks)])


# -- adapter -------------------------------------------------------------------


def test_zero_adapter_gives_zero_output():
    a = zero_adapter(6, 5, 4)
    out = adapter_forward(a, Tensor(np.random.default_rng(1).normal(0, 1, (3, 6))))
    assert np.array_equal(out.data, np.zeros((3, 4)))


def test_identity_adapter_approximates_identity_for_large_inputs():
    a = zero_adapter(4, 4, 4)
    a.w1.data[...] = np.eye(4)
    a.w2.data[...] = np.eye(4)
    x = np.full((2, 4), 5.0)
    out = adapter_forward(a, Tensor(x))
    assert np.allclose(out.data, x, atol=1e-5)


def test_adapter_dim_mismatch():
    a = make_adapter(np.random.default_rng(0))
    with pytest.raises(ContractError):
        adapter_forward(a, Tensor(np.zeros((3, 7))))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_adapter_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a = make_adapter(rng)
    x = Tensor(rng.normal(0, 1, (3, 6)))
    for tensor in a.tensors().values():
        err = finite_difference_check(
            lambda t, a=a, x=x: tensor_sum(adapter_forward(a, x)), tensor)
        assert err < 1e-4


# -- hierarchical adapter ------------------------------------------------------


def test_hierarchical_all_zero_sub_adapters():
    hier = HierarchicalAdapter([zero_adapter(6, 5, 4) for _ in range(4)], [0, 1, 2, 3])
    out = hierarchical_forward(hier, random_blocks(np.random.default_rng(2)))
    assert np.array_equal(out.data, np.zeros((3, 4)))


def test_hierarchical_single_nonzero_sub_adapter():
    rng = np.random.default_rng(3)
    live = make_adapter(rng)
    hier = HierarchicalAdapter(
        [zero_adapter(6, 5, 4), live, zero_adapter(6, 5, 4), zero_adapter(6, 5, 4)],
        [0, 1, 2, 3])
    blocks = random_blocks(rng)
    out = hierarchical_forward(hier, blocks)
    alone = adapter_forward(live, blocks.blocks[1])
    assert np.allclose(out.data, alone.data, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_hierarchical_matches_bruteforce_sum_oracle(seed):
    rng = np.random.default_rng(seed)
    hier = HierarchicalAdapter([make_adapter(rng) for _ in range(4)], [0, 1, 2, 3])
    blocks = random_blocks(rng)
    got = hierarchical_forward(hier, blocks).data

    expected = np.zeros_like(got)
    for adapter, idx in zip(hier.sub_adapters, hier.tapped_block_indices):
        x = blocks.blocks[idx].data
        h = x @ adapter.w1.data + adapter.b1.data
        h = 0.5 * h * (1 + np.tanh(np.sqrt(2 / np.pi) * (h + 0.044715 * h**3)))
        expected += h @ adapter.w2.data + adapter.b2.data
    assert np.max(np.abs(got - expected)) <= 1e-12


def test_hierarchical_tap_out_of_range():
    hier = HierarchicalAdapter([make_adapter(np.random.default_rng(0))], [7])
    with pytest.raises(ContractError):
        hierarchical_forward(hier, random_blocks(np.random.default_rng(1)))


def test_gradient_reaches_every_sub_adapter():
    rng = np.random.default_rng(9)
    hier = HierarchicalAdapter([make_adapter(rng) for _ in range(4)], [0, 1, 2, 3])
    loss = tensor_sum(hierarchical_forward(hier, random_blocks(rng)))
    loss.backward()
    for sub in hier.sub_adapters:
        for tensor in sub.tensors().values():
            assert tensor.grad is not None and np.any(tensor.grad != 0.0)


# -- interleaving ----------------------------------------------------------------


def test_interleave_definition():
    sem = Tensor([[1.0, 1.0], [2.0, 2.0]])
    geo = Tensor([[9.0, 9.0], [8.0, 8.0]])
    seq = interleave(sem, geo)
    assert seq.tokens.data.tolist() == [[1, 1], [9, 9], [2, 2], [8, 8]]
    assert seq.tags == (SEMANTIC, GEOMETRY, SEMANTIC, GEOMETRY)


def test_interleave_geometry_first_order():
    sem = Tensor([[1.0]])
    geo = Tensor([[2.0]])
    seq = interleave(sem, geo, order="geometry-first")
    assert seq.tokens.data.tolist() == [[2.0], [1.0]]
    assert seq.tags == (GEOMETRY, SEMANTIC)


@given(st.integers(min_value=1, max_value=24), st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_interleave_roundtrip_exact(n_tokens, seed):
    rng = np.random.default_rng(seed)
    sem = Tensor(rng.normal(0, 1, (n_tokens, 5)))
    geo = Tensor(rng.normal(0, 1, (n_tokens, 5)))
    seq = interleave(sem, geo)
    back_sem, back_geo = de_interleave(seq)
    assert np.array_equal(back_sem.data, sem.data)
    assert np.array_equal(back_geo.data, geo.data)


def test_interleave_semantic_tokens_at_even_positions():
    rng = np.random.default_rng(11)
    seq = interleave(Tensor(rng.normal(0, 1, (16, 4))), Tensor(rng.normal(0, 1, (16, 4))))
    assert seq.indices_of(SEMANTIC) == list(range(0, 32, 2))


def test_interleave_count_mismatch():
    with pytest.raises(ContractError):
        interleave(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))))


# -- dropping ---------------------------------------------------------------------


def make_seq(rng, n=4, d=3):
    sem = Tensor(rng.normal(0, 1, (n, d)))
    geo = Tensor(rng.normal(0, 1, (n, d)))
    return interleave(sem, geo)


def test_drop_probability_zero_is_identity():
    rng = np.random.default_rng(0)
    seq = make_seq(rng)
    out = drop_clip_mask(seq, 0.0, np.random.default_rng(1), training=True)
    assert out is seq


def test_drop_probability_one_zeroes_all_semantic_tokens():
    rng = np.random.default_rng(0)
    seq = make_seq(rng)
    out = drop_clip_mask(seq, 1.0, np.random.default_rng(1), training=True)
    for i, tag in enumerate(out.tags):
        if tag == SEMANTIC:
            assert np.array_equal(out.tokens.data[i], np.zeros(3))
            assert out.dropped[i]
        else:
            assert np.array_equal(out.tokens.data[i], seq.tokens.data[i])
            assert not out.dropped[i]


def test_drop_never_fires_in_eval_mode():
    rng = np.random.default_rng(0)
    seq = make_seq(rng)
    out = drop_clip_mask(seq, 1.0, np.random.default_rng(1), training=False)
    assert out is seq


def test_drop_rate_on_seeded_samples():
    rng = np.random.default_rng(0)
    seq = make_seq(rng)
    draws = np.random.default_rng(123)
    hits = sum(
        any(drop_clip_mask(seq, 0.3, draws, training=True).dropped) for _ in range(10_000))
    assert 0.28 <= hits / 10_000 <= 0.32


# -- end-to-end visual embedding ------------------------------------------------------


def build_parts(seed=0):
    cfg = EncoderConfig(seed=seed)
    rng = np.random.default_rng(seed)
    sem_enc = SemanticEncoder(cfg)
    geo_enc = GeometryEncoder(cfg)
    clip = Adapter.init(rng, cfg.d_sem, 8, 8)
    hier = HierarchicalAdapter.init(rng, 4, cfg.n_blocks, cfg.d_geo, 8, 8)
    return cfg, sem_enc, geo_enc, clip, hier


def test_build_visual_embedding_default_length():
    cfg, sem_enc, geo_enc, clip, hier = build_parts()
    img = np.zeros((32, 32, 3))
    seq = build_visual_embedding(img, sem_enc, geo_enc, clip, hier, FusionConfig())
    assert seq.length == 2 * cfg.n_tokens


def test_build_visual_embedding_clip_branch_removed():
    cfg, sem_enc, geo_enc, clip, hier = build_parts()
    img = np.zeros((32, 32, 3))
    fcfg = FusionConfig(clip_branch_enabled=False)
    seq = build_visual_embedding(img, sem_enc, geo_enc, clip, hier, fcfg)
    assert seq.length == cfg.n_tokens
    assert set(seq.tags) == {GEOMETRY}


def test_build_visual_embedding_bit_identical_across_runs():
    _, sem_enc, geo_enc, clip, hier = build_parts()
    rng = np.random.default_rng(7)
    img = rng.random((32, 32, 3))
    a = build_visual_embedding(img, sem_enc, geo_enc, clip, hier, FusionConfig(),
                               rng=np.random.default_rng(5), training=True)
    b = build_visual_embedding(img, sem_enc, geo_enc, clip, hier, FusionConfig(),
                               rng=np.random.default_rng(5), training=True)
    assert np.array_equal(a.tokens.data, b.tokens.data)
    assert a.tags == b.tags and a.dropped == b.dropped


def test_zero_geometry_branch_keeps_layout():
    rng = np.random.default_rng(4)
    seq = make_seq(rng)
    out = zero_geometry_branch(seq)
    assert out.length == seq.length and out.tags == seq.tags
    for i, tag in enumerate(out.tags):
        if tag == GEOMETRY:
            assert np.array_equal(out.tokens.data[i], np.zeros(3))
        else:
            assert np.array_equal(out.tokens.data[i], seq.tokens.data[i])


def test_training_mode_requires_rng():
    _, sem_enc, geo_enc, clip, hier = build_parts()
    with pytest.raises(ContractError):
        build_visual_embedding(np.zeros((32, 32, 3)), sem_enc, geo_enc, clip, hier,
                               FusionConfig(), training=True)


def test_masked_tokens_are_exactly_zero():
    seq = EmbeddingSequence(Tensor([[1.0, -2.0], [3.0, 4.0]]), (SEMANTIC, GEOMETRY))
    out = drop_clip_mask(seq, 1.0, np.random.default_rng(0), training=True)
    assert out.tokens.data[0].tolist() == [0.0, 0.0]
