import numpy as np
import pytest

from pvigcaps import ops
from pvigcaps.backbone import (FFN, Backbone, Downsample, GraphCache, Grapher, ModelConfig, Stem,
                               count_params_flops, max_relative_aggregate, multi_head_update)
from pvigcaps.exceptions import ConfigError, ContractError, ShapeError
from pvigcaps.graph import NeighborTable
from pvigcaps.layers import ConvBN
from pvigcaps.model import PViGNet


def table(rows):
    return NeighborTable(np.array(rows, dtype=np.intp), 1, len(rows[0]))


def test_max_relative_examples():
    X = np.array([[1.0, 2.0], [3.0, 0.0], [2.0, 5.0]])
    out = max_relative_aggregate(X, table([[1, 2], [0, 2], [0, 1]])).data
    assert out[0].tolist() == [1.0, 2.0, 2.0, 3.0]
    same = max_relative_aggregate(np.ones((3, 2)), table([[1, 2], [0, 2], [0, 1]])).data
    assert same[0].tolist() == [1.0, 1.0, 0.0, 0.0]
    single = max_relative_aggregate(X, table([[2], [0], [1]])).data
    np.testing.assert_array_equal(single[0], np.concatenate([X[0], X[2] - X[0]]))


def test_max_relative_elementwise_loop_oracle(rng):
    X = rng.normal(size=(6, 4))
    idx = np.array([[j for j in rng.permutation(6) if j != i][:3] for i in range(6)])
    out = max_relative_aggregate(X, NeighborTable(idx, 1, 3)).data
    for i in range(6):
        for c in range(4):
            assert out[i, 4 + c] == max(X[j, c] - X[i, c] for j in idx[i])


def test_max_relative_rejects_foreign_table():
    with pytest.raises(ContractError):
        max_relative_aggregate(np.ones((4, 2)), table([[1], [0], [1]]))


def test_multi_head_single_head_is_a_matmul(rng):
    X2, W = rng.normal(size=(5, 8)), rng.normal(size=(1, 8, 4))
    np.testing.assert_allclose(multi_head_update(X2, W).data, X2 @ W[0], atol=1e-12)


def test_multi_head_equals_block_diagonal_matrix(rng):
    X2, W = rng.normal(size=(5, 8)), rng.normal(size=(2, 4, 2))
    block = np.zeros((8, 4))
    block[:4, :2], block[4:, 2:] = W[0], W[1]
    out = multi_head_update(X2, W).data
    assert out.shape == (5, 4)
    np.testing.assert_allclose(out, X2 @ block, atol=1e-12)
    with pytest.raises(ShapeError):
        multi_head_update(rng.normal(size=(5, 6)), W)


def test_grapher_zero_output_weights_is_identity(rng):
    g = Grapher(rng, 8, 2, 3, layer=1)
    g.w_out.weight.data[:] = 0.0
    X = rng.normal(size=(2, 10, 8))
    # BN after a zero map gives beta = 0
    for training in (True, False):
        np.testing.assert_array_equal(g(X, training).data, X)


def test_ffn_zero_second_weights_is_identity(rng):
    f = FFN(rng, 8, 4)
    f.fc2.weight.data[:] = 0.0
    Y = rng.normal(size=(2, 6, 8))
    out = f(Y, True).data
    assert out.shape == Y.shape
    np.testing.assert_array_equal(out, Y)


def test_grapher_permutation_equivariance(rng):
    g = Grapher(rng, 8, 2, 3, layer=5)
    X = rng.normal(size=(1, 12, 8))
    perm = rng.permutation(12)
    np.testing.assert_array_equal(g(X[:, perm], False).data, g(X, False).data[:, perm])
    # batch statistics are sums in a different order, so only round-off differs
    np.testing.assert_allclose(g(X[:, perm], True).data, g(X, True).data[:, perm], rtol=0, atol=1e-13)


def test_backbone_equivariance_without_positional_embedding(rng):
    # whole node stream of one stage: permuting nodes permutes outputs
    cfg = ModelConfig.micro(pos_embed=False)
    bb = Backbone(cfg, rng)
    X = rng.normal(size=(1, 64, 8))
    perm = rng.permutation(64)
    stage = bb.stages[0]

    def run(x):
        for block in stage.blocks:
            x = block(x, False)
        return x.data

    np.testing.assert_array_equal(run(X[:, perm]), run(X)[:, perm])


def test_graph_cache_reuses_tables(rng):
    g = Grapher(rng, 8, 2, 3, layer=1)
    cache = GraphCache()
    X = rng.normal(size=(1, 9, 8))
    first = g(X, False, cache).data
    assert 1 in cache.tables
    # max aggregation ignores neighbour order, so a reordered table gives the same output
    cache.tables[1] = cache.tables[1][:, :, ::-1].copy()
    np.testing.assert_array_equal(g(X, False, cache).data, first)
    # a different table is used verbatim instead of recomputing the graph
    cache.tables[1] = np.roll(cache.tables[1], 1, axis=1)
    assert not np.array_equal(g(X, False, cache).data, first)


def test_stem_shape_and_zero_weight_composition(rng):
    stem = Stem(rng, 3, (24, 48, 48))
    assert stem(rng.normal(size=(2, 3, 64, 64)), False).shape == (2, 48, 16, 16)
    for conv in stem.convs:
        conv.weight.data[:] = 0.0
        conv.bias.data[:] = 0.7
    out = stem(rng.normal(size=(1, 3, 16, 16)), False).data
    # eval BN with running (0, 1): each layer maps to gelu(bias / sqrt(1 + eps))
    eps = stem.convs[0].bn.state.eps
    expected = ops.gelu(0.7 / np.sqrt(1 + eps)).item()
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-15)


def test_stem_rejects_bad_input(rng):
    with pytest.raises(ShapeError):
        Stem(rng, 3, (4, 8, 8))(np.zeros((1, 3, 10, 10)), False)


def test_downsample_halves_and_zero_weights_give_zero(rng):
    d = Downsample(rng, 48, 96)
    assert d(rng.normal(size=(2, 48, 8, 8)), True).shape == (2, 96, 4, 4)
    d.conv.weight.data[:] = 0.0
    assert np.all(d(rng.normal(size=(2, 48, 8, 8)), True).data == 0.0)


def test_tiny_dims_output_sizes():
    cfg = ModelConfig.tiny(height=32, width=32)
    out = Backbone(cfg, np.random.default_rng(0))(np.zeros((2, 3, 32, 32)), False)
    assert out.shape == (2, 384, 1, 1)


def test_micro_stage_schedule():
    shapes = dict(PViGNet(ModelConfig.micro()).stage_shapes(batch=2))
    assert shapes["stem"] == (2, 8, 8, 8)
    assert [shapes[f"stage{i}"] for i in range(1, 5)] == [(2, 8, 8, 8), (2, 16, 4, 4), (2, 24, 2, 2), (2, 32, 1, 1)]
    assert shapes["head"] == (2, 3, 8)


def test_single_conv_param_count(rng):
    conv = ConvBN(rng, 3, 5, 1)
    # weights and bias of the convolution plus gamma and beta of its BN
    assert conv.num_parameters() == 5 * 3 * 3 * 3 + 5 + 2 * 5


@pytest.mark.parametrize("head", ["capsule", "pooling-mlp"])
@pytest.mark.parametrize("preset", ["micro", "tiny"])
def test_census_matches_instantiated_model(preset, head):
    cfg = ModelConfig.preset(preset, head=head)
    assert count_params_flops(cfg).params == PViGNet(cfg).num_parameters()


def test_tiny_accounting_against_reference_totals():
    pool = count_params_flops(ModelConfig.tiny(head="pooling-mlp"))
    caps = count_params_flops(ModelConfig.tiny(head="capsule"))
    assert abs(pool.params / 9.54e6 - 1) <= 0.15
    assert abs(caps.params / 9.48e6 - 1) <= 0.15
    assert caps.params < pool.params and caps.flops > pool.flops


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig.micro(height=48).validate()
    with pytest.raises(ConfigError):
        ModelConfig.micro(num_heads=3).validate()
    with pytest.raises(ConfigError):
        ModelConfig.preset("huge")
    cfg = ModelConfig.micro()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
