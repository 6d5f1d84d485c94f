import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtmpar.core import BatchNormState, Tensor, batchnorm, conv2d
from dtmpar.errors import DimensionError
from dtmpar.model import (
    Backbone,
    BackboneConfig,
    Conv2d,
    DtmHead,
    DtmModel,
    FcBaseline,
    ModelConfig,
    Sequential,
    backbone_forward,
    forward_dtm,
    forward_fc_baseline,
    model_stats,
)
from dtmpar.schema import Attribute, AttributeSchema, default_schema


def feature_map(seed, n=4, c=6, h=5, w=4):
    return Tensor(np.random.default_rng(seed).normal(size=(n, c, h, w)))


def test_default_backbone_shape():
    bb = Backbone(BackboneConfig(), np.random.default_rng(0), dtype=np.float32)
    F = backbone_forward(bb, Tensor(np.zeros((2, 3, 128, 96), dtype=np.float32)))
    assert F.shape == (2, 64, 16, 12)
    assert bb.down_stride == 8


def test_backbone_rejects_indivisible_input():
    bb = Backbone(BackboneConfig(), np.random.default_rng(0))
    with pytest.raises(DimensionError, match="not divisible"):
        backbone_forward(bb, Tensor(np.zeros((1, 3, 100, 96))))


def test_gradient_reaches_first_layer():
    model = DtmModel(default_schema(), ModelConfig(backbone=BackboneConfig((4, 8), (2, 2)), dtype="float64"), seed=1)
    x = np.random.default_rng(2).uniform(size=(3, 3, 16, 12))
    out = model(x)
    out.logits.sum().backward()
    first = model.backbone.layers[0].weight
    assert first.grad is not None and np.abs(first.grad).max() > 0


def test_heatmap_size_for_default_input():
    model = DtmModel(default_schema(), seed=0)
    out = model(np.zeros((2, 3, 128, 96), dtype=np.float32))
    assert out.heatmaps_gmp.shape[2:] == (16, 12)
    assert out.heatmaps_gap.shape[2:] == (16, 12)
    assert model.heatmap_size(128, 96) == (16, 12)


def test_pure_gmp_and_pure_gap_heads():
    F = feature_map(3)
    rng = np.random.default_rng(0)
    head = DtmHead(6, [], [0, 1, 2], rng)
    out = forward_dtm(head, F)
    hm = batchnorm(conv2d(F, head.templates_gmp), BatchNormState(3)).data
    np.testing.assert_allclose(out.logits.data, hm.reshape(4, 3, -1).max(axis=2))
    assert out.heatmaps_gap is None

    head = DtmHead(6, [0, 1], [], rng)
    out = forward_dtm(head, F)
    hm = batchnorm(conv2d(F, head.templates_gap), BatchNormState(2)).data
    np.testing.assert_allclose(out.logits.data, hm.mean(axis=(2, 3)))
    assert out.heatmaps_gmp is None


def test_gap_head_without_bn_equals_fc_layer():
    rng = np.random.default_rng(4)
    for _ in range(5):
        F = Tensor(rng.normal(size=(3, 6, 4, 5)))
        head = DtmHead(6, [0, 1, 2], [], rng, use_bn=False)
        W = head.templates_gap.data.reshape(3, 6)
        direct = F.data.mean(axis=(2, 3)) @ W.T
        assert np.abs(forward_dtm(head, F).logits.data - direct).max() < 1e-9


def test_fc_identity_weights_give_gap():
    F = feature_map(5, c=4)
    fc = FcBaseline(4, 4, np.random.default_rng(0), use_bn=False)
    fc.W_fc.data[:] = np.eye(4)
    np.testing.assert_allclose(forward_fc_baseline(fc, F).data, F.data.mean(axis=(2, 3)))


def test_fc_and_dtm_agree_without_bn_and_differ_with_bn():
    rng = np.random.default_rng(6)
    F = Tensor(rng.normal(size=(5, 6, 3, 4)))
    head = DtmHead(6, [0, 1, 2], [], rng, use_bn=False)
    fc = FcBaseline(6, 3, rng, use_bn=False)
    fc.W_fc.data[:] = head.templates_gap.data.reshape(3, 6)
    assert np.abs(forward_dtm(head, F).logits.data - forward_fc_baseline(fc, F).data).max() < 1e-9

    head.use_bn, fc.use_bn = True, True
    diff = np.abs(forward_dtm(head, F).logits.data - forward_fc_baseline(fc, F).data).max()
    assert diff > 1e-3


def test_channel_mismatch():
    head = DtmHead(6, [0], [1], np.random.default_rng(0))
    with pytest.raises(DimensionError):
        forward_dtm(head, feature_map(0, c=5))
    with pytest.raises(DimensionError):
        forward_fc_baseline(FcBaseline(6, 2, np.random.default_rng(0)), feature_map(0, c=5))


def _interleaved_schema():
    attrs = (
        Attribute("a", False, (9,)),
        Attribute("g1", True),
        Attribute("b", False, (15, 16)),
        Attribute("g2", True),
        Attribute("c", False, (0,)),
    )
    return AttributeSchema(attrs)


def test_logit_columns_follow_schema_order():
    schema = _interleaved_schema()
    F = feature_map(7)
    head = DtmHead(6, schema.global_indices, schema.local_indices, np.random.default_rng(1))
    logits = forward_dtm(head, F).logits.data
    for j in range(schema.J):
        if j in head.gap_indices:
            k = head.gap_indices.index(j)
            t, state, pool = head.templates_gap.data[k : k + 1], head.bn_gap, "gap"
        else:
            k = head.gmp_indices.index(j)
            t, state, pool = head.templates_gmp.data[k : k + 1], head.bn_gmp, "gmp"
        hm = conv2d(F, Tensor(t)).data
        hm = (hm - hm.mean()) / np.sqrt(hm.var() + state.eps) * state.gamma.data[k] + state.beta.data[k]
        expected = hm.mean(axis=(1, 2, 3)) if pool == "gap" else hm.reshape(4, -1).max(axis=1)
        np.testing.assert_allclose(logits[:, j], expected, atol=1e-10)


def test_permutation_round_trip():
    schema = _interleaved_schema()
    F = feature_map(8)
    head = DtmHead(6, schema.global_indices, schema.local_indices, np.random.default_rng(2))
    base = forward_dtm(head, F).logits.data

    order = [3, 0, 4, 2, 1]
    perm = schema.permuted(order)
    head2 = DtmHead(6, perm.global_indices, perm.local_indices, np.random.default_rng(3))
    for new_j, old_j in enumerate(order):
        src = head.gap_indices if old_j in head.gap_indices else head.gmp_indices
        src_t = head.templates_gap if old_j in head.gap_indices else head.templates_gmp
        dst = head2.gap_indices if new_j in head2.gap_indices else head2.gmp_indices
        dst_t = head2.templates_gap if new_j in head2.gap_indices else head2.templates_gmp
        dst_t.data[dst.index(new_j)] = src_t.data[src.index(old_j)]
    permuted = forward_dtm(head2, F).logits.data
    np.testing.assert_allclose(permuted, base[:, order], atol=1e-12)


def test_heatmap_cell_depends_only_on_its_own_features():
    rng = np.random.default_rng(9)
    head = DtmHead(6, [0], [1, 2], rng)
    for s in head.bn_states():
        s.running_mean[:] = rng.normal(size=s.num_channels)
        s.mode = "eval"
    F = feature_map(10)
    ref = forward_dtm(head, F)
    for (i, j) in [(0, 0), (2, 3), (4, 1)]:
        G = F.data.copy()
        G[:, :, i, j] += rng.normal(size=G.shape[:2]) * 5
        out = forward_dtm(head, Tensor(G))
        for a, b in ((ref.heatmaps_gap, out.heatmaps_gap), (ref.heatmaps_gmp, out.heatmaps_gmp)):
            changed = np.abs(a.data - b.data) > 0
            mask = np.zeros(changed.shape[2:], dtype=bool)
            mask[i, j] = True
            assert not changed[:, :, ~mask].any()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 4), c=st.integers(1, 6), j=st.integers(1, 5))
def test_argmax_equivalence_property(seed, n, c, j):
    rng = np.random.default_rng(seed)
    F = Tensor(rng.normal(size=(n, c, 3, 2)))
    head = DtmHead(c, list(range(j)), [], rng, use_bn=False)
    fc = FcBaseline(c, j, rng, use_bn=False)
    fc.W_fc.data[:] = head.templates_gap.data.reshape(j, c)
    a = forward_dtm(head, F).logits.data
    b = forward_fc_baseline(fc, F).data
    assert np.abs(a - b).max() < 1e-9


def test_heatmaps_accessor_gathers_schema_indices():
    schema = _interleaved_schema()
    head = DtmHead(6, schema.global_indices, schema.local_indices, np.random.default_rng(2))
    out = forward_dtm(head, feature_map(11))
    hm = out.heatmaps([4, 1]).data
    np.testing.assert_array_equal(hm[:, 0], out.heatmaps_gmp.data[:, 2])
    np.testing.assert_array_equal(hm[:, 1], out.heatmaps_gap.data[:, 0])


# -- model_stats -------------------------------------------------------------------


def test_stats_single_template_conv():
    params, flops = model_stats(Sequential([Conv2d(64, 10, 1)]), (16, 12))
    assert params == 640
    assert flops == 2 * 64 * 10 * 16 * 12 == 245760


def test_stats_empty_model():
    assert model_stats(Sequential([]), (16, 12)) == (0, 0)


def test_stats_scale_with_input_size():
    model = DtmModel(default_schema(), seed=0)
    p1, f1 = model_stats(model, (128, 96))
    p2, f2 = model_stats(model, (256, 192))
    assert p1 == p2
    assert f2 == 4 * f1


def test_stats_counts_every_parameter():
    for mode in ("fc_baseline", "dtm_gap", "dtm_mixed"):
        model = DtmModel(default_schema(), ModelConfig(head_mode=mode), seed=0)
        params, _ = model_stats(model)
        assert params == sum(p.size for p in model.parameters())
