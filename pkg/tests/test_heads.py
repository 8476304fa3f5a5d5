import math

import numpy as np
import pytest

from mmfusion import ndgrad as ng
from mmfusion import heads
from mmfusion.fusion import ConfigError, ParamRegistry

GLOBAL_LABELS = ["misogynous", "shaming", "stereotype", "objectification", "violence", "hateful"]


def make_reg(seed=0):
    return ParamRegistry(np.random.default_rng(seed))


def test_query_order_follows_global_declaration():
    reg = make_reg()
    table = heads.ClassQueryTable(reg, GLOBAL_LABELS, 8)
    ordered = table.ordered(["violence", "misogynous", "shaming"])
    assert ordered == ["misogynous", "shaming", "violence"]
    with pytest.raises(ConfigError, match="unknown label"):
        table.ordered(["nope"])


def test_queries_rows_come_from_table():
    reg = make_reg()
    table = heads.ClassQueryTable(reg, GLOBAL_LABELS, 8)
    q, ordered = table.queries(["hateful", "shaming"])
    assert ordered == ["shaming", "hateful"]
    np.testing.assert_array_equal(q.numpy()[0], table.table.numpy()[1])
    np.testing.assert_array_equal(q.numpy()[1], table.table.numpy()[5])


def test_classify_pooled_zero_weights_give_half_probability():
    reg = make_reg()
    head = heads.TaskHead(reg, "t", heads.MULTI_HEAD, in_dim=8, mlp_hidden=8, n_labels=3)
    head.w1.data[:] = 0
    head.w2.data[:] = 0
    logits, _ = heads.classify_pooled(ng.Tensor(np.random.default_rng(1).normal(size=(4, 8))), head)
    np.testing.assert_array_equal(logits.numpy(), np.zeros((4, 3)))
    np.testing.assert_allclose(heads.probabilities(logits).numpy(), 0.5)


def test_single_label_task_has_one_logit():
    reg = make_reg()
    head = heads.TaskHead(reg, "task_a", heads.MULTI_HEAD, in_dim=8, mlp_hidden=8, n_labels=1)
    logits, _ = heads.classify_pooled(ng.Tensor(np.zeros((2, 8))), head)
    assert logits.shape == (2, 1)


def test_classify_pooled_mode_mismatch():
    reg = make_reg()
    head = heads.TaskHead(reg, "t", heads.SHARED_SINGLE, in_dim=8, mlp_hidden=8, n_labels=2)
    with pytest.raises(ConfigError):
        heads.classify_pooled(ng.Tensor(np.zeros((2, 8))), head)
    mh = heads.TaskHead(reg, "m", heads.MULTI_HEAD, in_dim=8, mlp_hidden=8, n_labels=2)
    with pytest.raises(ConfigError):
        heads.classify_shared(ng.Tensor(np.zeros((2, 2, 8))), mh)


def test_classify_pooled_gradcheck():
    with ng.precision("float64"):
        reg = make_reg(2)
        head = heads.TaskHead(reg, "t", heads.MULTI_HEAD, in_dim=4, mlp_hidden=6, n_labels=2)
        x = ng.Tensor(np.random.default_rng(3).normal(size=(3, 4)))
        err = ng.finite_diff_check(
            lambda: (heads.classify_pooled(x, head)[0] ** 2).sum(), reg.params
        )
        assert err <= 1e-4


def test_classify_shared_weight_sharing_and_equivariance():
    reg = make_reg(4)
    head = heads.TaskHead(reg, "t", heads.SHARED_SINGLE, in_dim=8, mlp_hidden=8, n_labels=5)
    rng = np.random.default_rng(5)
    row = rng.normal(size=8)
    same = np.tile(row, (2, 3, 1))
    logits, _ = heads.classify_shared(ng.Tensor(same), head)
    assert np.ptp(logits.numpy()) == 0  # identical rows -> identical logits

    distinct = rng.normal(size=(1, 4, 8))
    base, _ = heads.classify_shared(ng.Tensor(distinct), head)
    perm = np.array([2, 0, 3, 1])
    permuted, _ = heads.classify_shared(ng.Tensor(distinct[:, perm]), head)
    np.testing.assert_array_equal(permuted.numpy(), base.numpy()[:, perm])


def test_multi_head_has_no_permutation_equivariance():
    # witness: permuting input coordinates does not permute logits
    reg = make_reg(6)
    head = heads.TaskHead(reg, "t", heads.MULTI_HEAD, in_dim=4, mlp_hidden=8, n_labels=4)
    x = np.random.default_rng(7).normal(size=(1, 4))
    base, _ = heads.classify_pooled(ng.Tensor(x), head)
    perm = np.array([1, 0, 3, 2])
    permuted, _ = heads.classify_pooled(ng.Tensor(x[:, perm]), head)
    assert not np.allclose(permuted.numpy(), base.numpy()[:, perm])


def test_classify_shared_gradcheck():
    with ng.precision("float64"):
        reg = make_reg(8)
        head = heads.TaskHead(reg, "t", heads.SHARED_SINGLE, in_dim=4, mlp_hidden=6, n_labels=3)
        x = ng.Tensor(np.random.default_rng(9).normal(size=(2, 3, 4)))
        err = ng.finite_diff_check(
            lambda: (heads.classify_shared(x, head)[0] ** 2).sum(), reg.params
        )
        assert err <= 1e-4


def test_multi_head_layer_inputs_identical_across_classes():
    reg = make_reg(10)
    head = heads.TaskHead(reg, "t", heads.MULTI_HEAD, in_dim=8, mlp_hidden=8, n_labels=3)
    x = ng.Tensor(np.random.default_rng(11).normal(size=(4, 8)))
    _, (h0, h1) = heads.classify_pooled(x, head)
    # one vector per instance, not per class: exactly shared across classes
    assert h0.shape == (4, 8) and h1.shape == (4, 8)


def test_probabilities_anchors_and_clamp():
    logits = ng.Tensor([0.0, 40.0, -40.0, math.log(3.0)])
    p = heads.probabilities(logits).numpy()
    assert p[0] == 0.5
    assert p[1] == pytest.approx(1 - 1e-7, abs=1e-9)
    assert p[2] == pytest.approx(1e-7, abs=1e-9)
    assert p[3] == pytest.approx(0.75, abs=1e-6)


def decoder_fixture(seed, n_labels=5, dim=8, layers=2, heads_n=2, bsz=3, src_len=6):
    reg = make_reg(seed)
    table = heads.ClassQueryTable(reg, GLOBAL_LABELS, dim)
    stack = heads.DecoderStack(reg, dim, 4 * dim, n_layers=layers, n_heads=heads_n)
    rng = np.random.default_rng(seed + 1)
    src = ng.Tensor(rng.normal(size=(bsz, src_len, dim)))
    mask = np.ones((bsz, src_len), dtype=np.uint8)
    mask[0, -2:] = 0
    return reg, table, stack, src, mask


def test_decode_classes_shapes_and_attention_records():
    _, table, stack, src, mask = decoder_fixture(12)
    labels = ["misogynous", "shaming", "stereotype", "objectification", "violence"]
    out, ordered, records = heads.decode_classes(src, mask, labels, table, stack, record=True)
    assert out.shape == (3, 5, 8)
    assert ordered == labels
    assert len(records) == 2
    for rec in records:
        assert rec["self"].shape == (3, 5, 5)
        assert rec["cross"].shape == (3, 5, 6)
        np.testing.assert_allclose(rec["self"].sum(axis=-1), 1.0, atol=1e-5)
        np.testing.assert_allclose(rec["cross"].sum(axis=-1), 1.0, atol=1e-5)
        assert np.all(rec["cross"][0, :, -2:] == 0)  # masked source gets zero weight


def test_single_class_self_attention_is_identity():
    _, table, stack, src, mask = decoder_fixture(13)
    out, _, records = heads.decode_classes(src, mask, ["hateful"], table, stack, record=True)
    assert out.shape == (3, 1, 8)
    for rec in records:
        np.testing.assert_array_equal(rec["self"], np.ones((3, 1, 1)))


def test_decode_rejects_fully_masked_source():
    _, table, stack, src, mask = decoder_fixture(14)
    mask[1, :] = 0
    with pytest.raises(ValueError, match="fully-masked"):
        heads.decode_classes(src, mask, ["hateful"], table, stack)


def test_equal_queries_give_equal_outputs():
    reg, table, stack, src, mask = decoder_fixture(15)
    table.table.data[:] = table.table.data[0]  # all queries identical
    out, _, _ = heads.decode_classes(
        src, mask, ["misogynous", "shaming", "violence"], table, stack
    )
    rows = out.numpy()
    np.testing.assert_allclose(rows[:, 0], rows[:, 1], atol=1e-12)
    np.testing.assert_allclose(rows[:, 0], rows[:, 2], atol=1e-12)


def test_decoder_gradcheck():
    with ng.precision("float64"):
        reg, table, stack, src, mask = decoder_fixture(16, dim=8, layers=1, bsz=2, src_len=3)

        def f():
            out, _, _ = heads.decode_classes(src, mask, ["misogynous", "hateful"], table, stack)
            return (out * out).sum()

        err = ng.finite_diff_check(f, reg.params)
        assert err <= 1e-4
