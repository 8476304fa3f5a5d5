import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmfusion import ndgrad as ng
from mmfusion import trainer as tr
from mmfusion import featurestore as fs
from mmfusion.fusion import ConfigError


# -- independent metric references (precision/recall route) ----------------------


def ref_f1(preds, labels, positive):
    tp = sum(1 for p, l in zip(preds, labels) if p == positive and l == positive)
    fp = sum(1 for p, l in zip(preds, labels) if p == positive and l != positive)
    fn = sum(1 for p, l in zip(preds, labels) if p != positive and l == positive)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    return 2 * prec * rec / (prec + rec) if prec + rec else 0.0


def ref_score_a(probs, labels, thr=0.5):
    preds = [1 if p >= thr else 0 for p in probs]
    return (ref_f1(preds, labels, 1) + ref_f1(preds, labels, 0)) / 2


def ref_score_b(probs, labels, thr=0.5):
    n, c = len(labels), len(labels[0])
    f1s, supports = [], []
    for j in range(c):
        preds = [1 if probs[i][j] >= thr else 0 for i in range(n)]
        col = [labels[i][j] for i in range(n)]
        f1s.append(ref_f1(preds, col, 1))
        supports.append(sum(col))
    total = sum(supports)
    return sum(f * s for f, s in zip(f1s, supports)) / total


# -- fixtures -------------------------------------------------------------------


def mini_tracks(hidden=16):
    return [
        fs.TrackSpec("clip", fs.TrackKind.IMAGE_PATCH, dim=4, max_len=3),
        fs.TrackSpec(
            "detr", fs.TrackKind.OBJECT, dim=4, max_len=4,
            has_logits=True, logit_classes=6, no_object_index=5,
        ),
        fs.TrackSpec("text", fs.TrackKind.TEXT, dim=hidden, max_len=6),
    ]


def mami_like_spec(hidden=16):
    return fs.DatasetSpec(
        name="mami",
        label_names=["misogynous", "shaming"],
        tasks=[
            fs.TaskSpec("MAMI", ["misogynous", "shaming"]),
            fs.TaskSpec("Task_A", ["misogynous"]),
            fs.TaskSpec("Task_B", ["shaming"]),
        ],
        tracks=mini_tracks(hidden),
    )


def fbhm_like_spec(hidden=16):
    return fs.DatasetSpec(
        name="fbhm",
        label_names=["hateful"],
        tasks=[fs.TaskSpec("Hateful", ["hateful"])],
        tracks=mini_tracks(hidden),
    )


def make_bundle(spec, n, seed):
    records = fs.synth_generate(fs.SynthSpec(dataset=spec, n_records=n, signal=2.0), seed)
    by_id = {r.id: r for r in records}
    train_ids, dev_ids = fs.stratified_split(records, 0.8, seed)
    return tr.DatasetBundle(
        spec=spec,
        splits={"train": [by_id[i] for i in train_ids], "dev": [by_id[i] for i in dev_ids]},
    )


def tiny_run_config(**overrides):
    flat = {
        "encoder_variant": "Multi",
        "pooling": "No",
        "hidden_dim": 16,
        "dropout": 0.1,
        "mlp_hidden": 16,
        "shared_layers": 1, "shared_heads": 2,
        "image_layers": 1, "image_heads": 2,
        "object_layers": 1, "object_heads": 2,
        "text_layers": 1, "text_heads": 2,
        "decoder_layers": 1, "decoder_heads": 2,
        "batch_size": 8, "epochs": 2, "lr": 1e-3,
        "accumulation_every": 2, "seed": 11,
    }
    flat.update(overrides)
    return tr.RunConfig.from_flat(flat)


# -- schedule --------------------------------------------------------------------


def test_schedule_single_dataset_two_batches():
    s = tr.build_schedule({"d": list(range(32))}, 16, seed=0)
    assert len(s.batches) == 2
    assert all(name == "d" for name, _ in s.batches)


def test_schedule_proportional_counts_and_coverage():
    s = tr.build_schedule({"a": list(range(160)), "b": list(range(1000, 1080))}, 16, seed=1)
    assert s.counts() == {"a": 10, "b": 5}
    seen_a = sorted(i for name, ids in s.batches if name == "a" for i in ids)
    seen_b = sorted(i for name, ids in s.batches if name == "b" for i in ids)
    assert seen_a == list(range(160))
    assert seen_b == list(range(1000, 1080))


def test_schedule_batches_are_dataset_pure_and_partial_kept():
    s = tr.build_schedule({"a": list(range(20))}, 16, seed=2)
    sizes = sorted(len(ids) for _, ids in s.batches)
    assert sizes == [4, 16]


def test_schedule_deterministic_per_seed_and_epoch():
    args = ({"a": list(range(50)), "b": list(range(100, 130))}, 8)
    a = tr.build_schedule(*args, seed=3, epoch=1)
    b = tr.build_schedule(*args, seed=3, epoch=1)
    assert a.batches == b.batches
    c = tr.build_schedule(*args, seed=3, epoch=2)
    assert a.batches != c.batches


def test_schedule_rejects_empty_dataset():
    with pytest.raises(ValueError, match="empty"):
        tr.build_schedule({"a": []}, 4, seed=0)


@settings(max_examples=40, deadline=None)
@given(
    st.dictionaries(
        st.sampled_from(["a", "b", "c"]), st.integers(1, 70), min_size=1, max_size=3
    ),
    st.integers(1, 16),
    st.integers(0, 2**31),
)
def test_schedule_coverage_property(sizes, batch_size, seed):
    dataset_ids = {name: list(range(n)) for name, n in sizes.items()}
    s = tr.build_schedule(dataset_ids, batch_size, seed=seed)
    import math as _math

    assert s.counts() == {
        name: _math.ceil(n / batch_size) for name, n in sizes.items()
    }
    for name, n in sizes.items():
        seen = sorted(i for nm, ids in s.batches if nm == name for i in ids)
        assert seen == list(range(n))
    assert all(len(ids) <= batch_size for _, ids in s.batches)


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=40)
)
def test_score_a_bounds_property(pairs):
    probs = [p for p, _ in pairs]
    labels = [l for _, l in pairs]
    assert 0.0 <= tr.score_a(probs, labels) <= 1.0


# -- lr schedule ------------------------------------------------------------------


def test_lr_anchors():
    assert tr.lr_at(0, 10, 110, 2e-4) == 0.0
    assert tr.lr_at(10, 10, 110, 2e-4) == 2e-4
    assert tr.lr_at(60, 10, 110, 2e-4) == pytest.approx(1e-4)
    assert tr.lr_at(110, 10, 110, 2e-4) == 0.0


def test_steps_per_epoch_floor_plus_flush():
    assert tr.steps_per_epoch(50, 20) == 3
    assert tr.steps_per_epoch(40, 20) == 2
    assert tr.steps_per_epoch(19, 20) == 1


def test_warmup_is_tenth_of_total_steps():
    # 800 records, batch 16 -> 50 batches/epoch; accumulate 20 -> 3 steps/epoch;
    # 15 epochs -> 45 total optimizer steps; warmup = floor(45 / 10)
    per_epoch = tr.steps_per_epoch(800 // 16, 20)
    total = per_epoch * 15
    assert total == 45
    assert total // 10 == 4


# -- MADGRAD ------------------------------------------------------------------------


def test_madgrad_zero_gradient_never_moves():
    p = np.array([1.5, -2.0])
    st = tr.ParamState(s=np.zeros(2), v=np.zeros(2), x0=p.copy())
    x = p.copy()
    for k in range(50):
        x = tr.madgrad_update(x, np.zeros(2), st, k, lr_now=0.1)
    np.testing.assert_array_equal(x, p)


def test_madgrad_negative_lr_rejected():
    st = tr.ParamState(s=np.zeros(1), v=np.zeros(1), x0=np.zeros(1))
    with pytest.raises(ValueError):
        tr.madgrad_update(np.zeros(1), np.ones(1), st, 0, lr_now=-0.1)


def test_madgrad_converges_on_quadratic():
    x = np.array([0.0])
    st = tr.ParamState(s=np.zeros(1), v=np.zeros(1), x0=x.copy())
    for k in range(2000):
        x = tr.madgrad_update(x, 2.0 * (x - 3.0), st, k, lr_now=0.1)
    assert abs(x[0] - 3.0) <= 1e-2


def test_madgrad_converges_on_least_squares():
    rng = np.random.default_rng(0)
    q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    a = q @ np.diag(np.linspace(1.0, 2.0, 8)) @ q.T
    b = rng.normal(size=8)
    x = np.zeros(8)
    st = tr.ParamState(s=np.zeros(8), v=np.zeros(8), x0=x.copy())
    for k in range(2000):
        x = tr.madgrad_update(x, 2.0 * a.T @ (a @ x - b), st, k, lr_now=0.05)
    assert np.linalg.norm(2.0 * a.T @ (a @ x - b)) <= 1e-3


# -- clipping + weight decay ----------------------------------------------------------


def make_params(grads, no_decay_flags=None):
    params = []
    for i, g in enumerate(grads):
        p = ng.Param(np.zeros_like(np.asarray(g, dtype=float)) + 1.0, f"p{i}",
                     no_decay=(no_decay_flags or [False] * len(grads))[i])
        p.grad = np.asarray(g, dtype=p.data.dtype)
        params.append(p)
    return params


def test_clip_halves_unit_norm_gradients():
    params = make_params([[0.6], [0.8]])  # global norm 1.0
    opt = tr.Madgrad(params)
    tr.clip_and_step(params, opt, lr_now=0.0, clip_norm=0.5, weight_decay=0.0)
    # lr 0 means no movement, but the step still consumed the gradients
    assert all(p.grad is None for p in params)
    # the dual-averaging accumulator records lam * g, exposing the clip scale
    params = make_params([[0.6], [0.8]])
    opt = tr.Madgrad(params)
    tr.clip_and_step(params, opt, lr_now=1.0, clip_norm=0.5, weight_decay=0.0)
    np.testing.assert_allclose(opt.state["p0"].s, [0.3], atol=1e-7)
    np.testing.assert_allclose(opt.state["p1"].s, [0.4], atol=1e-7)


def test_no_clip_below_threshold():
    params = make_params([[0.3]])
    opt = tr.Madgrad(params)
    tr.clip_and_step(params, opt, lr_now=1.0, clip_norm=0.5, weight_decay=0.0)
    np.testing.assert_allclose(opt.state["p0"].s, [0.3], atol=1e-7)


def test_weight_decay_skips_no_decay_params():
    params = make_params([[0.0], [0.0]], no_decay_flags=[False, True])
    opt = tr.Madgrad(params)
    tr.clip_and_step(params, opt, lr_now=1.0, clip_norm=0.5, weight_decay=0.1)
    np.testing.assert_allclose(opt.state["p0"].s, [0.1])  # wd * param = 0.1 * 1.0
    np.testing.assert_allclose(opt.state["p1"].s, [0.0])  # bias/LN exempt


def test_clip_rejects_non_finite_grad():
    params = make_params([[np.inf]])
    opt = tr.Madgrad(params)
    with pytest.raises(ng.NumericsError):
        tr.clip_and_step(params, opt, lr_now=0.1, clip_norm=0.5, weight_decay=0.0)


def test_post_clip_norm_bounded():
    rng = np.random.default_rng(1)
    params = make_params([rng.normal(size=7) * 5 for _ in range(3)])
    norm_before = tr.global_grad_norm(params)
    assert norm_before > 0.5
    scaled = [p.grad * (0.5 / norm_before) for p in params]
    total = np.sqrt(sum((g.astype(np.float64) ** 2).sum() for g in scaled))
    assert total <= 0.5 + 1e-6


# -- metrics ----------------------------------------------------------------------------


def test_score_a_perfect_and_hand_case():
    assert tr.score_a([0.9, 0.1], [1, 0]) == 1.0
    got = tr.score_a([0.9, 0.2, 0.1, 0.3], [1, 1, 0, 0])
    assert got == pytest.approx((2 / 3 + 4 / 5) / 2, abs=1e-9)
    assert got == pytest.approx(0.73333, abs=1e-4)


def test_score_a_degenerate_all_wrong():
    assert tr.score_a([0.9, 0.9, 0.9], [0, 0, 0]) == 0.0


def test_score_a_empty_rejected():
    with pytest.raises(ValueError):
        tr.score_a([], [])


def test_score_b_weighted_arithmetic():
    # supports {3,1}; per-label F1 {0.8, 0.4} -> 0.7
    labels = np.array([[1, 0], [1, 0], [1, 1], [0, 0], [0, 0]])
    # label 0: preds give tp=2, fp=0, fn=1 -> f1 = 4/5; label 1: tp=1 fp=2 fn=0 -> f1 = 2/4
    # craft simpler: verify against reference instead
    probs = np.array([[0.9, 0.1], [0.8, 0.6], [0.2, 0.7], [0.1, 0.8], [0.3, 0.2]])
    assert tr.score_b(probs, labels) == pytest.approx(ref_score_b(probs.tolist(), labels.tolist()))


def test_score_b_supports_weighting_closed_form():
    # two labels, F1s 0.8 and 0.4 with supports 3 and 1 -> (3*0.8 + 1*0.4)/4 = 0.7
    f1s, supports = [0.8, 0.4], [3, 1]
    assert sum(f * s for f, s in zip(f1s, supports)) / sum(supports) == pytest.approx(0.7)


def test_score_b_zero_support_rejected():
    with pytest.raises(ValueError):
        tr.score_b(np.array([[0.9]]), np.array([[0]]))


def test_scores_match_brute_force_on_random_trials():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(3, 30))
        probs = rng.random(n)
        labels = rng.integers(0, 2, size=n)
        assert tr.score_a(probs, labels) == pytest.approx(
            ref_score_a(probs.tolist(), labels.tolist()), abs=1e-9
        )
        c = int(rng.integers(1, 4))
        probs2 = rng.random((n, c))
        labels2 = rng.integers(0, 2, size=(n, c))
        if labels2.sum() == 0:
            labels2[0, 0] = 1
        assert tr.score_b(probs2, labels2) == pytest.approx(
            ref_score_b(probs2.tolist(), labels2.tolist()), abs=1e-9
        )


# -- config -------------------------------------------------------------------------------


def test_run_config_flat_round_trip():
    cfg = tiny_run_config()
    again = tr.RunConfig.from_flat(cfg.to_flat())
    assert again.to_flat() == cfg.to_flat()


def test_run_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown config keys"):
        tr.RunConfig.from_flat({"poolin": "No"})


def test_run_config_rejects_bad_tokens():
    with pytest.raises(ConfigError):
        tr.RunConfig.from_flat({"encoder_variant": "shared"})  # must be table token
    with pytest.raises(ConfigError):
        tr.RunConfig.from_flat({"pooling": "none"})


def test_train_config_positivity():
    with pytest.raises(ConfigError):
        tr.TrainConfig(batch_size=0)


# -- model / train_step ----------------------------------------------------------------------


def test_multitask_model_shares_trunk_but_not_heads():
    cfg = tiny_run_config(multi_task=True)
    model = tr.MultiTaskModel(cfg, [mami_like_spec(), fbhm_like_spec()], seed=5)
    assert model.global_labels == ["misogynous", "shaming", "hateful"]
    mami_head = model.heads[("mami", "MAMI")]
    hateful_head = model.heads[("fbhm", "Hateful")]
    head_param_ids = {id(mami_head.w1), id(mami_head.w2)}
    assert not head_param_ids & {id(hateful_head.w1), id(hateful_head.w2)}
    # queries and decoder are shared: exactly one table in the registry
    assert sum(1 for p in model.params if p.name == "queries.table") == 1


def test_model_rejects_mismatched_track_layouts():
    other = fbhm_like_spec()
    other.tracks[0].max_len = 2
    with pytest.raises(ConfigError, match="track layout"):
        tr.MultiTaskModel(tiny_run_config(), [mami_like_spec(), other], seed=0)


def test_train_step_task_roster_and_accumulation():
    cfg = tiny_run_config()
    spec = mami_like_spec()
    bundle = make_bundle(spec, 24, seed=6)
    model = tr.MultiTaskModel(cfg, [spec], seed=7)
    records = bundle.splits["train"][:4]
    breakdowns, _ = tr.train_step(model, "mami", records)
    assert [b.task for b in breakdowns] == ["MAMI", "Task_A", "Task_B"]
    grads_once = {p.name: p.grad.copy() for p in model.params if p.grad is not None}
    tr.train_step(model, "mami", records)
    for name, g in grads_once.items():
        p = next(p for p in model.params if p.name == name)
        np.testing.assert_allclose(p.grad, 2 * g, rtol=1e-4, atol=1e-7)


def test_train_step_pooled_heads_with_aux_losses():
    # shared variant + CLS pooling: multi-head MLP heads, both aux terms on
    cfg = tiny_run_config(encoder_variant="Shared", pooling="CLS",
                          proj_align=True, contrastive=True)
    spec = mami_like_spec()
    bundle = make_bundle(spec, 24, seed=20)
    model = tr.MultiTaskModel(cfg, [spec], seed=21)
    breakdowns, total = tr.train_step(model, "mami", bundle.splits["train"][:6])
    assert np.isfinite(total)
    for b in breakdowns:
        assert b.align > 0 and b.contrastive > 0
        assert b.task_total == pytest.approx(b.main + b.align + b.contrastive, abs=1e-6)
    assert any(p.grad is not None and np.any(p.grad) for p in model.params)


def test_run_txt_cls_pooling_end_to_end(tmp_path):
    cfg = tiny_run_config(pooling="txt-CLS", epochs=1)
    bundle = make_bundle(mami_like_spec(), 16, seed=22)
    out = tr.run(cfg, [bundle], tmp_path / "txtcls")
    metrics = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert {m["task"] for m in metrics} == {"MAMI", "Task_A", "Task_B"}


@pytest.mark.parametrize("variant,pooling", [("Shared", "No"), ("Multi", "txt-CLS")])
def test_viz_attention_partition_all_decoder_layouts(variant, pooling):
    from mmfusion import experiments as xp

    cfg = tiny_run_config(encoder_variant=variant, pooling=pooling)
    spec = mami_like_spec()
    bundle = make_bundle(spec, 16, seed=23)
    model = tr.MultiTaskModel(cfg, [spec], seed=24)
    result = xp.viz_attention(model, "mami", bundle.splits["train"])
    for task_data in result["tasks"].values():
        cross = np.array(task_data["cross_attention"])
        np.testing.assert_allclose(cross.sum(axis=-1), 1.0, atol=1e-5)


def test_weight_decay_audit_on_real_model():
    model = tr.MultiTaskModel(tiny_run_config(), [mami_like_spec()], seed=8)
    exempt = {p.name for p in model.params if p.no_decay}
    for name in exempt:
        assert (".b" in name or "ln" in name or "beta" in name or "gamma" in name), name
    decayed = [p.name for p in model.params if not p.no_decay]
    assert not any(name.endswith((".b", ".beta", ".gamma")) for name in decayed)


# -- checkpoints -----------------------------------------------------------------------------


def test_checkpoint_round_trip_bitwise(tmp_path):
    cfg = tiny_run_config()
    spec = mami_like_spec()
    model = tr.MultiTaskModel(cfg, [spec], seed=9)
    opt = tr.Madgrad(model.params)
    opt.k = 7
    tr.checkpoint_save(tmp_path / "m.ckpt", model, opt, epoch=3)
    model2 = tr.MultiTaskModel(cfg, [spec], seed=123)  # different init
    opt2 = tr.Madgrad(model2.params)
    meta = tr.checkpoint_restore(tmp_path / "m.ckpt", model2, opt2)
    assert meta["epoch"] == 3 and opt2.k == 7
    for a, b in zip(model.params, model2.params):
        assert a.data.tobytes() == b.data.tobytes()


def test_checkpoint_shape_mismatch(tmp_path):
    spec = mami_like_spec()
    model = tr.MultiTaskModel(tiny_run_config(), [spec], seed=10)
    tr.checkpoint_save(tmp_path / "m.ckpt", model, None, epoch=0)
    bigger = tr.MultiTaskModel(
        tiny_run_config(hidden_dim=32), [mami_like_spec(hidden=32)], seed=10
    )
    with pytest.raises(tr.CheckpointError) as e:
        tr.checkpoint_restore(tmp_path / "m.ckpt", bigger)
    assert e.value.code == "shape-mismatch"


# -- full runs ------------------------------------------------------------------------------


def test_run_writes_layout_and_is_deterministic(tmp_path):
    cfg = tiny_run_config()
    bundle = make_bundle(mami_like_spec(), 24, seed=12)
    tr.run(cfg, [bundle], tmp_path / "r1")
    tr.run(cfg, [bundle], tmp_path / "r2")
    for name in ("config.json", "trace.jsonl", "metrics.jsonl"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()
    assert (tmp_path / "r1" / "best.ckpt").exists()
    assert (tmp_path / "r1" / "last.ckpt").exists()
    assert not (tmp_path / "r1" / "INCOMPLETE").exists()
    assert not (tmp_path / "r1" / "LOCK").exists()
    lines = [json.loads(l) for l in (tmp_path / "r1" / "trace.jsonl").read_text().splitlines()]
    assert [l["step"] for l in lines] == list(range(len(lines)))
    n_batches = 3  # 19 train records / batch 8 -> 3 batches
    assert len(lines) == tr.steps_per_epoch(n_batches, cfg.train.accumulation_every) * 2


def test_run_resume_reproduces_uninterrupted_trace(tmp_path):
    cfg = tiny_run_config(epochs=4)
    bundle = make_bundle(mami_like_spec(), 24, seed=13)
    tr.run(cfg, [bundle], tmp_path / "full")
    tr.run(cfg, [bundle], tmp_path / "part", stop_after_epoch=1)
    assert (tmp_path / "part" / "INCOMPLETE").exists()
    tr.run(cfg, [bundle], tmp_path / "part", resume=True)
    assert not (tmp_path / "part" / "INCOMPLETE").exists()
    for name in ("trace.jsonl", "metrics.jsonl"):
        assert (tmp_path / "part" / name).read_bytes() == (tmp_path / "full" / name).read_bytes()


def test_run_multi_task_schedule_contract(tmp_path):
    cfg = tiny_run_config(multi_task=True, epochs=1)
    mami = make_bundle(mami_like_spec(), 24, seed=14)
    fbhm = make_bundle(fbhm_like_spec(), 16, seed=15)
    out = tr.run(cfg, [mami, fbhm], tmp_path / "mt")
    metrics = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    tasks = {(m["dataset"], m["task"], m["metric"]) for m in metrics}
    assert ("mami", "MAMI", "scoreB") in tasks
    assert ("mami", "Task_A", "scoreA") in tasks
    assert ("fbhm", "Hateful", "scoreA") in tasks


def test_run_rejects_locked_directory(tmp_path):
    cfg = tiny_run_config(epochs=1)
    bundle = make_bundle(mami_like_spec(), 16, seed=16)
    (tmp_path / "r").mkdir()
    (tmp_path / "r" / "LOCK").write_text("")
    with pytest.raises(RuntimeError, match="locked"):
        tr.run(cfg, [bundle], tmp_path / "r")
