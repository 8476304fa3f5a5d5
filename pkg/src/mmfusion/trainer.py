"""Multi-task training: per-dataset batch scheduling, MADGRAD optimization
with linear warmup/decay, gradient accumulation and clipping, F1 metrics,
evaluation loops, and bit-exact checkpoints.

Every source of randomness is derived statelessly from (seed, stream, epoch,
batch), so two runs with the same config produce byte-identical traces and a
resumed run continues exactly where the uninterrupted one would have been.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndgrad as ng
from .featurestore import DatasetSpec
from .fusion import ConfigError, FusionConfig, FusionModel, ParamRegistry
from .heads import (
    MULTI_HEAD,
    SHARED_SINGLE,
    ClassQueryTable,
    DecoderStack,
    TaskHead,
    classify_pooled,
    classify_shared,
    decode_classes,
    probabilities,
)
from .objectives import dataset_loss, task_loss

CKPT_VERSION = 1

STREAM_INIT = 0
STREAM_SCHEDULE = 1
STREAM_DROPOUT = 2

VARIANT_TOKENS = {"Shared": "shared", "Multi": "multi"}
POOLING_TOKENS = {"CLS": "cls", "No": "none", "txt-CLS": "txt_cls"}
VARIANT_NAMES = {v: k for k, v in VARIANT_TOKENS.items()}
POOLING_NAMES = {v: k for k, v in POOLING_TOKENS.items()}


def rng_for(seed: int, *stream) -> np.random.Generator:
    """A generator derived statelessly from (seed, stream ids)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


class CheckpointError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 15
    lr: float = 2e-4
    accumulation_every: int = 20
    weight_decay: float = 5e-4
    clip_norm: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "epochs", "lr", "accumulation_every", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")


@dataclass
class RunConfig:
    """The six ablation axes plus the training and fusion hyperparameters."""

    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    proj_align: bool = False
    contrastive: bool = False
    multi_task: bool = False
    mlp_hidden: int = 768
    decoder_layers: int = 6
    decoder_heads: int = 8

    @property
    def decoder_mode(self) -> bool:
        return self.fusion.pooling != "cls"

    FLAT_KEYS = (
        "encoder_variant", "pooling", "proj_align", "contrastive", "multi_task",
        "backbones", "hidden_dim", "dropout", "mlp_hidden",
        "shared_layers", "shared_heads", "image_layers", "image_heads",
        "object_layers", "object_heads", "text_layers", "text_heads",
        "decoder_layers", "decoder_heads",
        "batch_size", "epochs", "lr", "accumulation_every",
        "weight_decay", "clip_norm", "seed",
    )

    def to_flat(self) -> dict:
        f, t = self.fusion, self.train
        return {
            "encoder_variant": VARIANT_NAMES[f.encoder_variant],
            "pooling": POOLING_NAMES[f.pooling],
            "proj_align": self.proj_align,
            "contrastive": self.contrastive,
            "multi_task": self.multi_task,
            "backbones": list(f.backbones),
            "hidden_dim": f.hidden_dim,
            "dropout": f.dropout,
            "mlp_hidden": self.mlp_hidden,
            "shared_layers": f.shared_layers,
            "shared_heads": f.shared_heads,
            "image_layers": f.image_layers,
            "image_heads": f.image_heads,
            "object_layers": f.object_layers,
            "object_heads": f.object_heads,
            "text_layers": f.text_layers,
            "text_heads": f.text_heads,
            "decoder_layers": self.decoder_layers,
            "decoder_heads": self.decoder_heads,
            "batch_size": t.batch_size,
            "epochs": t.epochs,
            "lr": t.lr,
            "accumulation_every": t.accumulation_every,
            "weight_decay": t.weight_decay,
            "clip_norm": t.clip_norm,
            "seed": t.seed,
        }

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        unknown = set(flat) - set(cls.FLAT_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        defaults = cls().to_flat()
        merged = {**defaults, **flat}
        variant = merged["encoder_variant"]
        pooling = merged["pooling"]
        if variant not in VARIANT_TOKENS:
            raise ConfigError(f"encoder_variant must be one of {sorted(VARIANT_TOKENS)}")
        if pooling not in POOLING_TOKENS:
            raise ConfigError(f"pooling must be one of {sorted(POOLING_TOKENS)}")
        fusion = FusionConfig(
            hidden_dim=merged["hidden_dim"],
            encoder_variant=VARIANT_TOKENS[variant],
            pooling=POOLING_TOKENS[pooling],
            dropout=merged["dropout"],
            shared_layers=merged["shared_layers"],
            shared_heads=merged["shared_heads"],
            image_layers=merged["image_layers"],
            image_heads=merged["image_heads"],
            object_layers=merged["object_layers"],
            object_heads=merged["object_heads"],
            text_layers=merged["text_layers"],
            text_heads=merged["text_heads"],
            backbones=tuple(merged["backbones"]),
        )
        train = TrainConfig(
            batch_size=merged["batch_size"],
            epochs=merged["epochs"],
            lr=merged["lr"],
            accumulation_every=merged["accumulation_every"],
            weight_decay=merged["weight_decay"],
            clip_norm=merged["clip_norm"],
            seed=merged["seed"],
        )
        return cls(
            fusion=fusion,
            train=train,
            proj_align=bool(merged["proj_align"]),
            contrastive=bool(merged["contrastive"]),
            multi_task=bool(merged["multi_task"]),
            mlp_hidden=merged["mlp_hidden"],
            decoder_layers=merged["decoder_layers"],
            decoder_heads=merged["decoder_heads"],
        )


# -- schedule --------------------------------------------------------------------


@dataclass
class Schedule:
    batches: list  # (dataset name, [record ids]) in training order
    seed: int

    def counts(self) -> dict:
        out = {}
        for name, _ in self.batches:
            out[name] = out.get(name, 0) + 1
        return out


def build_schedule(dataset_ids: dict, batch_size: int, seed: int, epoch: int = 0) -> Schedule:
    """One epoch of dataset-pure batches, proportionally interleaved.

    Each dataset's records are shuffled and chunked (last partial batch kept),
    then the batch sequence is a seeded shuffle of the per-dataset batches, so
    every record appears exactly once per epoch.
    """
    rng = rng_for(seed, STREAM_SCHEDULE, epoch)
    per_dataset = []
    for name in dataset_ids:
        ids = list(dataset_ids[name])
        if not ids:
            raise ValueError(f"dataset {name!r} is empty")
        order = rng.permutation(len(ids))
        shuffled = [ids[i] for i in order]
        chunks = [shuffled[i : i + batch_size] for i in range(0, len(shuffled), batch_size)]
        per_dataset.append((name, chunks))
    assignment = []
    for idx, (_, chunks) in enumerate(per_dataset):
        assignment.extend([idx] * len(chunks))
    assignment = [assignment[i] for i in rng.permutation(len(assignment))]
    cursors = [0] * len(per_dataset)
    batches = []
    for idx in assignment:
        name, chunks = per_dataset[idx]
        batches.append((name, chunks[cursors[idx]]))
        cursors[idx] += 1
    return Schedule(batches=batches, seed=seed)


def lr_at(step: int, warmup_steps: int, total_steps: int, base_lr: float) -> float:
    """Linear 0 -> base_lr over warmup, then linear base_lr -> 0 at total."""
    if step < warmup_steps:
        return base_lr * step / max(1, warmup_steps)
    return base_lr * max(0.0, (total_steps - step) / max(1, total_steps - warmup_steps))


def steps_per_epoch(n_batches: int, accumulation_every: int) -> int:
    """Accumulation boundaries plus the end-of-epoch flush."""
    return n_batches // accumulation_every + (1 if n_batches % accumulation_every else 0)


# -- MADGRAD -----------------------------------------------------------------------


@dataclass
class ParamState:
    s: np.ndarray
    v: np.ndarray
    x0: np.ndarray


def madgrad_update(param: np.ndarray, grad: np.ndarray, state: ParamState, k: int,
                   lr_now: float, momentum: float = 0.9, eps: float = 1e-6) -> np.ndarray:
    """One dual-averaging update with cube-root denominator and iterate momentum:

        lam   = lr_now * sqrt(k + 1)
        s    += lam * g           v += lam * g*g
        z     = x0 - s / (cbrt(v) + eps)
        x_new = momentum * x + (1 - momentum) * z
    """
    if lr_now < 0:
        raise ValueError("learning rate must be >= 0")
    lam = lr_now * math.sqrt(k + 1)
    state.s += lam * grad
    state.v += lam * grad * grad
    z = state.x0 - state.s / (np.cbrt(state.v) + eps)
    return momentum * param + (1.0 - momentum) * z


class Madgrad:
    """Optimizer state over a fixed parameter list; one shared step count."""

    def __init__(self, params, momentum: float = 0.9, eps: float = 1e-6):
        self.params = list(params)
        self.momentum = momentum
        self.eps = eps
        self.k = 0
        self.state = {
            p.name: ParamState(
                s=np.zeros_like(p.data), v=np.zeros_like(p.data), x0=p.data.copy()
            )
            for p in self.params
        }


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


def clip_and_step(params, opt: Madgrad, lr_now: float, clip_norm: float,
                  weight_decay: float):
    """Joint-norm clip, weight decay on eligible params, MADGRAD update, zero grads."""
    for p in params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise ng.NumericsError(f"non-finite gradient in {p.name}")
    norm = global_grad_norm(params)
    scale = clip_norm / norm if norm > clip_norm else 1.0
    for p in params:
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        grad = grad * scale
        if weight_decay and not p.no_decay:
            grad = grad + weight_decay * p.data
        p.data = madgrad_update(
            p.data, grad.astype(p.data.dtype), opt.state[p.name], opt.k,
            lr_now, opt.momentum, opt.eps,
        )
        p.zero_grad()
    opt.k += 1
    return norm


# -- metrics --------------------------------------------------------------------------


def _f1(preds: np.ndarray, labels: np.ndarray, positive: int) -> float:
    tp = int(((preds == positive) & (labels == positive)).sum())
    fp = int(((preds == positive) & (labels != positive)).sum())
    fn = int(((preds != positive) & (labels == positive)).sum())
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def score_a(pred_probs, labels, threshold: float = 0.5) -> float:
    """Macro-average F1 over the positive and negative classes of one label."""
    probs = np.asarray(pred_probs).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if probs.size == 0:
        raise ValueError("score_a on empty input")
    preds = (probs >= threshold).astype(int)
    return 0.5 * (_f1(preds, labels, 1) + _f1(preds, labels, 0))


def score_b(pred_probs, labels, threshold: float = 0.5) -> float:
    """Support-weighted average of the per-label positive-class F1."""
    probs = np.asarray(pred_probs)
    labels = np.asarray(labels)
    preds = (probs >= threshold).astype(int)
    supports = labels.sum(axis=0).astype(float)
    if supports.sum() == 0:
        raise ValueError("score_b needs at least one true instance")
    f1s = np.array([_f1(preds[:, c], labels[:, c], 1) for c in range(labels.shape[1])])
    return float((f1s * supports).sum() / supports.sum())


# -- multi-task model ------------------------------------------------------------------


@dataclass
class TaskOutput:
    labels: list  # task labels in global declaration order
    probs: ng.Tensor  # (B, C)
    h_layers: list  # MLP layer inputs for the contrastive loss
    attention: list | None = None  # per-layer records when requested


class MultiTaskModel:
    """One fusion trunk shared by every dataset; one head per (dataset, task)."""

    def __init__(self, config: RunConfig, specs: list[DatasetSpec], seed: int):
        if not specs:
            raise ConfigError("at least one dataset is required")
        layout = [_track_key(t) for t in specs[0].tracks]
        for s in specs[1:]:
            if [_track_key(t) for t in s.tracks] != layout:
                raise ConfigError(
                    f"dataset {s.name} track layout differs from {specs[0].name}"
                )
        self.config = config
        self.specs = {s.name: s for s in specs}
        self.global_labels = []
        for s in specs:
            for name in s.label_names:
                if name not in self.global_labels:
                    self.global_labels.append(name)
        self.global_index = {n: i for i, n in enumerate(self.global_labels)}

        self.reg = ParamRegistry(rng_for(seed, STREAM_INIT))
        self.fusion = FusionModel(config.fusion, specs[0].tracks, self.reg)
        d = config.fusion.hidden_dim
        if config.decoder_mode:
            self.queries = ClassQueryTable(self.reg, self.global_labels, d)
            self.decoder = DecoderStack(
                self.reg, d, 4 * d, config.decoder_layers, config.decoder_heads
            )
        else:
            self.queries = None
            self.decoder = None
        self.heads = {}
        mode = SHARED_SINGLE if config.decoder_mode else MULTI_HEAD
        for s in specs:
            for task in s.tasks:
                self.heads[(s.name, task.name)] = TaskHead(
                    self.reg, f"{s.name}.{task.name}", mode, d,
                    config.mlp_hidden, len(task.labels),
                )

    @property
    def params(self):
        return self.reg.params

    def ordered_task_labels(self, task_labels) -> list:
        for name in task_labels:
            if name not in self.global_index:
                raise ConfigError(f"unknown label {name!r}")
        return sorted(task_labels, key=self.global_index.__getitem__)

    def targets_for(self, ds: DatasetSpec, records, ordered_labels) -> np.ndarray:
        cols = [ds.label_names.index(name) for name in ordered_labels]
        return np.stack([rec.labels[cols] for rec in records]).astype(np.int64)

    def forward_batch(self, ds_name: str, records, rng=None, train=False,
                      record_attn=False):
        """Run fusion once, then every task head of the dataset.

        Returns ({task name: TaskOutput}, assembled sequence).
        """
        ds = self.specs[ds_name]
        drop = self.config.fusion.dropout if train else 0.0
        pooled, seq = self.fusion.forward(records, rng=rng, train=train)
        outputs = {}
        for task in ds.tasks:
            head = self.heads[(ds_name, task.name)]
            if self.config.decoder_mode:
                source, source_mask = pooled
                class_out, ordered, attn = decode_classes(
                    source, source_mask, task.labels, self.queries, self.decoder,
                    drop=drop, rng=rng, record=record_attn,
                )
                logits, h_layers = classify_shared(class_out, head)
            else:
                ordered = self.ordered_task_labels(task.labels)
                logits, h_layers = classify_pooled(pooled, head)
                attn = None
            outputs[task.name] = TaskOutput(
                labels=ordered,
                probs=probabilities(logits),
                h_layers=h_layers,
                attention=attn if record_attn else None,
            )
        return outputs, seq


def _track_key(t):
    return (t.name, t.kind, t.dim, t.max_len, t.has_logits, t.logit_classes, t.no_object_index)


def train_step(model: MultiTaskModel, ds_name: str, records, rng=None):
    """Forward once through fusion, apply each task head + its loss, backward
    on the dataset loss; gradients accumulate (no optimizer step here)."""
    ds = model.specs[ds_name]
    outputs, seq = model.forward_batch(ds_name, records, rng=rng, train=True)
    breakdowns = []
    for task in ds.tasks:
        out = outputs[task.name]
        targets = model.targets_for(ds, records, out.labels)
        breakdowns.append(
            task_loss(
                out.probs, targets, out.h_layers, seq.raw_means, seq.proj_means,
                task_name=task.name,
                align_enabled=model.config.proj_align,
                contrastive_enabled=model.config.contrastive,
            )
        )
    loss = dataset_loss(breakdowns)
    loss.backward()
    return breakdowns, float(loss.item())


def evaluate(model: MultiTaskModel, ds_name: str, records, eval_batch: int = 64) -> dict:
    """Per-task (metric name, score) on one split; deterministic, dropout off."""
    ds = model.specs[ds_name]
    probs = {task.name: [] for task in ds.tasks}
    labels = {task.name: [] for task in ds.tasks}
    with ng.no_grad():
        for i in range(0, len(records), eval_batch):
            chunk = records[i : i + eval_batch]
            outputs, _ = model.forward_batch(ds_name, chunk)
            for task in ds.tasks:
                out = outputs[task.name]
                probs[task.name].append(out.probs.numpy())
                labels[task.name].append(model.targets_for(ds, chunk, out.labels))
    results = {}
    for task in ds.tasks:
        p = np.concatenate(probs[task.name])
        y = np.concatenate(labels[task.name])
        if len(task.labels) == 1:
            results[task.name] = ("scoreA", score_a(p[:, 0], y[:, 0]))
        else:
            results[task.name] = ("scoreB", score_b(p, y))
    return results


# -- checkpoints -----------------------------------------------------------------------


def checkpoint_save(path, model: MultiTaskModel, opt: Madgrad | None, epoch: int,
                    extra: dict | None = None):
    arrays = {}
    for p in model.params:
        arrays[f"p::{p.name}"] = p.data
    if opt is not None:
        for name, st in opt.state.items():
            arrays[f"s::{name}"] = st.s
            arrays[f"v::{name}"] = st.v
            arrays[f"x0::{name}"] = st.x0
    meta = {
        "version": CKPT_VERSION,
        "epoch": epoch,
        "k": opt.k if opt is not None else 0,
        "config": model.config.to_flat(),
        "datasets": [s.to_dict() for s in model.specs.values()],
        "param_names": [p.name for p in model.params],
        "extra": extra or {},
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        np.savez(f, **arrays)
    os.replace(tmp, path)


def checkpoint_load(path) -> tuple[dict, dict]:
    """Returns (meta, arrays); validates the container version."""
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays.pop("meta").tobytes().decode())
    if meta.get("version") != CKPT_VERSION:
        raise CheckpointError("bad-version", f"checkpoint version {meta.get('version')}")
    return meta, arrays


def checkpoint_restore(path, model: MultiTaskModel, opt: Madgrad | None = None) -> dict:
    """Load parameters (and optimizer state) into an existing model, bit-exactly."""
    meta, arrays = checkpoint_load(path)
    names = {p.name for p in model.params}
    if set(meta["param_names"]) != names:
        raise CheckpointError("shape-mismatch", "parameter sets differ from checkpoint")
    for p in model.params:
        data = arrays[f"p::{p.name}"]
        if data.shape != p.data.shape:
            raise CheckpointError(
                "shape-mismatch", f"{p.name}: checkpoint {data.shape} vs model {p.data.shape}"
            )
        p.data = data.copy()
        p.zero_grad()
    if opt is not None:
        opt.k = meta["k"]
        for name, st in opt.state.items():
            st.s = arrays[f"s::{name}"].copy()
            st.v = arrays[f"v::{name}"].copy()
            st.x0 = arrays[f"x0::{name}"].copy()
    return meta


# -- run loop -------------------------------------------------------------------------


@dataclass
class DatasetBundle:
    spec: DatasetSpec
    splits: dict  # split name -> list[FeatureRecord]; 'train' required


def run(config: RunConfig, bundles: list[DatasetBundle], out_dir, resume: bool = False,
        stop_after_epoch: int | None = None) -> Path:
    """Train per the schedule, evaluate every epoch, write the run directory.

    Layout: config.json, trace.jsonl (one line per optimizer step),
    metrics.jsonl (one line per epoch x split x task), best.ckpt, last.ckpt.
    A LOCK file guards concurrent access; INCOMPLETE marks unfinished runs.
    ``stop_after_epoch`` interrupts the run after that epoch completes (the
    directory stays resumable).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / "LOCK"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        os.close(fd)
    except FileExistsError:
        raise RuntimeError(f"run directory {out} is locked by another process") from None
    try:
        return _run_locked(config, bundles, out, resume, stop_after_epoch)
    finally:
        lock.unlink(missing_ok=True)


def _run_locked(config: RunConfig, bundles, out: Path, resume: bool,
                stop_after_epoch: int | None) -> Path:
    tc = config.train
    for b in bundles:
        if "train" not in b.splits or not b.splits["train"]:
            raise ValueError(f"dataset {b.spec.name} has no train split")
    specs = [b.spec for b in bundles]
    model = MultiTaskModel(config, specs, seed=tc.seed)
    opt = Madgrad(model.params)

    records_by_name = {b.spec.name: {r.id: r for r in b.splits["train"]} for b in bundles}
    train_ids = {b.spec.name: sorted(records_by_name[b.spec.name]) for b in bundles}
    n_batches = sum(
        math.ceil(len(ids) / tc.batch_size) for ids in train_ids.values()
    )
    per_epoch_steps = steps_per_epoch(n_batches, tc.accumulation_every)
    total_steps = per_epoch_steps * tc.epochs
    warmup = total_steps // 10

    start_epoch = 0
    best = {"value": -1.0, "epoch": -1}
    running_max: dict = {}
    if resume:
        meta = checkpoint_restore(out / "last.ckpt", model, opt)
        start_epoch = meta["epoch"] + 1
        best = meta["extra"].get("best", best)
        running_max = {tuple(k): v for k, v in meta["extra"].get("running_max", [])}
        trace_mode, metrics_mode = "a", "a"
    else:
        (out / "config.json").write_text(json.dumps(config.to_flat(), indent=1) + "\n")
        trace_mode, metrics_mode = "w", "w"
    (out / "INCOMPLETE").write_text("")

    trace = open(out / "trace.jsonl", trace_mode)
    metrics = open(out / "metrics.jsonl", metrics_mode)
    try:
        for epoch in range(start_epoch, tc.epochs):
            schedule = build_schedule(train_ids, tc.batch_size, tc.seed, epoch)
            pending = []  # per-batch dataset-level loss components
            since_step = 0
            for batch_idx, (ds_name, ids) in enumerate(schedule.batches):
                rng = rng_for(tc.seed, STREAM_DROPOUT, epoch, batch_idx)
                records = [records_by_name[ds_name][i] for i in ids]
                breakdowns, total = train_step(model, ds_name, records, rng=rng)
                pending.append(
                    {
                        "main": float(np.mean([b.main for b in breakdowns])),
                        "align": float(np.mean([b.align for b in breakdowns])),
                        "contrastive": float(np.mean([b.contrastive for b in breakdowns])),
                        "total": total,
                    }
                )
                since_step += 1
                last_batch = batch_idx == len(schedule.batches) - 1
                if since_step == tc.accumulation_every or last_batch:
                    step_idx = opt.k
                    lr_now = lr_at(step_idx, warmup, total_steps, tc.lr)
                    clip_and_step(model.params, opt, lr_now, tc.clip_norm, tc.weight_decay)
                    line = {
                        "step": step_idx,
                        "lr": lr_now,
                        "main": float(np.mean([p["main"] for p in pending])),
                        "align": float(np.mean([p["align"] for p in pending])),
                        "contrastive": float(np.mean([p["contrastive"] for p in pending])),
                        "total": float(np.mean([p["total"] for p in pending])),
                    }
                    trace.write(json.dumps(line) + "\n")
                    pending = []
                    since_step = 0
            trace.flush()

            dev_scores = []
            for b in bundles:
                for split, records in sorted(b.splits.items()):
                    if not records:
                        continue
                    results = evaluate(model, b.spec.name, records)
                    for task_name, (metric, value) in sorted(results.items()):
                        key = (b.spec.name, split, task_name)
                        running_max[key] = max(value, running_max.get(key, value))
                        metrics.write(
                            json.dumps(
                                {
                                    "epoch": epoch,
                                    "dataset": b.spec.name,
                                    "split": split,
                                    "task": task_name,
                                    "metric": metric,
                                    "value": value,
                                    "best": running_max[key],
                                }
                            )
                            + "\n"
                        )
                    if b.spec.name == bundles[0].spec.name and split == "dev":
                        dev_scores = [v for _, v in results.values()]
            metrics.flush()

            extra = {
                "best": best,
                "running_max": [[list(k), v] for k, v in sorted(running_max.items())],
            }
            if dev_scores and float(np.mean(dev_scores)) > best["value"]:
                best = {"value": float(np.mean(dev_scores)), "epoch": epoch}
                extra["best"] = best
                checkpoint_save(out / "best.ckpt", model, opt, epoch, extra)
            checkpoint_save(out / "last.ckpt", model, opt, epoch, extra)
            if stop_after_epoch is not None and epoch >= stop_after_epoch:
                return out  # interrupted: INCOMPLETE stays, run is resumable
    finally:
        trace.close()
        metrics.close()
    if not (out / "best.ckpt").exists():
        checkpoint_save(out / "best.ckpt", model, opt, tc.epochs - 1, {"best": best})
    (out / "INCOMPLETE").unlink(missing_ok=True)
    return out
