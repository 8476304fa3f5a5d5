"""Experiment harness: the four ablation rounds, round-table reporting,
attention/embedding exports for visualization, and score-distribution stats.

Each ablation round instantiates exactly the configuration columns of its
round table (the carried-over winner column included), so a round's output
directory holds one run per experiment id.
"""

from __future__ import annotations

import json
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy import stats as sps

from . import ndgrad as ng
from .featurestore import TrackKind, read_features
from .fusion import ConfigError
from .trainer import (
    DatasetBundle,
    MultiTaskModel,
    RunConfig,
    checkpoint_load,
    checkpoint_restore,
    run,
)

PAPER_TASKS = ("Task_A", "Task_B")
SPLIT_ORDER = ("test", "dev", "train")


# -- ablation rounds -----------------------------------------------------------------


def _axes(config: RunConfig, variant, pooling, proj, contr, multi, backbones) -> RunConfig:
    fusion = replace(
        config.fusion, encoder_variant=variant, pooling=pooling, backbones=tuple(backbones)
    )
    return replace(
        config, fusion=fusion, proj_align=proj, contrastive=contr, multi_task=multi
    )


BOTH = (TrackKind.IMAGE_PATCH.value, TrackKind.OBJECT.value)
CLIP_ONLY = (TrackKind.IMAGE_PATCH.value,)
DETR_ONLY = (TrackKind.OBJECT.value,)


def ablation_round(round_no: int, base: RunConfig) -> list[tuple[str, RunConfig]]:
    """The exact config grid of one ablation round, as (experiment id, config)."""
    if round_no == 1:
        return [
            ("00", _axes(base, "shared", "cls", False, False, False, BOTH)),
            ("01", _axes(base, "shared", "none", False, False, False, BOTH)),
            ("02", _axes(base, "multi", "none", False, False, False, BOTH)),
            ("03", _axes(base, "multi", "txt_cls", False, False, False, BOTH)),
        ]
    if round_no == 2:
        return [
            ("02", _axes(base, "multi", "none", False, False, False, BOTH)),
            ("10", _axes(base, "multi", "none", True, False, False, BOTH)),
            ("12", _axes(base, "multi", "none", False, True, False, BOTH)),
            ("13", _axes(base, "multi", "none", True, True, False, BOTH)),
        ]
    if round_no == 3:
        return [
            ("10", _axes(base, "multi", "none", True, False, False, BOTH)),
            ("20", _axes(base, "multi", "none", True, False, False, CLIP_ONLY)),
            ("21", _axes(base, "multi", "none", True, False, False, DETR_ONLY)),
        ]
    if round_no == 4:
        # this round trains twice as long as the earlier ones
        def longer(cfg):
            return replace(cfg, train=replace(cfg.train, epochs=2 * cfg.train.epochs))

        return [
            ("10", longer(_axes(base, "multi", "none", True, False, False, BOTH))),
            ("30", longer(_axes(base, "multi", "none", True, False, True, BOTH))),
        ]
    raise ConfigError(f"round must be 1..4, got {round_no}")


def run_round(round_no: int, base: RunConfig, bundles_for, out_dir,
              plan_only: bool = False) -> dict:
    """Execute (or just plan) one round; returns the plan dict.

    ``bundles_for(config)`` supplies the dataset bundles for one experiment,
    honoring its multi_task axis.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = ablation_round(round_no, base)
    plan = {
        "round": round_no,
        "experiments": {exp_id: cfg.to_flat() for exp_id, cfg in grid},
    }
    (out / "plan.json").write_text(json.dumps(plan, indent=1) + "\n")
    if plan_only:
        return plan
    for exp_id, cfg in grid:
        run(cfg, bundles_for(cfg), out / exp_id)
    table_text, table = render_round_table([(exp_id, out / exp_id) for exp_id, _ in grid])
    (out / "round_table.txt").write_text(table_text)
    (out / "round_table.json").write_text(json.dumps(table, indent=1) + "\n")
    return plan


# -- round tables -----------------------------------------------------------------------


def load_metric_series(run_dir) -> dict:
    """metrics.jsonl -> {(dataset, split, task): [value per epoch]}."""
    series = {}
    for line in (Path(run_dir) / "metrics.jsonl").read_text().splitlines():
        m = json.loads(line)
        series.setdefault((m["dataset"], m["split"], m["task"]), []).append(
            (m["epoch"], m["value"])
        )
    return {
        key: [v for _, v in sorted(vals)] for key, vals in series.items()
    }


def render_round_table(runs: list, tasks=PAPER_TASKS) -> tuple[str, dict]:
    """Max score per split x task per experiment, as aligned text + data dict."""
    missing = [
        str(exp_id)
        for exp_id, d in runs
        if not (Path(d) / "metrics.jsonl").exists() or (Path(d) / "INCOMPLETE").exists()
    ]
    if missing:
        raise RuntimeError(f"incomplete runs: {missing}")
    per_run = {exp_id: load_metric_series(d) for exp_id, d in runs}
    columns = [exp_id for exp_id, _ in runs]

    splits_present = None
    for series in per_run.values():
        got = {s for (_, s, t) in series if t in tasks}
        splits_present = got if splits_present is None else splits_present & got
    splits = [s for s in SPLIT_ORDER if s in (splits_present or set())]

    rows = []
    for split in splits:
        for task in tasks:
            cells = {}
            for exp_id in columns:
                values = [
                    vals
                    for (ds, s, t), vals in per_run[exp_id].items()
                    if s == split and t == task
                ]
                if values:
                    cells[exp_id] = max(values[0])
            if len(cells) == len(columns):
                rows.append({"split": split, "task": task, "cells": cells})

    label_w = max((len(f"{r['split'].capitalize()} - {r['task']}") for r in rows), default=10)
    lines = [" " * label_w + " | " + " | ".join(f"{c:>8}" for c in columns)]
    for r in rows:
        label = f"{r['split'].capitalize()} - {r['task']}"
        cells = " | ".join(f"{r['cells'][c]:8.4f}" for c in columns)
        lines.append(f"{label:<{label_w}} | {cells}")
    text = "\n".join(lines) + "\n"
    return text, {"columns": columns, "rows": rows}


# -- model reload ------------------------------------------------------------------------


def load_model(checkpoint_path) -> MultiTaskModel:
    """Rebuild the model a checkpoint describes and load its parameters."""
    from .featurestore import DatasetSpec

    meta, _ = checkpoint_load(checkpoint_path)
    config = RunConfig.from_flat(meta["config"])
    specs = [DatasetSpec.from_dict(d) for d in meta["datasets"]]
    model = MultiTaskModel(config, specs, seed=config.train.seed)
    checkpoint_restore(checkpoint_path, model)
    return model


# -- visualization exports -----------------------------------------------------------------


def source_track_spans(model: MultiTaskModel, seq) -> list[tuple[str, int, int]]:
    """Partition of the decoder source positions by owning track.

    With no pooling the spans are the assembly's owner spans (a shared
    variant's global [CLS] is grouped with the first track); with text-CLS
    pooling the source is patch tokens, object tokens, then the text [CLS].
    """
    cfg = model.config.fusion
    if cfg.pooling == "none":
        spans = sorted(
            ((name, start, length) for name, (start, length) in seq.owner_spans.items()),
            key=lambda x: x[1],
        )
        if cfg.encoder_variant == "shared" and spans and spans[0][1] == 1:
            name, start, length = spans[0]
            spans[0] = (name, 0, length + 1)
        return spans
    if cfg.pooling == "txt_cls":
        spans, cursor = [], 0
        for track in model.fusion.tracks:
            length = 1 if track.kind == TrackKind.TEXT else seq.segments[track.name][1]
            spans.append((track.name, cursor, length))
            cursor += length
        return spans
    raise ConfigError("pooled-MLP checkpoints have no decoder source")


def viz_attention(model: MultiTaskModel, ds_name: str, records, eval_batch: int = 64) -> dict:
    """Head-averaged decoder attention aggregated over a whole dataset:
    per layer the mean class x class self-attention, and the mean cross-
    attention with source weights summed per input track."""
    if not model.config.decoder_mode:
        raise ConfigError("checkpoint uses the pooled MLP classifier: no decoder attention")
    ds = model.specs[ds_name]
    sums = {}
    counts = {t.name: 0 for t in ds.tasks}
    track_names = None
    with ng.no_grad():
        for i in range(0, len(records), eval_batch):
            chunk = records[i : i + eval_batch]
            outputs, seq = model.forward_batch(ds_name, chunk, record_attn=True)
            spans = source_track_spans(model, seq)
            track_names = [name for name, _, _ in spans]
            for task in ds.tasks:
                out = outputs[task.name]
                n_layers = len(out.attention)
                if task.name not in sums:
                    c = len(out.labels)
                    sums[task.name] = {
                        "self": np.zeros((n_layers, c, c)),
                        "cross": np.zeros((n_layers, c, len(spans))),
                    }
                for layer, rec in enumerate(out.attention):
                    sums[task.name]["self"][layer] += rec["self"].sum(axis=0)
                    for t_idx, (_, start, length) in enumerate(spans):
                        sums[task.name]["cross"][layer, :, t_idx] += (
                            rec["cross"][:, :, start : start + length].sum(axis=-1).sum(axis=0)
                        )
                counts[task.name] += len(chunk)
    result = {"dataset": ds_name, "tracks": track_names, "tasks": {}}
    for task in ds.tasks:
        n = counts[task.name]
        result["tasks"][task.name] = {
            "classes": model.ordered_task_labels(task.labels),
            "instances": n,
            "self_attention": (sums[task.name]["self"] / n).tolist(),
            "cross_attention": (sums[task.name]["cross"] / n).tolist(),
        }
    return result


def viz_embeddings(model: MultiTaskModel, ds_name: str, records,
                   eval_batch: int = 64) -> list[dict]:
    """Raw per-class decoder outputs with labels, plus each class query vector
    (2-D projection such as t-SNE is external)."""
    if not model.config.decoder_mode:
        raise ConfigError("checkpoint uses the pooled MLP classifier: no decoder outputs")
    ds = model.specs[ds_name]
    lines = []
    for task in ds.tasks:
        for name in model.ordered_task_labels(task.labels):
            row = model.queries.table.numpy()[model.queries.index[name]]
            lines.append(
                {"kind": "query", "task": task.name, "class": name,
                 "vector": [float(v) for v in row]}
            )
    with ng.no_grad():
        for i in range(0, len(records), eval_batch):
            chunk = records[i : i + eval_batch]
            outputs, _ = model.forward_batch(ds_name, chunk)
            for task in ds.tasks:
                out = outputs[task.name]
                decoder_rows = out.h_layers[0].numpy()  # (B, C, hidden)
                for rec, rows in zip(chunk, decoder_rows):
                    for c, name in enumerate(out.labels):
                        label = int(rec.labels[ds.label_names.index(name)])
                        lines.append(
                            {
                                "kind": "instance",
                                "task": task.name,
                                "class": name,
                                "id": int(rec.id),
                                "label": label,
                                "vector": [float(v) for v in rows[c]],
                            }
                        )
    return lines


# -- score-distribution statistics ------------------------------------------------------------


def _median(sorted_vals) -> float:
    n = len(sorted_vals)
    mid = n // 2
    if n % 2:
        return float(sorted_vals[mid])
    return float(0.5 * (sorted_vals[mid - 1] + sorted_vals[mid]))


def tukey_quartiles(values) -> tuple[float, float, float]:
    """Hinges: quartiles as medians of the lower/upper halves, the median
    itself included in both halves for odd-length series.

    [1, 2, 3, 4, 5] -> (2, 3, 4).
    """
    s = sorted(values)
    n = len(s)
    lower = s[: (n + 1) // 2]
    upper = s[n // 2 :]
    return _median(lower), _median(s), _median(upper)


def series_stats(values, confidence: float = 0.95) -> dict:
    """Mean with a Student-t CI of the mean, plus a five-number box summary."""
    vals = [float(v) for v in values]
    n = len(vals)
    if n == 0:
        raise ValueError("empty series")
    mean = float(np.mean(vals))
    out = {"n": n, "mean": mean}
    if n >= 2:
        sd = float(np.std(vals, ddof=1))
        half = float(sps.t.ppf(0.5 + confidence / 2.0, n - 1)) * sd / math.sqrt(n)
        out.update({"sd": sd, "ci_low": mean - half, "ci_high": mean + half})
    else:
        out.update({"sd": None, "ci_low": None, "ci_high": None})
    q1, med, q3 = tukey_quartiles(vals)
    out.update({"min": min(vals), "q1": q1, "median": med, "q3": q3, "max": max(vals)})
    return out


def stats_report(run_dirs, split: str, task: str, dataset: str | None = None) -> list[dict]:
    """Per-run stats of the per-epoch score series for one split/task."""
    report = []
    for d in run_dirs:
        series = load_metric_series(d)
        values = None
        for (ds, s, t), vals in series.items():
            if s == split and t == task and (dataset is None or ds == dataset):
                values = vals
        if values is None:
            raise RuntimeError(f"run {d}: no series for split={split!r} task={task!r}")
        entry = {"run": str(d), "split": split, "task": task}
        entry.update(series_stats(values))
        report.append(entry)
    return report


# -- dataset presets ------------------------------------------------------------------------


def _load_bundle(split_root) -> DatasetBundle:
    root = Path(split_root)
    splits = {}
    spec = None
    for split in ("train", "dev", "test"):
        d = root / split
        if d.exists():
            s, records = read_features(d)
            if spec is not None and s.name != spec.name:
                raise ConfigError(f"{d}: dataset name {s.name!r} differs from {spec.name!r}")
            spec = s
            splits[split] = records
    if spec is None or "train" not in splits:
        raise ConfigError(f"{root}: no train/ container found")
    return DatasetBundle(spec=spec, splits=splits)


def load_bundles(data_dirs, multi_task: bool) -> list[DatasetBundle]:
    """One bundle per data dir; without multi-task only the first is used."""
    if not data_dirs:
        raise ConfigError("at least one --data directory is required")
    if multi_task and len(data_dirs) < 2:
        raise ConfigError("multi_task=true needs a second --data directory")
    chosen = data_dirs if multi_task else data_dirs[:1]
    return [_load_bundle(d) for d in chosen]
