"""Command-line surface: dataset generation, splitting, training, evaluation,
ablation rounds, visualization exports, and score statistics.

Every subcommand is a thin wrapper over module operations. Exit codes: 0 on
success, 2 for usage/config errors, 1 for runtime failures; failures print
one machine-readable JSON line to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import featurestore as fs
from . import experiments as xp
from .fusion import ConfigError
from .trainer import CheckpointError, RunConfig, evaluate, run

PRESETS = {
    "mami": {
        "labels": ["misogynous", "shaming", "stereotype", "objectification", "violence"],
        "tasks": [
            ("MAMI", ["misogynous", "shaming", "stereotype", "objectification", "violence"]),
            ("Task_A", ["misogynous"]),
            ("Task_B", ["shaming", "stereotype", "objectification", "violence"]),
        ],
    },
    "fbhm": {
        "labels": ["hateful"],
        "tasks": [("Hateful", ["hateful"])],
    },
}


def preset_dataset(args) -> fs.DatasetSpec:
    preset = PRESETS[args.preset]
    return fs.DatasetSpec(
        name=args.name or args.preset,
        label_names=list(preset["labels"]),
        tasks=[fs.TaskSpec(n, list(ls)) for n, ls in preset["tasks"]],
        tracks=[
            fs.TrackSpec("clip", fs.TrackKind.IMAGE_PATCH, dim=args.patch_dim,
                         max_len=args.patch_len),
            fs.TrackSpec("detr", fs.TrackKind.OBJECT, dim=args.object_dim,
                         max_len=args.object_len, has_logits=True,
                         logit_classes=args.logit_classes,
                         no_object_index=args.logit_classes - 1),
            fs.TrackSpec("text", fs.TrackKind.TEXT, dim=args.text_dim,
                         max_len=args.text_len),
        ],
    )


def cmd_gen_synth(args) -> int:
    spec = preset_dataset(args)
    synth = fs.SynthSpec(
        dataset=spec,
        n_records=args.records,
        signal=args.signal,
        noobj_fraction=args.noobj_frac,
        all_noobj_prob=args.all_noobj_prob,
    )
    records = fs.synth_generate(synth, args.seed)
    fs.write_features(spec, records, args.out)
    print(json.dumps({"out": str(args.out), "records": len(records)}))
    return 0


def cmd_split(args) -> int:
    spec, records = fs.read_features(getattr(args, "in"))
    train_ids, dev_ids = fs.stratified_split(records, args.ratio, args.seed)
    by_id = {r.id: r for r in records}
    out = Path(args.out)
    fs.write_features(spec, [by_id[i] for i in train_ids], out / "train")
    fs.write_features(spec, [by_id[i] for i in dev_ids], out / "dev")
    print(json.dumps({"train": len(train_ids), "dev": len(dev_ids), "out": str(out)}))
    return 0


def _load_config(path) -> RunConfig:
    try:
        flat = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path}: invalid JSON ({e})") from None
    return RunConfig.from_flat(flat)


def cmd_train(args) -> int:
    config = _load_config(args.config)
    bundles = xp.load_bundles(args.data, config.multi_task)
    out = run(config, bundles, args.out, resume=args.resume)
    print(json.dumps({"out": str(out)}))
    return 0


def cmd_eval(args) -> int:
    model = xp.load_model(args.checkpoint)
    spec, records = fs.read_features(args.data)
    if spec.name not in model.specs:
        raise RuntimeError(f"checkpoint has no dataset named {spec.name!r}")
    results = evaluate(model, spec.name, records)
    lines = [
        {"dataset": spec.name, "task": task, "metric": metric, "value": value}
        for task, (metric, value) in sorted(results.items())
    ]
    text = "\n".join(json.dumps(l) for l in lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_ablation(args) -> int:
    base = _load_config(args.config)
    data_dirs = list(args.data or [])

    def bundles_for(cfg):
        return xp.load_bundles(data_dirs, cfg.multi_task)

    if not args.plan_only and not data_dirs:
        raise ConfigError("ablation needs --data unless --plan-only is given")
    plan = xp.run_round(args.round, base, bundles_for, args.out, plan_only=args.plan_only)
    print(json.dumps({"round": args.round, "experiments": sorted(plan["experiments"])}))
    return 0


def cmd_viz_attention(args) -> int:
    model = xp.load_model(args.checkpoint)
    spec, records = fs.read_features(args.data)
    if spec.name not in model.specs:
        raise RuntimeError(f"checkpoint has no dataset named {spec.name!r}")
    result = xp.viz_attention(model, spec.name, records)
    Path(args.out).write_text(json.dumps(result, indent=1) + "\n")
    print(json.dumps({"out": str(args.out), "tasks": sorted(result["tasks"])}))
    return 0


def cmd_viz_embeddings(args) -> int:
    model = xp.load_model(args.checkpoint)
    spec, records = fs.read_features(args.data)
    if spec.name not in model.specs:
        raise RuntimeError(f"checkpoint has no dataset named {spec.name!r}")
    lines = xp.viz_embeddings(model, spec.name, records)
    with open(args.out, "w") as f:
        for line in lines:
            f.write(json.dumps(line) + "\n")
    print(json.dumps({"out": str(args.out), "lines": len(lines)}))
    return 0


def cmd_stats(args) -> int:
    report = xp.stats_report(args.runs, args.split, args.task, args.dataset)
    for entry in report:
        if entry["n"] < 2:
            print(
                json.dumps({"warning": "series too short for a CI", "run": entry["run"]}),
                file=sys.stderr,
            )
    text = "\n".join(json.dumps(e) for e in report) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmfusion", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="generate a synthetic feature container")
    g.add_argument("--preset", choices=sorted(PRESETS), required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--records", type=int, default=400)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--signal", type=float, default=3.0)
    g.add_argument("--name", default=None)
    g.add_argument("--patch-len", type=int, default=5)
    g.add_argument("--patch-dim", type=int, default=16)
    g.add_argument("--object-len", type=int, default=12)
    g.add_argument("--object-dim", type=int, default=16)
    g.add_argument("--logit-classes", type=int, default=92)
    g.add_argument("--text-len", type=int, default=16)
    g.add_argument("--text-dim", type=int, default=64)
    g.add_argument("--noobj-frac", type=float, default=0.5)
    g.add_argument("--all-noobj-prob", type=float, default=0.02)
    g.set_defaults(func=cmd_gen_synth)

    s = sub.add_parser("split", help="stratified train/dev split of a container")
    s.add_argument("--in", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ratio", type=float, default=0.8)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="train one run")
    t.add_argument("--config", required=True)
    t.add_argument("--data", action="append", required=True,
                   help="split root (train/, dev/, optional test/); repeatable")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one container")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablation", help="run one ablation round")
    a.add_argument("--round", type=int, choices=(1, 2, 3, 4), required=True)
    a.add_argument("--config", required=True)
    a.add_argument("--data", action="append")
    a.add_argument("--out", required=True)
    a.add_argument("--plan-only", action="store_true")
    a.set_defaults(func=cmd_ablation)

    va = sub.add_parser("viz-attention", help="export aggregated decoder attention")
    va.add_argument("--checkpoint", required=True)
    va.add_argument("--data", required=True)
    va.add_argument("--out", required=True)
    va.set_defaults(func=cmd_viz_attention)

    ve = sub.add_parser("viz-embeddings", help="export decoder outputs + class queries")
    ve.add_argument("--checkpoint", required=True)
    ve.add_argument("--data", required=True)
    ve.add_argument("--out", required=True)
    ve.set_defaults(func=cmd_viz_embeddings)

    st = sub.add_parser("stats", help="per-run score-distribution statistics")
    st.add_argument("--runs", nargs="+", required=True)
    st.add_argument("--split", required=True)
    st.add_argument("--task", required=True)
    st.add_argument("--dataset", default=None)
    st.add_argument("--out", default=None)
    st.set_defaults(func=cmd_stats)
    return p


def _error_line(code: str, err: Exception):
    print(json.dumps({"error": code, "message": str(err)}), file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except ConfigError as e:
        _error_line("config-error", e)
        return 2
    except fs.ContainerError as e:
        _error_line(e.code, e)
        return 1
    except CheckpointError as e:
        _error_line(e.code, e)
        return 1
    except (RuntimeError, ValueError, OSError, KeyError) as e:
        _error_line("runtime-error", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
