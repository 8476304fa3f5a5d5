"""Frozen-backbone feature containers, synthetic data, splits, object masking.

A dataset lives in a container directory holding ``manifest.json`` (dataset
spec + SHA-256 checksum) and ``records.bin`` (little-endian binary payload,
magic ``MMFS``). Object-box validity is decided in-core from the stored
detector logits so the no-object masking algorithm stays testable without
any external model.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

MAGIC = b"MMFS"
VERSION = 1
FALLBACK_KEEP = 4


class TrackKind(str, Enum):
    IMAGE_PATCH = "IMAGE_PATCH"
    OBJECT = "OBJECT"
    TEXT = "TEXT"


class ContainerError(Exception):
    """Container-format failure with a machine-readable ``code``."""

    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code


BAD_MAGIC = "bad-magic"
BAD_VERSION = "bad-version"
TRUNCATED = "truncated"
SPEC_MISMATCH = "spec-mismatch"
CHECKSUM_MISMATCH = "checksum-mismatch"


@dataclass
class TrackSpec:
    name: str
    kind: TrackKind
    dim: int
    max_len: int
    has_logits: bool = False
    logit_classes: int = 0
    no_object_index: int = 0

    def __post_init__(self):
        self.kind = TrackKind(self.kind)
        if self.dim < 1 or self.max_len < 1:
            raise ValueError(f"track {self.name}: dim and max_len must be >= 1")
        if self.has_logits:
            if self.kind != TrackKind.OBJECT:
                raise ValueError(f"track {self.name}: logits only allowed on OBJECT tracks")
            if not 0 <= self.no_object_index < self.logit_classes:
                raise ValueError(f"track {self.name}: no_object_index out of range")


@dataclass
class TaskSpec:
    name: str
    labels: list[str]

    def __post_init__(self):
        if not self.labels:
            raise ValueError(f"task {self.name}: empty label set")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError(f"task {self.name}: duplicate labels")


@dataclass
class DatasetSpec:
    name: str
    label_names: list[str]
    tasks: list[TaskSpec]
    tracks: list[TrackSpec]

    def __post_init__(self):
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ValueError(f"dataset {self.name}: duplicate task names")
        for task in self.tasks:
            missing = set(task.labels) - set(self.label_names)
            if missing:
                raise ValueError(f"task {task.name}: labels {sorted(missing)} not in dataset")

    def track(self, name: str) -> TrackSpec:
        for t in self.tracks:
            if t.name == name:
                return t
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "label_names": list(self.label_names),
            "tasks": [{"name": t.name, "labels": list(t.labels)} for t in self.tasks],
            "tracks": [
                {
                    "name": t.name,
                    "kind": t.kind.value,
                    "dim": t.dim,
                    "max_len": t.max_len,
                    "has_logits": t.has_logits,
                    "logit_classes": t.logit_classes,
                    "no_object_index": t.no_object_index,
                }
                for t in self.tracks
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(
            name=d["name"],
            label_names=list(d["label_names"]),
            tasks=[TaskSpec(t["name"], list(t["labels"])) for t in d.get("tasks", [])],
            tracks=[
                TrackSpec(
                    name=t["name"],
                    kind=TrackKind(t["kind"]),
                    dim=t["dim"],
                    max_len=t["max_len"],
                    has_logits=t["has_logits"],
                    logit_classes=t["logit_classes"],
                    no_object_index=t["no_object_index"],
                )
                for t in d["tracks"]
            ],
        )


@dataclass
class TrackData:
    tokens: np.ndarray  # (seq_len, dim) float32
    mask: np.ndarray  # (seq_len,) uint8
    logits: np.ndarray | None = None  # (seq_len, logit_classes) float32


@dataclass
class FeatureRecord:
    id: int
    labels: np.ndarray  # (label_count,) uint8
    tracks: dict[str, TrackData] = field(default_factory=dict)


def validate_record(spec: DatasetSpec, rec: FeatureRecord):
    """Raise ContainerError(spec-mismatch) if the record violates the spec."""

    def bad(msg):
        raise ContainerError(SPEC_MISMATCH, f"record {rec.id}: {msg}")

    if len(rec.labels) != len(spec.label_names):
        bad(f"labels length {len(rec.labels)} != {len(spec.label_names)}")
    if not np.isin(rec.labels, (0, 1)).all():
        bad("labels must be binary")
    if set(rec.tracks) != {t.name for t in spec.tracks}:
        bad(f"tracks {sorted(rec.tracks)} != spec tracks")
    for ts in spec.tracks:
        td = rec.tracks[ts.name]
        n = td.tokens.shape[0]
        if not 1 <= n <= ts.max_len:
            bad(f"track {ts.name}: seq_len {n} outside [1, {ts.max_len}]")
        if td.tokens.shape != (n, ts.dim):
            bad(f"track {ts.name}: tokens shape {td.tokens.shape}")
        if td.mask.shape != (n,):
            bad(f"track {ts.name}: mask length {td.mask.shape} != seq_len {n}")
        if ts.kind in (TrackKind.TEXT, TrackKind.IMAGE_PATCH) and int(td.mask.sum()) < 1:
            bad(f"track {ts.name}: needs at least one valid token")
        if ts.has_logits:
            if td.logits is None or td.logits.shape != (n, ts.logit_classes):
                bad(f"track {ts.name}: logits missing or misshaped")
        elif td.logits is not None:
            bad(f"track {ts.name}: unexpected logits")


# -- object masking ------------------------------------------------------------


def detr_object_mask(logits: np.ndarray, no_object_index: int) -> np.ndarray:
    """Per-box validity from detector logits.

    A box is dropped when the argmax of its class softmax is the no-object
    label. If that drops every box, the no-object column is ignored, the
    remaining classes are re-softmaxed, and exactly the top-4 boxes by
    maximum probability survive (ties to the lowest box index).
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise ValueError("detr_object_mask: non-finite logits")
    n = logits.shape[0]
    keep = logits.argmax(axis=1) != no_object_index
    if keep.any():
        return keep.astype(np.uint8)
    rest = np.delete(logits, no_object_index, axis=1)
    shifted = rest - rest.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    scores = probs.max(axis=1)
    order = np.argsort(-scores, kind="stable")
    mask = np.zeros(n, dtype=np.uint8)
    mask[order[: min(FALLBACK_KEEP, n)]] = 1
    return mask


# -- container IO ------------------------------------------------------------


def _encode_records(spec: DatasetSpec, records) -> bytes:
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    for rec in records:
        validate_record(spec, rec)
        chunks.append(struct.pack("<Q", rec.id))
        chunks.append(np.asarray(rec.labels, dtype=np.uint8).tobytes())
        for ts in spec.tracks:
            td = rec.tracks[ts.name]
            n = td.tokens.shape[0]
            chunks.append(struct.pack("<H", n))
            chunks.append(np.ascontiguousarray(td.tokens, dtype="<f4").tobytes())
            chunks.append(np.asarray(td.mask, dtype=np.uint8).tobytes())
            if ts.has_logits:
                chunks.append(np.ascontiguousarray(td.logits, dtype="<f4").tobytes())
    return b"".join(chunks)


def write_features(spec: DatasetSpec, records, out_dir) -> Path:
    """Write a container directory; round-trip with read_features is bit-exact."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = _encode_records(spec, records)
    (out / "records.bin").write_bytes(payload)
    manifest = spec.to_dict()
    manifest["record_count"] = len(records)
    manifest["checksum_sha256"] = hashlib.sha256(payload).hexdigest()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ContainerError(TRUNCATED, f"need {n} bytes at offset {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def read_features(path) -> tuple[DatasetSpec, list[FeatureRecord]]:
    """Load a container directory, verifying magic, version, and checksum."""
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    spec = DatasetSpec.from_dict(manifest)
    payload = (root / "records.bin").read_bytes()
    if manifest.get("checksum_sha256") != hashlib.sha256(payload).hexdigest():
        raise ContainerError(CHECKSUM_MISMATCH, "records.bin does not match manifest checksum")
    r = _Reader(payload)
    if r.take(4) != MAGIC:
        raise ContainerError(BAD_MAGIC, "not an MMFS container")
    (version,) = struct.unpack("<H", r.take(2))
    if version != VERSION:
        raise ContainerError(BAD_VERSION, f"version {version}, expected {VERSION}")
    n_labels = len(spec.label_names)
    records = []
    for _ in range(manifest["record_count"]):
        (rec_id,) = struct.unpack("<Q", r.take(8))
        labels = np.frombuffer(r.take(n_labels), dtype=np.uint8).copy()
        tracks = {}
        for ts in spec.tracks:
            (n,) = struct.unpack("<H", r.take(2))
            tokens = np.frombuffer(r.take(4 * n * ts.dim), dtype="<f4").reshape(n, ts.dim).copy()
            mask = np.frombuffer(r.take(n), dtype=np.uint8).copy()
            logits = None
            if ts.has_logits:
                logits = (
                    np.frombuffer(r.take(4 * n * ts.logit_classes), dtype="<f4")
                    .reshape(n, ts.logit_classes)
                    .copy()
                )
            tracks[ts.name] = TrackData(tokens=tokens, mask=mask, logits=logits)
        rec = FeatureRecord(id=rec_id, labels=labels, tracks=tracks)
        validate_record(spec, rec)
        records.append(rec)
    if r.pos != len(payload):
        raise ContainerError(TRUNCATED, f"{len(payload) - r.pos} trailing bytes")
    return spec, records


# -- synthetic data ------------------------------------------------------------


@dataclass
class SynthSpec:
    """Recipe for a learnable synthetic dataset with planted label directions."""

    dataset: DatasetSpec
    n_records: int
    signal: float = 3.0
    label_priors: list[float] | None = None
    noobj_fraction: float = 0.5
    all_noobj_prob: float = 0.02
    token_prob: float = 0.5

    def __post_init__(self):
        if self.signal < 0:
            raise ValueError("signal strength must be >= 0")
        if self.label_priors is not None and len(self.label_priors) != len(self.dataset.label_names):
            raise ValueError("label_priors length mismatch")


def synth_generate(spec: SynthSpec, seed: int) -> list[FeatureRecord]:
    """Generate records where each label plants a signed direction into a
    random subset of each track's tokens; deterministic per seed."""
    rng = np.random.default_rng(seed)
    ds = spec.dataset
    n_labels = len(ds.label_names)
    priors = spec.label_priors or [0.5] * n_labels
    directions = {}
    for ts in ds.tracks:
        d = rng.normal(size=(n_labels, ts.dim))
        directions[ts.name] = d / np.linalg.norm(d, axis=1, keepdims=True)

    records = []
    for rec_id in range(spec.n_records):
        labels = (rng.random(n_labels) < np.asarray(priors)).astype(np.uint8)
        tracks = {}
        for ts in ds.tracks:
            if ts.kind == TrackKind.TEXT:
                n = int(rng.integers(max(1, ts.max_len // 2), ts.max_len + 1))
            else:
                n = ts.max_len
            tokens = rng.normal(size=(n, ts.dim))
            for c in range(n_labels):
                subset = rng.random(n) < spec.token_prob
                coef = (2.0 * labels[c] - 1.0) * spec.signal
                tokens[subset] += coef * directions[ts.name][c]
            mask = np.ones(n, dtype=np.uint8)
            logits = None
            if ts.has_logits:
                logits = rng.normal(size=(n, ts.logit_classes))
                if rng.random() < spec.all_noobj_prob:
                    noobj = np.ones(n, dtype=bool)
                else:
                    noobj = rng.random(n) < spec.noobj_fraction
                    if noobj.all():
                        noobj[int(rng.integers(n))] = False
                top = logits.max(axis=1) + 2.0
                real = rng.integers(0, ts.logit_classes - 1, size=n)
                real = np.where(real >= ts.no_object_index, real + 1, real)
                for i in range(n):
                    if noobj[i]:
                        logits[i, ts.no_object_index] = top[i]
                    else:
                        logits[i, real[i]] = top[i]
                logits = logits.astype(np.float32)
            tracks[ts.name] = TrackData(
                tokens=tokens.astype(np.float32), mask=mask, logits=logits
            )
        records.append(FeatureRecord(id=rec_id, labels=labels, tracks=tracks))
    return records


# -- splitting ------------------------------------------------------------------


def stratified_split(records, ratio: float = 0.8, seed: int = 0) -> tuple[list[int], list[int]]:
    """Split record ids into (train, dev) per label-combination stratum.

    Each stratum's train count is round(ratio * size), so the train fraction
    is within one record of ``ratio``; size-1 strata go to train. The result
    is an exact partition, deterministic per seed.
    """
    if not 0 < ratio < 1:
        raise ValueError("ratio must be in (0, 1)")
    strata: dict[tuple, list[int]] = {}
    for rec in records:
        strata.setdefault(tuple(int(v) for v in rec.labels), []).append(rec.id)
    rng = np.random.default_rng(seed)
    train, dev = [], []
    for key in sorted(strata):
        ids = strata[key]
        perm = rng.permutation(len(ids))
        n_train = int(len(ids) * ratio + 0.5)
        if len(ids) == 1:
            n_train = 1
        for j, p in enumerate(perm):
            (train if j < n_train else dev).append(ids[p])
    return sorted(train), sorted(dev)
