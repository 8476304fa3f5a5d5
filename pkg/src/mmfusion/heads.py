"""Classification heads: pooled multi-head MLP, and transformer decoder over
learnable class queries feeding a shared single-output MLP.

Class queries live in one table shared by every task and dataset; each task
gets its own MLP. Query order inside a task follows the global label
declaration order so attention heatmap axes are reproducible.
"""

from __future__ import annotations

import numpy as np

from . import ndgrad as ng
from .fusion import ConfigError, ParamRegistry, attention, attention_params

PROB_CLAMP = 1e-7

MULTI_HEAD = "multi_head"
SHARED_SINGLE = "shared_single"


class ClassQueryTable:
    """One trainable hidden-dim vector per global label, in declaration order."""

    def __init__(self, reg: ParamRegistry, labels: list[str], hidden_dim: int):
        self.labels = list(labels)
        self.index = {name: i for i, name in enumerate(self.labels)}
        self.table = reg.param("queries.table", (len(self.labels), hidden_dim))

    def ordered(self, task_labels) -> list[str]:
        """Task labels sorted into global declaration order."""
        for name in task_labels:
            if name not in self.index:
                raise ConfigError(f"unknown label {name!r}")
        return sorted(task_labels, key=self.index.__getitem__)

    def queries(self, task_labels) -> tuple[ng.Tensor, list[str]]:
        ordered = self.ordered(task_labels)
        idx = np.array([self.index[name] for name in ordered])
        return self.table[idx], ordered


class TaskHead:
    """Two affine layers with GELU between; one head per task, never shared."""

    def __init__(self, reg: ParamRegistry, name: str, mode: str, in_dim: int,
                 mlp_hidden: int, n_labels: int):
        if mode not in (MULTI_HEAD, SHARED_SINGLE):
            raise ConfigError(f"unknown head mode {mode!r}")
        self.name = name
        self.mode = mode
        out_dim = n_labels if mode == MULTI_HEAD else 1
        self.w1 = reg.param(f"head.{name}.w1", (in_dim, mlp_hidden))
        self.b1 = reg.param(f"head.{name}.b1", (mlp_hidden,), init="zeros", no_decay=True)
        self.w2 = reg.param(f"head.{name}.w2", (mlp_hidden, out_dim))
        self.b2 = reg.param(f"head.{name}.b2", (out_dim,), init="zeros", no_decay=True)


def classify_pooled(pooled: ng.Tensor, head: TaskHead):
    """Logits for every task label from one pooled vector per instance.

    Returns (logits (B, C), mlp layer inputs [h0, h1]); h0/h1 are shared by
    all classes in this mode.
    """
    if head.mode != MULTI_HEAD:
        raise ConfigError(f"head {head.name} is not a multi-head MLP")
    h0 = pooled
    h1 = ng.gelu(ng.linear(h0, head.w1, head.b1))
    logits = ng.linear(h1, head.w2, head.b2)
    return logits, [h0, h1]


def classify_shared(class_outputs: ng.Tensor, head: TaskHead):
    """The same single-output MLP applied independently to each class row.

    ``class_outputs`` is (B, C, hidden); returns (logits (B, C), [h0, h1])
    with h0 = (B, C, hidden) and h1 = (B, C, mlp_hidden) exposed for the
    contrastive embedding loss.
    """
    if head.mode != SHARED_SINGLE:
        raise ConfigError(f"head {head.name} is not a shared single-head MLP")
    bsz, n_classes, _ = class_outputs.shape
    h0 = class_outputs
    h1 = ng.gelu(ng.linear(h0, head.w1, head.b1))
    logits = ng.linear(h1, head.w2, head.b2).reshape(bsz, n_classes)
    return logits, [h0, h1]


def probabilities(logits: ng.Tensor) -> ng.Tensor:
    """Per-label sigmoid probability, clamped away from {0, 1} for the log terms."""
    return ng.sigmoid(logits).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)


class DecoderLayer:
    """Standard decoder layer: target self-attention (no causal mask),
    target->source cross-attention, position-wise feed-forward; post-norm."""

    def __init__(self, reg: ParamRegistry, name: str, dim: int, ff_dim: int, n_heads: int):
        self.n_heads = n_heads
        self.self_attn = attention_params(reg, f"{name}.self", dim)
        self.cross_attn = attention_params(reg, f"{name}.cross", dim)
        self.w1 = reg.param(f"{name}.ff.w1", (dim, ff_dim))
        self.b1 = reg.param(f"{name}.ff.b1", (ff_dim,), init="zeros", no_decay=True)
        self.w2 = reg.param(f"{name}.ff.w2", (ff_dim, dim))
        self.b2 = reg.param(f"{name}.ff.b2", (dim,), init="zeros", no_decay=True)
        self.ln = []
        for i in range(3):
            self.ln.append(
                (
                    reg.param(f"{name}.ln{i}.gamma", (dim,), init="ones", no_decay=True),
                    reg.param(f"{name}.ln{i}.beta", (dim,), init="zeros", no_decay=True),
                )
            )

    def __call__(self, tgt, src, src_mask, drop, rng, record=False):
        a, self_w = attention(tgt, tgt, None, self.self_attn, self.n_heads, drop, rng, record)
        tgt = ng.layer_norm(tgt + a, *self.ln[0])
        c, cross_w = attention(tgt, src, src_mask, self.cross_attn, self.n_heads, drop, rng, record)
        tgt = ng.layer_norm(tgt + c, *self.ln[1])
        h = ng.gelu(ng.linear(tgt, self.w1, self.b1))
        if rng is not None and drop > 0:
            h = ng.dropout(h, drop, rng)
        f = ng.linear(h, self.w2, self.b2)
        return ng.layer_norm(tgt + f, *self.ln[2]), self_w, cross_w


class DecoderStack:
    """Shared across all tasks and datasets."""

    def __init__(self, reg: ParamRegistry, dim: int, ff_dim: int,
                 n_layers: int = 6, n_heads: int = 8):
        self.layers = [
            DecoderLayer(reg, f"dec.{i}", dim, ff_dim, n_heads) for i in range(n_layers)
        ]

    def __call__(self, tgt, src, src_mask, drop=0.0, rng=None, record=False):
        records = []
        for i, layer in enumerate(self.layers):
            try:
                tgt, self_w, cross_w = layer(tgt, src, src_mask, drop, rng, record)
            except ng.NumericsError as e:
                raise ng.NumericsError(f"{e} (decoder layer {i})") from None
            if record:
                records.append({"self": self_w, "cross": cross_w})
        return tgt, records


def decode_classes(source: ng.Tensor, source_mask, task_labels, queries: ClassQueryTable,
                   decoder: DecoderStack, drop=0.0, rng=None, record=False):
    """Decode one per-class output row per task label.

    The target sequence is the task's class queries in global declaration
    order. Returns (outputs (B, C, hidden), ordered labels, attention records
    per layer with head-averaged 'self' (B, C, C) and 'cross' (B, C, L)).
    """
    if len(task_labels) < 1:
        raise ConfigError("a task needs at least one label")
    if not np.asarray(source_mask).any(axis=-1).all():
        raise ValueError("decoder source has a fully-masked instance")
    q, ordered = queries.queries(task_labels)
    bsz = source.shape[0]
    n_classes, dim = q.shape
    target = q.reshape(1, n_classes, dim).broadcast_to((bsz, n_classes, dim))
    outputs, records = decoder(target, source, source_mask, drop, rng, record)
    return outputs, ordered, records
