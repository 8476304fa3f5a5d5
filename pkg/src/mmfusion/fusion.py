"""Sequence embedding: per-track projection into the hidden space, type and
positional embeddings, and the shared-encoder / multi-encoder transformer
variants with three pooling modes.

Track order inside every assembled sequence is fixed: image patches, then
object boxes, then text. The shared variant wraps the whole thing as
[CLS] patches [SEP] objects [SEP] text [SEP]; the multi variant has no
global specials but gives the text segment local [CLS]/[SEP] tokens and
runs one encoder stack per track before concatenating the outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as ng
from .featurestore import TrackKind, TrackSpec, detr_object_mask

KIND_ORDER = [TrackKind.IMAGE_PATCH, TrackKind.OBJECT, TrackKind.TEXT]
TYPE_CODES = {TrackKind.IMAGE_PATCH: 0, TrackKind.OBJECT: 1, TrackKind.TEXT: 2}
GLOBAL_TYPE_CODE = 3

VARIANTS = ("shared", "multi")
POOLINGS = ("cls", "none", "txt_cls")


class ConfigError(ValueError):
    """Invalid or incompatible configuration."""


@dataclass
class FusionConfig:
    hidden_dim: int = 768
    encoder_variant: str = "shared"
    pooling: str = "cls"
    dropout: float = 0.1
    shared_layers: int = 12
    shared_heads: int = 12
    image_layers: int = 6
    image_heads: int = 8
    object_layers: int = 6
    object_heads: int = 8
    text_layers: int = 12
    text_heads: int = 12
    backbones: tuple = (TrackKind.IMAGE_PATCH.value, TrackKind.OBJECT.value)

    def __post_init__(self):
        if self.encoder_variant not in VARIANTS:
            raise ConfigError(f"encoder_variant must be one of {VARIANTS}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"pooling must be one of {POOLINGS}")
        if self.pooling == "cls" and self.encoder_variant != "shared":
            raise ConfigError("pooling=cls requires the shared encoder variant")
        if self.pooling == "txt_cls" and self.encoder_variant != "multi":
            raise ConfigError("pooling=txt_cls requires the multi encoder variant")
        self.backbones = tuple(self.backbones)
        allowed = {TrackKind.IMAGE_PATCH.value, TrackKind.OBJECT.value}
        if not set(self.backbones) <= allowed:
            raise ConfigError(f"backbones must be a subset of {sorted(allowed)}")
        for heads in self._head_counts():
            if self.hidden_dim % heads != 0:
                raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by {heads} heads")

    def _head_counts(self):
        if self.encoder_variant == "shared":
            return [self.shared_heads]
        return [self.image_heads, self.object_heads, self.text_heads]

    @property
    def ff_dim(self) -> int:
        return 4 * self.hidden_dim

    def track_depth(self, kind: TrackKind) -> tuple[int, int]:
        """(layers, heads) of the per-track encoder in the multi variant."""
        return {
            TrackKind.IMAGE_PATCH: (self.image_layers, self.image_heads),
            TrackKind.OBJECT: (self.object_layers, self.object_heads),
            TrackKind.TEXT: (self.text_layers, self.text_heads),
        }[kind]

    def enabled(self, kind: TrackKind) -> bool:
        return kind == TrackKind.TEXT or kind.value in self.backbones


class ParamRegistry:
    """Creates and collects named Params; init is N(0, 0.02) / zeros / ones."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: list[ng.Param] = []

    def param(self, name, shape, init="normal", no_decay=False) -> ng.Param:
        if init == "normal":
            data = self.rng.normal(0.0, 0.02, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(init)
        p = ng.Param(data, name, no_decay=no_decay)
        self.params.append(p)
        return p


def project_track(track: TrackSpec, tokens: ng.Tensor, w: ng.Param, b: ng.Param) -> ng.Tensor:
    """Affine map of one track's tokens into the hidden space (not for TEXT)."""
    if track.kind == TrackKind.TEXT:
        raise ConfigError("TEXT tokens are never projected")
    return ng.linear(tokens, w, b)


# -- attention / encoder stack ----------------------------------------------------


def attention(q_in, kv_in, key_mask, p, n_heads, drop, rng, record=False):
    """Multi-head attention; returns (output, head-averaged weights or None).

    ``key_mask`` is (B, Lk) 0/1; masked keys get exactly zero weight.
    """
    bsz, lq, dim = q_in.shape
    lk = kv_in.shape[1]
    dh = dim // n_heads
    q = ng.linear(q_in, p["wq"], p["bq"]).reshape(bsz, lq, n_heads, dh).transpose(0, 2, 1, 3)
    k = ng.linear(kv_in, p["wk"], p["bk"]).reshape(bsz, lk, n_heads, dh).transpose(0, 2, 1, 3)
    v = ng.linear(kv_in, p["wv"], p["bv"]).reshape(bsz, lk, n_heads, dh).transpose(0, 2, 1, 3)
    scores = ng.matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    mask = None
    if key_mask is not None:
        mask = np.asarray(key_mask).reshape(bsz, 1, 1, lk)
    weights = ng.softmax(scores, axis=-1, mask=mask)
    recorded = weights.numpy().mean(axis=1).copy() if record else None
    if rng is not None and drop > 0:
        weights = ng.dropout(weights, drop, rng)
    ctx = ng.matmul(weights, v).transpose(0, 2, 1, 3).reshape(bsz, lq, dim)
    return ng.linear(ctx, p["wo"], p["bo"]), recorded


def attention_params(reg: ParamRegistry, name: str, dim: int) -> dict:
    p = {}
    for tag in ("q", "k", "v", "o"):
        p[f"w{tag}"] = reg.param(f"{name}.w{tag}", (dim, dim))
        p[f"b{tag}"] = reg.param(f"{name}.b{tag}", (dim,), init="zeros", no_decay=True)
    return p


class EncoderLayer:
    """Post-norm transformer encoder layer (self-attention + position-wise FF)."""

    def __init__(self, reg: ParamRegistry, name: str, dim: int, ff_dim: int, n_heads: int):
        self.n_heads = n_heads
        self.attn = attention_params(reg, f"{name}.attn", dim)
        self.w1 = reg.param(f"{name}.ff.w1", (dim, ff_dim))
        self.b1 = reg.param(f"{name}.ff.b1", (ff_dim,), init="zeros", no_decay=True)
        self.w2 = reg.param(f"{name}.ff.w2", (ff_dim, dim))
        self.b2 = reg.param(f"{name}.ff.b2", (dim,), init="zeros", no_decay=True)
        self.ln1_g = reg.param(f"{name}.ln1.gamma", (dim,), init="ones", no_decay=True)
        self.ln1_b = reg.param(f"{name}.ln1.beta", (dim,), init="zeros", no_decay=True)
        self.ln2_g = reg.param(f"{name}.ln2.gamma", (dim,), init="ones", no_decay=True)
        self.ln2_b = reg.param(f"{name}.ln2.beta", (dim,), init="zeros", no_decay=True)

    def __call__(self, x, key_mask, drop, rng):
        a, _ = attention(x, x, key_mask, self.attn, self.n_heads, drop, rng)
        x = ng.layer_norm(x + a, self.ln1_g, self.ln1_b)
        # gelu keeps the feed-forward smooth, so finite-difference gradient
        # verification over the full graph stays meaningful
        h = ng.gelu(ng.linear(x, self.w1, self.b1))
        if rng is not None and drop > 0:
            h = ng.dropout(h, drop, rng)
        f = ng.linear(h, self.w2, self.b2)
        return ng.layer_norm(x + f, self.ln2_g, self.ln2_b)


class EncoderStack:
    def __init__(self, reg, name, dim, ff_dim, n_layers, n_heads):
        self.name = name
        self.layers = [
            EncoderLayer(reg, f"{name}.{i}", dim, ff_dim, n_heads) for i in range(n_layers)
        ]

    def __call__(self, x, key_mask, drop=0.0, rng=None):
        for i, layer in enumerate(self.layers):
            try:
                x = layer(x, key_mask, drop, rng)
            except ng.NumericsError as e:
                raise ng.NumericsError(f"{e} (encoder '{self.name}' layer {i})") from None
        return x


# -- assembled sequences -------------------------------------------------------------


@dataclass
class AssembledSequence:
    """A batch of fused sequences with identical layout (padded per track)."""

    tokens: ng.Tensor  # (B, L, hidden)
    mask: np.ndarray  # (B, L) uint8
    type_ids: np.ndarray  # (L,) int
    segments: dict  # track name -> (start, length), content positions only
    owner_spans: dict  # track name -> (start, length), incl. that track's specials
    cls_position: int | None
    raw_means: dict = field(default_factory=dict)  # track -> (B, track dim) ndarray
    proj_means: dict = field(default_factory=dict)  # track -> (B, hidden) Tensor

    @property
    def length(self) -> int:
        return self.tokens.shape[1]


class FusionModel:
    """Embedding tables, projections, and encoder stacks for one track layout."""

    def __init__(self, config: FusionConfig, tracks: list[TrackSpec], reg: ParamRegistry):
        self.config = config
        d = config.hidden_dim
        self.tracks = sorted(
            [t for t in tracks if config.enabled(t.kind)],
            key=lambda t: (KIND_ORDER.index(t.kind), tracks.index(t)),
        )
        if not any(t.kind == TrackKind.TEXT for t in self.tracks):
            raise ConfigError("a TEXT track is required")
        for t in self.tracks:
            if t.kind == TrackKind.TEXT and t.dim != d:
                raise ConfigError(
                    f"TEXT dim {t.dim} must equal hidden_dim {d} (text is not projected)"
                )

        self.cls_tok = reg.param("embed.cls", (d,))
        self.sep_tok = reg.param("embed.sep", (d,))
        self.type_emb = {}
        for t in self.tracks:
            if t.kind not in self.type_emb:
                self.type_emb[t.kind] = reg.param(f"embed.type.{t.kind.value}", (d,))
        if config.encoder_variant == "shared":
            self.type_emb["GLOBAL"] = reg.param("embed.type.GLOBAL", (d,))

        self.pos_emb = {}
        for t in self.tracks:
            if config.encoder_variant == "shared":
                rows = t.max_len + 1  # content + SEP slot
            elif t.kind == TrackKind.TEXT:
                rows = t.max_len + 2  # content + SEP + local CLS slots
            else:
                rows = t.max_len
            self.pos_emb[t.name] = reg.param(f"embed.pos.{t.name}", (rows, d))

        self.proj = {}
        for t in self.tracks:
            if t.kind != TrackKind.TEXT:
                self.proj[t.name] = (
                    reg.param(f"proj.{t.name}.w", (t.dim, d)),
                    reg.param(f"proj.{t.name}.b", (d,), init="zeros", no_decay=True),
                )

        self.embed_ln_g = reg.param("embed.ln.gamma", (d,), init="ones", no_decay=True)
        self.embed_ln_b = reg.param("embed.ln.beta", (d,), init="zeros", no_decay=True)

        ff = config.ff_dim
        if config.encoder_variant == "shared":
            self.shared_stack = EncoderStack(
                reg, "enc.shared", d, ff, config.shared_layers, config.shared_heads
            )
            self.track_stacks = None
        else:
            self.shared_stack = None
            self.track_stacks = {}
            for t in self.tracks:
                layers, heads = config.track_depth(t.kind)
                self.track_stacks[t.name] = EncoderStack(
                    reg, f"enc.{t.name}", d, ff, layers, heads
                )

    # -- assembly -------------------------------------------------------------

    def max_length(self) -> int:
        total = sum(t.max_len for t in self.tracks)
        if self.config.encoder_variant == "shared":
            return 1 + total + len(self.tracks)  # global CLS + one SEP per track
        return total + 2  # local text CLS/SEP only

    def _track_batch(self, records, track: TrackSpec):
        """Pad one track's content to the batch max; returns raw, mask, n_max."""
        seqs = [r.tracks[track.name] for r in records]
        n_max = max(td.tokens.shape[0] for td in seqs)
        bsz = len(records)
        raw = np.zeros((bsz, n_max, track.dim), dtype=ng.default_dtype())
        mask = np.zeros((bsz, n_max), dtype=np.uint8)
        for i, td in enumerate(seqs):
            n = td.tokens.shape[0]
            raw[i, :n] = td.tokens
            valid = td.mask.astype(bool)
            if track.has_logits:
                keep = detr_object_mask(td.logits, track.no_object_index).astype(bool)
                combined = valid & keep
                # stored mask can in principle zero out every surviving box;
                # fall back to the detector decision alone to keep >=1 token
                valid = combined if combined.any() else keep
            mask[i, :n] = valid
        return raw, mask, n_max

    def _special(self, tok: ng.Param, type_vec, pos_row, bsz):
        d = self.config.hidden_dim
        vec = tok + type_vec
        if pos_row is not None:
            vec = vec + pos_row
        return vec.reshape(1, 1, d).broadcast_to((bsz, 1, d))

    def assemble(self, records) -> AssembledSequence:
        """Fuse one batch of records into a single hidden-space sequence."""
        cfg = self.config
        bsz = len(records)
        shared = cfg.encoder_variant == "shared"

        blocks, masks, type_ids = [], [], []
        segments, owner_spans = {}, {}
        raw_means, proj_means = {}, {}
        cls_position = None
        cursor = 0

        if shared:
            self._append_special(blocks, masks, type_ids, self.cls_tok, "GLOBAL", None, bsz)
            cls_position = 0
            cursor = 1

        for track in self.tracks:
            raw, mask, n_max = self._track_batch(records, track)
            tvec = self.type_emb[track.kind]
            ptab = self.pos_emb[track.name]
            owner_start = cursor

            is_text = track.kind == TrackKind.TEXT
            if not shared and is_text:
                self._append_special(
                    blocks, masks, type_ids, self.cls_tok, track.kind, ptab[track.max_len + 1], bsz
                )
                cls_position = cursor
                cursor += 1

            counts = np.maximum(mask.sum(axis=1, keepdims=True), 1).astype(np.float64)
            raw_mean = (raw * mask[:, :, None]).sum(axis=1) / counts
            if is_text:
                content = ng.Tensor(raw)
            else:
                w, b = self.proj[track.name]
                flat = project_track(track, ng.Tensor(raw.reshape(bsz * n_max, track.dim)), w, b)
                content = flat.reshape(bsz, n_max, cfg.hidden_dim)
                m3 = ng.Tensor(mask[:, :, None].astype(ng.default_dtype()))
                proj_means[track.name] = (content * m3).sum(axis=1) / ng.Tensor(counts)
                raw_means[track.name] = raw_mean
            content = content + tvec + ptab[:n_max]
            blocks.append(content)
            masks.append(mask)
            type_ids.extend([TYPE_CODES[track.kind]] * n_max)
            segments[track.name] = (cursor, n_max)
            cursor += n_max

            if shared or is_text:
                self._append_special(
                    blocks, masks, type_ids, self.sep_tok, track.kind, ptab[track.max_len], bsz
                )
                cursor += 1
            owner_spans[track.name] = (owner_start, cursor - owner_start)

        if cursor > self.max_length():
            raise ng.ShapeError(
                f"assembled length {cursor} exceeds variant max {self.max_length()}"
            )

        tokens = ng.concat(blocks, axis=1)
        tokens = ng.layer_norm(tokens, self.embed_ln_g, self.embed_ln_b)
        return AssembledSequence(
            tokens=tokens,
            mask=np.concatenate(masks, axis=1),
            type_ids=np.array(type_ids, dtype=np.int64),
            segments=segments,
            owner_spans=owner_spans,
            cls_position=cls_position,
            raw_means=raw_means,
            proj_means=proj_means,
        )

    def _append_special(self, blocks, masks, type_ids, tok, kind, pos_row, bsz):
        blocks.append(self._special(tok, self.type_emb[kind], pos_row, bsz))
        masks.append(np.ones((bsz, 1), dtype=np.uint8))
        type_ids.append(GLOBAL_TYPE_CODE if kind == "GLOBAL" else TYPE_CODES[kind])

    # -- encoding / pooling -------------------------------------------------------

    def encode(self, seq: AssembledSequence, rng=None, train=False) -> ng.Tensor:
        drop = self.config.dropout if train else 0.0
        if self.shared_stack is not None:
            return self.shared_stack(seq.tokens, seq.mask, drop, rng)
        outs = []
        for track in self.tracks:
            start, length = seq.owner_spans[track.name]
            sub = seq.tokens[:, start : start + length, :]
            sub_mask = seq.mask[:, start : start + length]
            outs.append(self.track_stacks[track.name](sub, sub_mask, drop, rng))
        return ng.concat(outs, axis=1)

    def pool(self, encoded: ng.Tensor, seq: AssembledSequence):
        """CLS -> (B, hidden); NONE / TXT_CLS -> ((B, L', hidden), mask)."""
        mode = self.config.pooling
        if mode == "cls":
            if self.config.encoder_variant != "shared":
                raise ConfigError("CLS pooling requires the shared variant")
            return encoded[:, seq.cls_position, :]
        if mode == "none":
            return encoded, seq.mask
        if self.config.encoder_variant != "multi":
            raise ConfigError("txt_cls pooling requires the multi variant")
        parts, part_masks = [], []
        for track in self.tracks:
            if track.kind == TrackKind.TEXT:
                parts.append(encoded[:, seq.cls_position : seq.cls_position + 1, :])
                part_masks.append(np.ones((encoded.shape[0], 1), dtype=np.uint8))
            else:
                start, length = seq.segments[track.name]
                parts.append(encoded[:, start : start + length, :])
                part_masks.append(seq.mask[:, start : start + length])
        return ng.concat(parts, axis=1), np.concatenate(part_masks, axis=1)

    def forward(self, records, rng=None, train=False):
        seq = self.assemble(records)
        encoded = self.encode(seq, rng=rng, train=train)
        return self.pool(encoded, seq), seq
