"""Two-tower transformer encoder for keep/drop token classification.

The left tower is a standard multi-head self-attention encoder over the
wrapped token sequence (CLS + tokens + SEP, PAD-masked). The right tower
runs graph-masked attention: exponentiated affinities are multiplied by
per-edge weights and renormalized, so a 0/1 adjacency (static mode)
reduces to hard masking while a learned probability matrix (dynamic mode,
from tag-to-tag attention) acts as soft edge weights through the same
code path. A gate fuses the towers per token, and a linear + softmax head
emits keep/drop/special probabilities.

Shapes: batches are (B, L, ...) with L the wrapped length; attention
matrices are (B, heads, L, L); all floats are float64.
"""

import json
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .errors import DataError
from .numerics import Tensor, ops
from .numerics import tensor as tz
from .querydata import (
    CLS_TOKEN,
    NONE_TAG,
    PAD_TAG,
    PAD_TOKEN,
    SEP_TOKEN,
    SPECIAL_LABEL,
    Vocab,
    encode_labels,
)
from .taggraph import TagGraph, query_adjacency

CHECKPOINT_FORMAT_VERSION = 1

FUSION_MODES = ("gated", "mean", "min", "max")
GRAPH_MODES = ("static", "dynamic", "none")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``fusion`` picks how the towers combine (an elementwise learned gate,
    or mean/min/max); ``graph_mode`` picks the right tower's edge source:
    a mined static adjacency, the dynamic tag-attention probabilities, or
    "none" for the left tower alone. ``gate_scalar`` shrinks the gate to
    one value per token; ``per_dim_affine`` switches the add-norm scale
    and shift from learned scalars to per-dimension vectors.
    """

    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    k: int = 3
    max_len: int = 16
    fusion: str = "gated"
    graph_mode: str = "static"
    eps: float = 1e-5
    dropout: float = 0.0
    right_layers: int = 1
    right_heads: int = 1
    gate_scalar: bool = False
    per_dim_affine: bool = False
    tag_dim: int = 0  # 0 means "use d_model"

    def __post_init__(self):
        if self.tag_dim == 0:
            object.__setattr__(self, "tag_dim", self.d_model)
        if self.k != 3:
            raise ValueError("k is fixed at 3 (special/keep/drop)")
        for name in ("d_model", "n_heads", "n_layers", "d_ff", "right_layers",
                     "right_heads", "tag_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model % self.right_heads:
            raise ValueError("d_model must be divisible by right_heads")
        if self.max_len < 3:
            raise ValueError("max_len must fit CLS + one token + SEP")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}")
        if self.graph_mode not in GRAPH_MODES:
            raise ValueError(f"graph_mode must be one of {GRAPH_MODES}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def _affine_shape(cfg):
    return (cfg.d_model,) if cfg.per_dim_affine else ()


def _right_suffix(layer):
    return "" if layer == 0 else f"_l{layer}"


def param_shapes(cfg, n_tokens, n_tags):
    """Name -> shape for every trainable tensor (checkpoint layout)."""
    d, aff = cfg.d_model, _affine_shape(cfg)
    shapes = {
        "token_emb": (n_tokens, d),
        "type_emb": (2, d),
        "pos_emb": (cfg.max_len, d),
    }
    for i in range(cfg.n_layers):
        p = f"left{i}."
        shapes.update({
            p + "wq": (d, d), p + "bq": (d,),
            p + "wk": (d, d), p + "bk": (d,),
            p + "wv": (d, d), p + "bv": (d,),
            p + "wo": (d, d), p + "bo": (d,),
            p + "ffn_w_in": (d, cfg.d_ff), p + "ffn_b_in": (cfg.d_ff,),
            p + "ffn_w_out": (cfg.d_ff, d), p + "ffn_b_out": (d,),
            p + "gamma_attn": aff, p + "beta_attn": aff,
            p + "gamma_ffn": aff, p + "beta_ffn": aff,
        })
    for layer in range(cfg.right_layers):
        s = _right_suffix(layer)
        shapes.update({
            f"W1{s}": (d, d), f"W2{s}": (d, d), f"W3{s}": (d, d),
            f"W4{s}": (d, d), f"W5{s}": (d, d), f"b{s}": (d,),
            f"gamma1{s}": aff, f"beta1{s}": aff,
            f"gamma2{s}": aff, f"beta2{s}": aff,
        })
    if cfg.gate_scalar:
        shapes["W6"] = (d, 1)
        shapes["c"] = (1,)
    else:
        shapes["W6"] = (d, d)
        shapes["c"] = (d,)
    td = cfg.tag_dim
    shapes.update({
        "tag_emb": (n_tags, td),
        "tag_pos_emb": (cfg.max_len, td),
        "W7": (td, td), "W8": (td, td), "W9": (td, td),
        "head_W": (d, cfg.k), "head_b": (cfg.k,),
    })
    return shapes


class ModelParams:
    """Named trainable tensors; values update in place across steps."""

    def __init__(self, tensors):
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def snapshot(self):
        """Copies of all current values (for best-epoch bookkeeping)."""
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def restore(self, snapshot):
        for name, t in self.tensors.items():
            t.data = snapshot[name].copy()

    def all_finite(self):
        return all(np.all(np.isfinite(t.data)) for t in self.tensors.values())


def init_params(cfg, n_tokens, n_tags, seed=0):
    """Fresh parameters: N(0, 0.02) weights, zero biases, unit norm scales."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg, n_tokens, n_tags).items():
        base = name.rsplit(".", 1)[-1]
        if base.startswith("gamma"):
            data = np.ones(shape)
        elif len(shape) <= 1:
            data = np.zeros(shape)  # betas and every bias start at zero
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(tensors)


@dataclass
class Batch:
    """Padded, wrapped, id-encoded records ready for the towers.

    ``attn_weights`` is the left tower's validity mask (valid x valid with
    a guaranteed diagonal); ``adjacency`` is the static-mode edge mask or
    None; ``lengths`` keeps each record's raw word count for per-length
    metrics.
    """

    token_ids: np.ndarray
    type_ids: np.ndarray
    tag_ids: np.ndarray
    positions: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    attn_weights: np.ndarray
    adjacency: np.ndarray
    lengths: np.ndarray


def wrap_labels(record):
    """Labels for the wrapped sequence: class 1 at CLS and SEP."""
    return [SPECIAL_LABEL, *record.labels, SPECIAL_LABEL]


def prepare_batch(records, vocab, cfg, graph=None):
    """Wrap, encode, and pad records; build attention masks.

    Static mode requires ``graph`` and compiles each record's token
    adjacency (specials connect to themselves and their sequence
    neighbors; PAD rows keep only the self-edge so every attention row
    stays well-defined).
    """
    if not records:
        raise ValueError("prepare_batch needs at least one record")
    if cfg.graph_mode == "static" and graph is None:
        raise ValueError("static graph mode requires a tag graph")
    longest = max(r.n_tokens for r in records)
    length = longest + 2
    if length > cfg.max_len:
        raise DataError(
            f"wrapped sequence length {length} exceeds max_len {cfg.max_len}"
        )
    b = len(records)
    pad_id = vocab.token_id(PAD_TOKEN)
    token_ids = np.full((b, length), pad_id, dtype=np.int64)
    type_ids = np.zeros((b, length), dtype=np.int64)
    tag_ids = np.full((b, length), vocab.tag_id(PAD_TAG), dtype=np.int64)
    labels = np.full((b, length), SPECIAL_LABEL, dtype=np.int64)
    mask = np.zeros((b, length), dtype=np.float64)
    attn = np.zeros((b, length, length), dtype=np.float64)
    adjacency = np.zeros((b, length, length), dtype=np.float64)
    lengths = np.zeros(b, dtype=np.int64)

    for r_i, rec in enumerate(records):
        m = rec.n_tokens
        lengths[r_i] = m
        token_ids[r_i, 0] = vocab.token_id(CLS_TOKEN)
        token_ids[r_i, m + 1] = vocab.token_id(SEP_TOKEN)
        for t_i, tok in enumerate(rec.source, start=1):
            token_ids[r_i, t_i] = vocab.token_id(tok)
            type_ids[r_i, t_i] = 1
            tag_ids[r_i, t_i] = vocab.tag_id(rec.tags[t_i - 1])
            labels[r_i, t_i] = rec.labels[t_i - 1]
        tag_ids[r_i, 0] = vocab.tag_id(NONE_TAG)
        tag_ids[r_i, m + 1] = vocab.tag_id(NONE_TAG)
        mask[r_i, : m + 2] = 1.0

        valid = mask[r_i]
        attn[r_i] = np.outer(valid, valid)
        np.fill_diagonal(attn[r_i], 1.0)  # PAD rows attend to themselves

        if cfg.graph_mode == "static":
            np.fill_diagonal(adjacency[r_i], 1.0)
            adjacency[r_i, 1 : m + 1, 1 : m + 1] = query_adjacency(
                rec.tags, graph
            )
            adjacency[r_i, 0, 1] = adjacency[r_i, 1, 0] = 1.0
            adjacency[r_i, m, m + 1] = adjacency[r_i, m + 1, m] = 1.0

    return Batch(
        token_ids=token_ids,
        type_ids=type_ids,
        tag_ids=tag_ids,
        positions=np.arange(length, dtype=np.int64),
        labels=labels,
        mask=mask,
        attn_weights=attn,
        adjacency=adjacency if cfg.graph_mode == "static" else None,
        lengths=lengths,
    )


def embed_inputs(token_ids, type_ids, positions, params):
    """v_i = token embedding + type embedding + positional embedding."""
    tok = tz.embedding(params["token_emb"], token_ids)
    typ = tz.embedding(params["type_emb"], type_ids)
    pos = tz.embedding(params["pos_emb"], positions)
    return tz.add(tz.add(tok, typ), pos)


def _split_heads(x, n_heads):
    b, length, d = x.data.shape
    x4 = tz.reshape(x, (b, length, n_heads, d // n_heads))
    return tz.transpose(x4, (0, 2, 1, 3))


def _merge_heads(x):
    b, h, length, dh = x.data.shape
    return tz.reshape(tz.transpose(x, (0, 2, 1, 3)), (b, length, h * dh))


def _spread_weights(weights, n_heads):
    b, length, _ = weights.data.shape
    w4 = tz.reshape(weights, (b, 1, length, length))
    return tz.broadcast_to(w4, (b, n_heads, length, length))


def graph_masked_attention(v, weights, params, cfg, layer=0):
    """Edge-weighted attention: o_i = (sum_k alpha_ik (v_k W3)) W4.

    Affinities a_ik = (v_i W1)(v_k W2)^T are deliberately unscaled;
    exp(a) is multiplied by ``weights`` (0/1 adjacency or soft edge
    probabilities) and renormalized per row. Returns (o, a, alpha) with
    a and alpha shaped (B, right_heads, L, L).
    """
    s = _right_suffix(layer)
    q = _split_heads(tz.matmul(v, params[f"W1{s}"]), cfg.right_heads)
    k = _split_heads(tz.matmul(v, params[f"W2{s}"]), cfg.right_heads)
    a = tz.matmul(q, tz.transpose(k, (0, 1, 3, 2)))
    alpha = tz.weighted_softmax(a, _spread_weights(weights, cfg.right_heads))
    vals = _split_heads(tz.matmul(v, params[f"W3{s}"]), cfg.right_heads)
    o = tz.matmul(_merge_heads(tz.matmul(alpha, vals)), params[f"W4{s}"])
    return o, a, alpha


def right_tower_forward(v, weights, params, cfg):
    """Graph-masked attention stack: returns (e^t, last-layer internals).

    Per layer: o from masked attention; o-bar = x + gamma*norm(o) + beta;
    FFN = GELU(o-bar W5 + b); output = o-bar + gamma2*norm(FFN) + beta2.
    """
    x = v
    internals = {}
    for layer in range(cfg.right_layers):
        s = _right_suffix(layer)
        o, a, alpha = graph_masked_attention(x, weights, params, cfg, layer)
        obar = tz.add_norm(o, x, params[f"gamma1{s}"], params[f"beta1{s}"],
                           cfg.eps)
        ffn = tz.gelu(tz.add(tz.matmul(obar, params[f"W5{s}"]),
                             params[f"b{s}"]))
        x = tz.add_norm(ffn, obar, params[f"gamma2{s}"], params[f"beta2{s}"],
                        cfg.eps)
        internals = {"a": a, "alpha": alpha, "o": o, "obar": obar, "ffn": ffn}
    return x, internals


def dynamic_tag_graph(tag_ids, positions, params, valid_weights=None):
    """Tag-to-tag attention probabilities, (B, L, L), rows summing to 1.

    Tag representations are tag-id plus tag-positional embeddings; one
    attention head scores a^t_ik = (g_i W8)(g_k W7)^T and each row is a
    softmax over the valid positions. Returns (alpha_t, a_t).
    """
    g = tz.add(
        tz.embedding(params["tag_emb"], tag_ids),
        tz.embedding(params["tag_pos_emb"], positions),
    )
    q = tz.matmul(g, params["W8"])
    k = tz.matmul(g, params["W7"])
    a_t = tz.matmul(q, tz.transpose(k, (0, 2, 1)))
    if valid_weights is None:
        valid_weights = Tensor(np.ones(a_t.data.shape))
    alpha_t = tz.weighted_softmax(a_t, valid_weights)
    return alpha_t, a_t


def left_tower_forward(v, attn_weights, params, cfg):
    """Standard scaled multi-head encoder stack over valid positions.

    Returns ``(x, alphas)``: the encoded sequence plus each layer's
    attention probabilities (batch, head, query, key), kept around so
    normalization can be verified from the outside.
    """
    scale = Tensor(1.0 / np.sqrt(cfg.d_model // cfg.n_heads), check=False)
    x = v
    alphas = []
    for i in range(cfg.n_layers):
        p = f"left{i}."
        q = _split_heads(tz.add(tz.matmul(x, params[p + "wq"]),
                                params[p + "bq"]), cfg.n_heads)
        k = _split_heads(tz.add(tz.matmul(x, params[p + "wk"]),
                                params[p + "bk"]), cfg.n_heads)
        scores = tz.mul(tz.matmul(q, tz.transpose(k, (0, 1, 3, 2))), scale)
        alpha = tz.weighted_softmax(
            scores, _spread_weights(attn_weights, cfg.n_heads)
        )
        alphas.append(alpha)
        vals = _split_heads(tz.add(tz.matmul(x, params[p + "wv"]),
                                   params[p + "bv"]), cfg.n_heads)
        ctx = tz.add(tz.matmul(_merge_heads(tz.matmul(alpha, vals)),
                               params[p + "wo"]), params[p + "bo"])
        x = tz.add_norm(ctx, x, params[p + "gamma_attn"],
                        params[p + "beta_attn"], cfg.eps)
        hidden = tz.gelu(tz.add(tz.matmul(x, params[p + "ffn_w_in"]),
                                params[p + "ffn_b_in"]))
        ffn = tz.add(tz.matmul(hidden, params[p + "ffn_w_out"]),
                     params[p + "ffn_b_out"])
        x = tz.add_norm(ffn, x, params[p + "gamma_ffn"],
                        params[p + "beta_ffn"], cfg.eps)
    return x, alphas


def fuse(e_b, e_t, params, cfg, gate_override=None):
    """Combine tower outputs; returns (e, e_s) with e_s None unless gated.

    Gated mode: e_s = sigmoid(e_b W6 + c), e = e_s*e_b + (1-e_s)*e_t.
    ``gate_override`` (a float) replaces e_s with a constant, for
    degeneracy checks.
    """
    if e_b.data.shape != e_t.data.shape:
        raise ValueError(
            f"tower outputs differ in shape: {e_b.data.shape} vs "
            f"{e_t.data.shape}"
        )
    if cfg.fusion == "mean":
        return tz.mul(tz.add(e_b, e_t), Tensor(0.5, check=False)), None
    if cfg.fusion == "min":
        return tz.minimum(e_b, e_t), None
    if cfg.fusion == "max":
        return tz.maximum(e_b, e_t), None
    if gate_override is not None:
        gate_shape = e_b.data.shape[:-1] + (
            1 if cfg.gate_scalar else e_b.data.shape[-1],
        )
        e_s = Tensor(np.full(gate_shape, float(gate_override)), check=False)
    else:
        e_s = tz.sigmoid(tz.add(tz.matmul(e_b, params["W6"]), params["c"]))
    kept = tz.mul(e_s, e_b)
    swapped = tz.mul(tz.sub(Tensor(1.0, check=False), e_s), e_t)
    return tz.add(kept, swapped), e_s


def classify(e, params):
    """Linear head + row softmax over the K classes."""
    logits = tz.add(tz.matmul(e, params["head_W"]), params["head_b"])
    return tz.row_softmax(logits)


def _dropout(x, rate, rng):
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return tz.mul(x, Tensor(keep, check=False))


def forward_batch(batch, params, cfg, gate_override=None, train_rng=None):
    """Run both towers on a prepared batch; returns named Tensors.

    Keys: v, e_b, left_alpha, e, p always; a, alpha, o, obar, ffn, e_t,
    e_s, weights in graph modes; a_t, alpha_t in dynamic mode. Absent
    pieces are None. ``train_rng`` enables dropout (training only).
    """
    v = embed_inputs(batch.token_ids, batch.type_ids, batch.positions, params)
    v = _dropout(v, cfg.dropout, train_rng)
    e_b, left_alpha = left_tower_forward(
        v, Tensor(batch.attn_weights, check=False), params, cfg
    )
    out = {
        "v": v, "e_b": e_b, "left_alpha": left_alpha, "e_t": None,
        "e_s": None, "a": None, "alpha": None, "o": None, "obar": None,
        "ffn": None, "a_t": None, "alpha_t": None, "weights": None,
    }
    if cfg.graph_mode == "none":
        e = e_b
    else:
        if cfg.graph_mode == "static":
            weights = Tensor(batch.adjacency, check=False)
        else:
            valid = Tensor(batch.attn_weights, check=False)
            alpha_t, a_t = dynamic_tag_graph(
                batch.tag_ids, batch.positions, params, valid
            )
            out["a_t"] = a_t
            out["alpha_t"] = alpha_t
            weights = alpha_t
        e_t, internals = right_tower_forward(v, weights, params, cfg)
        out.update(internals)
        out["e_t"] = e_t
        out["weights"] = weights
        e, e_s = fuse(e_b, e_t, params, cfg, gate_override)
        out["e_s"] = e_s
    e = _dropout(e, cfg.dropout, train_rng)
    out["e"] = e
    out["p"] = classify(e, params)
    return out


def batch_loss(probs, batch):
    """Mean over records of each record's mean token cross-entropy."""
    return tz.masked_cross_entropy(probs, batch.labels, batch.mask)


@dataclass
class ForwardTrace:
    """Per-position intermediates of one record's forward pass.

    Right-tower and dynamic fields are None when the mode skips them;
    ``a``/``alpha`` carry a leading head axis.
    """

    v: np.ndarray
    e_b: np.ndarray
    e: np.ndarray
    p: np.ndarray
    a: np.ndarray = None
    alpha: np.ndarray = None
    o: np.ndarray = None
    obar: np.ndarray = None
    ffn: np.ndarray = None
    e_t: np.ndarray = None
    e_s: np.ndarray = None
    a_t: np.ndarray = None
    alpha_t: np.ndarray = None


def forward(record, params, cfg, vocab, graph=None, gate_override=None):
    """Full forward pass for one record, returning a ForwardTrace."""
    batch = prepare_batch([record], vocab, cfg, graph)
    out = forward_batch(batch, params, cfg, gate_override)

    def first(key):
        t = out[key]
        return None if t is None else t.data[0]

    return ForwardTrace(
        v=first("v"), e_b=first("e_b"), e=first("e"), p=first("p"),
        a=first("a"), alpha=first("alpha"), o=first("o"), obar=first("obar"),
        ffn=first("ffn"), e_t=first("e_t"), e_s=first("e_s"),
        a_t=first("a_t"), alpha_t=first("alpha_t"),
    )


def trace_loss(trace, wrapped_labels):
    """Mean cross-entropy over every wrapped position (specials included)."""
    p = trace.p
    if len(wrapped_labels) != p.shape[0]:
        raise ValueError(
            f"got {len(wrapped_labels)} labels for {p.shape[0]} positions"
        )
    return ops.cross_entropy(p, encode_labels(wrapped_labels, p.shape[1]))


def save_checkpoint(path, params, cfg, vocab, graph=None):
    """One .npz with a JSON meta entry plus every named parameter array.

    The meta embeds the config, both vocabularies, and (when given) the
    tag graph, so prediction from a checkpoint needs no other files.
    """
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": cfg.to_dict(),
        "tokens": vocab.token_list(),
        "tags": vocab.tag_list(),
        "graph": None
        if graph is None
        else {
            "min_support": graph.min_support,
            "edges": [[a, b, c] for (a, b), c in sorted(graph.edges.items())],
        },
    }
    arrays = {name: t.data for name, t in params.items()}
    np.savez(path, __meta__=json.dumps(meta), **arrays)


def load_checkpoint(path):
    """Rebuild (params, cfg, vocab, graph) from a checkpoint file."""
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    with archive:
        if "__meta__" not in archive:
            raise DataError(f"{path}: not a model checkpoint (no meta entry)")
        meta = json.loads(str(archive["__meta__"][()]))
        version = meta.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise DataError(
                f"{path}: checkpoint format version {version!r} is not "
                f"supported (this build reads version "
                f"{CHECKPOINT_FORMAT_VERSION})"
            )
        try:
            cfg = ModelConfig.from_dict(meta["config"])
            vocab = Vocab.from_lists(meta["tokens"], meta["tags"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: invalid checkpoint meta: {exc}") from exc
        graph = None
        if meta.get("graph") is not None:
            graph = TagGraph(
                edges={(a, b): c for a, b, c in meta["graph"]["edges"]},
                min_support=meta["graph"]["min_support"],
            )
        expected = param_shapes(cfg, vocab.n_tokens, vocab.n_tags)
        tensors = {}
        for name, shape in expected.items():
            if name not in archive:
                raise DataError(f"{path}: missing parameter {name!r}")
            arr = archive[name]
            if tuple(arr.shape) != tuple(shape):
                raise DataError(
                    f"{path}: parameter {name!r} has shape {arr.shape}, "
                    f"expected {tuple(shape)}"
                )
            tensors[name] = Tensor(np.array(arr, dtype=np.float64),
                                   requires_grad=True)
        extras = set(archive.files) - set(expected) - {"__meta__"}
        if extras:
            raise DataError(f"{path}: unexpected entries {sorted(extras)}")
    return ModelParams(tensors), cfg, vocab, graph


def clone_config(cfg, **overrides):
    """A config copy with selected fields replaced (validated afresh)."""
    return replace(cfg, **overrides)
