"""Transformer encoder-decoder over the autodiff graph, with two swappable
input front-ends: a text embedding (TTS mode) and a mel prenet (conversion
and autoencoder modes).

Two evaluation routes exist on purpose. Training and teacher-forced
decoding build autodiff graphs; autoregressive decoding runs a mirrored
incremental numpy implementation with cached keys/values. The two routes
must agree (see the oracle-feedback equivalence test), which keeps the
fast path honest.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import toycorpus as tc
from .errors import ConfigError, ContractError

CHECKPOINT_ROLES = ("TTS_PT", "VTN_PT", "TTS_EL", "TTS_N", "VTN_BASE", "VTN_1ST", "VTN_2ND")
FRONTEND_PREFIXES = ("text_embed.", "mel_prenet.")
GA_SIGMA = 0.2
GA_WEIGHT = 1.0
NEG_FILL = -1e9


@dataclass
class ModelConfig:
    encoder_layers: int = 6
    decoder_layers: int = 6
    heads: int = 4
    model_dim: int = 96
    feedforward_dim: int = 384
    dropout: float = 0.1
    reduction_factor: int = 2
    mel_dim: int = 80
    vocab: int = len(tc.VOCAB)
    postnet_channels: int = 96
    postnet_layers: int = 5
    postnet_kernel: int = 5

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ConfigError("model_dim must be divisible by heads")
        if self.reduction_factor < 1:
            raise ConfigError("reduction factor must be >= 1")

    @property
    def head_dim(self):
        return self.model_dim // self.heads


@dataclass
class DecodeResult:
    """Predicted frames before/after the postnet, stop logits, attention."""

    pre: np.ndarray                 # (m, mel_dim)
    post: np.ndarray                # (m, mel_dim)
    stop_logits: np.ndarray         # (m / r,)
    attention: np.ndarray           # (layers, heads, m/r, n) cross-attention
    truncated: bool = False


# --- parameters -----------------------------------------------------------------

def _xavier(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)


def _linear(params, rng, name, fan_in, fan_out):
    params[f"{name}.w"] = ad.Tensor(_xavier(rng, fan_in, fan_out), requires_grad=True)
    params[f"{name}.b"] = ad.Tensor(np.zeros(fan_out, dtype=np.float32), requires_grad=True)


def _layer_norm_params(params, name, dim):
    params[f"{name}.g"] = ad.Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
    params[f"{name}.b"] = ad.Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)


def _attn_params(params, rng, name, d):
    for proj in ("q", "k", "v", "o"):
        _linear(params, rng, f"{name}.{proj}", d, d)


def make_text_frontend(cfg: ModelConfig, rng):
    table = (rng.standard_normal((cfg.vocab, cfg.model_dim)) / np.sqrt(cfg.model_dim))
    return {"text_embed.weight": ad.Tensor(table.astype(np.float32), requires_grad=True)}


def make_mel_frontend(cfg: ModelConfig, rng):
    params = {}
    _linear(params, rng, "mel_prenet.l1", cfg.mel_dim, cfg.model_dim)
    _linear(params, rng, "mel_prenet.l2", cfg.model_dim, cfg.model_dim)
    return params


def init_params(cfg: ModelConfig, rng, frontend="text"):
    """Fresh parameter set; `frontend` picks the input side."""
    d, ff = cfg.model_dim, cfg.feedforward_dim
    params = {}
    if frontend == "text":
        params.update(make_text_frontend(cfg, rng))
    elif frontend == "mel":
        params.update(make_mel_frontend(cfg, rng))
    else:
        raise ConfigError(f"unknown frontend {frontend!r}")

    for i in range(cfg.encoder_layers):
        base = f"enc.l{i}"
        _layer_norm_params(params, f"{base}.ln1", d)
        _attn_params(params, rng, f"{base}.attn", d)
        _layer_norm_params(params, f"{base}.ln2", d)
        _linear(params, rng, f"{base}.ff.l1", d, ff)
        _linear(params, rng, f"{base}.ff.l2", ff, d)
    _layer_norm_params(params, "enc.ln_out", d)

    r_mel = cfg.mel_dim * cfg.reduction_factor
    _linear(params, rng, "dec.prenet.l1", r_mel, d)
    _linear(params, rng, "dec.prenet.l2", d, d)
    for i in range(cfg.decoder_layers):
        base = f"dec.l{i}"
        _layer_norm_params(params, f"{base}.ln1", d)
        _attn_params(params, rng, f"{base}.self", d)
        _layer_norm_params(params, f"{base}.ln2", d)
        _attn_params(params, rng, f"{base}.cross", d)
        _layer_norm_params(params, f"{base}.ln3", d)
        _linear(params, rng, f"{base}.ff.l1", d, ff)
        _linear(params, rng, f"{base}.ff.l2", ff, d)
    _layer_norm_params(params, "dec.ln_out", d)
    _linear(params, rng, "dec.out", d, r_mel)
    _linear(params, rng, "dec.stop", d, 1)

    chans = [cfg.mel_dim] + [cfg.postnet_channels] * (cfg.postnet_layers - 1) + [cfg.mel_dim]
    for j in range(cfg.postnet_layers):
        _linear(params, rng, f"postnet.l{j}", cfg.postnet_kernel * chans[j], chans[j + 1])
    return params


def frontend_mode(params):
    if any(k.startswith("text_embed.") for k in params):
        return "text"
    if any(k.startswith("mel_prenet.") for k in params):
        return "mel"
    raise ConfigError("parameter set has no front-end")


def swap_front_end(params, new_front):
    """Replace front-end parameters, leaving the body tensors untouched."""
    for key in new_front:
        if not key.startswith(FRONTEND_PREFIXES):
            raise ConfigError(f"{key} is not a front-end parameter")
    body = {k: v for k, v in params.items() if not k.startswith(FRONTEND_PREFIXES)}
    out = dict(body)
    out.update(new_front)
    return out


def params_hash(params, prefixes=None):
    """Stable digest of (a subset of) the parameter tensors."""
    h = hashlib.sha256()
    for name in sorted(params):
        if prefixes is not None and not name.startswith(tuple(prefixes)):
            continue
        t = params[name]
        h.update(name.encode())
        h.update(str(t.data.shape).encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return h.hexdigest()


def clone_params(params):
    return {k: v.copy() for k, v in params.items()}


# --- shared pieces ------------------------------------------------------------------

_POSENC_CACHE = {}


def positional_encoding(length, dim):
    key = (length, dim)
    if key not in _POSENC_CACHE:
        pos = np.arange(length)[:, None].astype(np.float64)
        i = np.arange(dim // 2)[None, :]
        angle = pos / np.power(10000.0, 2.0 * i / dim)
        pe = np.zeros((length, dim), dtype=np.float32)
        pe[:, 0::2] = np.sin(angle)
        pe[:, 1::2] = np.cos(angle)
        _POSENC_CACHE[key] = pe
    return _POSENC_CACHE[key]


def frames_to_groups(frames, r):
    m, mel = frames.shape
    if m % r != 0:
        raise ContractError(f"frame count {m} not divisible by reduction factor {r}")
    return frames.reshape(m // r, r * mel)


def pad_to_reduction(frames, r, pad_row=None):
    """Pad a (m, mel) matrix with pad rows until m divides r."""
    m, mel = frames.shape
    rem = (-m) % r
    if rem == 0:
        return frames
    row = np.zeros(mel, dtype=frames.dtype) if pad_row is None else pad_row
    return np.concatenate([frames, np.tile(row, (rem, 1))], axis=0)


def shift_right_groups(groups):
    go = np.zeros((1, groups.shape[1]), dtype=groups.dtype)
    return np.concatenate([go, groups[:-1]], axis=0)


def guided_attention_weights(n_steps, n_src):
    """Penalty mask pulling attention toward the time diagonal."""
    t = np.arange(n_steps)[:, None] / max(n_steps, 1)
    s = np.arange(n_src)[None, :] / max(n_src, 1)
    return (1.0 - np.exp(-((s - t) ** 2) / (2.0 * GA_SIGMA ** 2))).astype(np.float32)


# --- graph construction ----------------------------------------------------------------

class _DropoutCtx:
    """Draws dropout masks from the trainer's RNG; inactive when rate is 0."""

    def __init__(self, rng=None, rate=0.0):
        self.rng = rng
        self.rate = rate

    def apply(self, g, node):
        if self.rng is None or self.rate <= 0.0:
            return node
        keep = 1.0 - self.rate
        mask = (self.rng.random(node.shape) < keep).astype(np.float32) / keep
        return g.dropout(node, mask)


def _graph_linear(g, params, name, x):
    return g.add(g.matmul(x, g.param(f"{name}.w", params[f"{name}.w"])),
                 g.param(f"{name}.b", params[f"{name}.b"]))


def _graph_ln(g, params, name, x):
    return g.layer_norm(x, g.param(f"{name}.g", params[f"{name}.g"]),
                        g.param(f"{name}.b", params[f"{name}.b"]))


def _graph_attention(g, params, cfg, name, q_in, kv_in, mask):
    """Multi-head attention; returns (context, attention-probabilities)."""
    b, tq = q_in.shape[0], q_in.shape[1]
    tk = kv_in.shape[1]
    h, dh = cfg.heads, cfg.head_dim

    def split_heads(x, t):
        return g.transpose(g.reshape(x, (b, t, h, dh)), (0, 2, 1, 3))

    q = split_heads(_graph_linear(g, params, f"{name}.q", q_in), tq)
    k = split_heads(_graph_linear(g, params, f"{name}.k", kv_in), tk)
    v = split_heads(_graph_linear(g, params, f"{name}.v", kv_in), tk)
    scores = g.scale(g.matmul(q, g.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    if mask is not None:
        scores = g.masked_fill(scores, np.broadcast_to(mask, scores.shape), NEG_FILL)
    att = g.softmax(scores)
    ctx = g.reshape(g.transpose(g.matmul(att, v), (0, 2, 1, 3)), (b, tq, cfg.model_dim))
    return _graph_linear(g, params, f"{name}.o", ctx), att


def _graph_ff(g, params, cfg, name, x):
    return _graph_linear(g, params, f"{name}.l2",
                         g.relu(_graph_linear(g, params, f"{name}.l1", x)))


def build_encoder(g, params, cfg: ModelConfig, source, src_pad_mask, drop: _DropoutCtx):
    """source: node (B,S,d) already through the front-end. Returns memory node."""
    s = source.shape[1]
    pos = g.constant(np.broadcast_to(positional_encoding(s, cfg.model_dim), source.shape))
    x = drop.apply(g, g.add(source, pos))
    attn_mask = None if src_pad_mask is None else src_pad_mask[:, None, None, :]
    for i in range(cfg.encoder_layers):
        base = f"enc.l{i}"
        normed = _graph_ln(g, params, f"{base}.ln1", x)
        a, _ = _graph_attention(g, params, cfg, f"{base}.attn", normed, normed, attn_mask)
        x = g.add(x, drop.apply(g, a))
        f = _graph_ff(g, params, cfg, f"{base}.ff", _graph_ln(g, params, f"{base}.ln2", x))
        x = g.add(x, drop.apply(g, f))
    return _graph_ln(g, params, "enc.ln_out", x)


def embed_text(g, params, cfg, token_ids):
    """token_ids: (B,S) int array -> (B,S,d) node."""
    table = g.param("text_embed.weight", params["text_embed.weight"])
    return g.scale(g.embedding(table, token_ids), np.sqrt(cfg.model_dim))


def embed_mel(g, params, cfg, mel, drop: _DropoutCtx):
    """mel: node (B,S,mel_dim) -> (B,S,d) node through the 2-layer prenet."""
    h = drop.apply(g, g.relu(_graph_linear(g, params, "mel_prenet.l1", mel)))
    return drop.apply(g, g.relu(_graph_linear(g, params, "mel_prenet.l2", h)))


def build_decoder(g, params, cfg: ModelConfig, memory, dec_in, self_mask, cross_mask,
                  drop: _DropoutCtx):
    """Teacher-forced decoder over (B,G,r*mel) inputs.

    Returns (pre, post, stop_logits, cross-attention nodes per layer).
    """
    b, n_groups = dec_in.shape[0], dec_in.shape[1]
    h = drop.apply(g, g.relu(_graph_linear(g, params, "dec.prenet.l1", dec_in)))
    h = drop.apply(g, g.relu(_graph_linear(g, params, "dec.prenet.l2", h)))
    pos = g.constant(np.broadcast_to(positional_encoding(n_groups, cfg.model_dim), h.shape))
    x = drop.apply(g, g.add(h, pos))
    cross_atts = []
    for i in range(cfg.decoder_layers):
        base = f"dec.l{i}"
        normed = _graph_ln(g, params, f"{base}.ln1", x)
        a, _ = _graph_attention(g, params, cfg, f"{base}.self", normed, normed, self_mask)
        x = g.add(x, drop.apply(g, a))
        c, att = _graph_attention(g, params, cfg, f"{base}.cross",
                                  _graph_ln(g, params, f"{base}.ln2", x), memory, cross_mask)
        cross_atts.append(att)
        x = g.add(x, drop.apply(g, c))
        f = _graph_ff(g, params, cfg, f"{base}.ff", _graph_ln(g, params, f"{base}.ln3", x))
        x = g.add(x, drop.apply(g, f))
    x = _graph_ln(g, params, "dec.ln_out", x)
    pre_groups = _graph_linear(g, params, "dec.out", x)
    pre = g.reshape(pre_groups, (b, n_groups * cfg.reduction_factor, cfg.mel_dim))
    stop = g.reshape(_graph_linear(g, params, "dec.stop", x), (b, n_groups))
    post = g.add(pre, build_postnet(g, params, cfg, pre, drop))
    return pre, post, stop, cross_atts


def build_postnet(g, params, cfg: ModelConfig, x, drop: _DropoutCtx):
    """5-layer 1-D convolutional refiner, implemented as shifted-slice matmuls."""
    b, t = x.shape[0], x.shape[1]
    k = cfg.postnet_kernel
    half = k // 2
    for j in range(cfg.postnet_layers):
        cin = x.shape[2]
        zeros = g.constant(np.zeros((b, half, cin), dtype=np.float32))
        padded = g.concat([zeros, x, zeros], axis=1)
        windows = g.concat([g.slice(padded, (slice(None), slice(o, o + t))) for o in range(k)],
                           axis=2)
        x = _graph_linear(g, params, f"postnet.l{j}", windows)
        if j < cfg.postnet_layers - 1:
            x = drop.apply(g, g.tanh(x))
    return x


def attach_losses(g, batch_meta, pre, post, stop, cross_atts):
    """L1 (pre and post), stop BCE, guided attention; returns component nodes."""
    tgt = g.constant(batch_meta["target"])
    l1_w = batch_meta["l1_weight"]
    l1_pre = g.l1_loss(pre, tgt, weight=l1_w)
    l1_post = g.l1_loss(post, tgt, weight=l1_w)
    stop_labels = g.constant(batch_meta["stop_labels"])
    bce = g.bce_logits(stop, stop_labels, weight=batch_meta["stop_weight"])
    ga_w = g.constant(batch_meta["ga_weight"])
    ga_terms = [g.sum(g.mul(att, ga_w)) for att in cross_atts]
    ga = ga_terms[0]
    for term in ga_terms[1:]:
        ga = g.add(ga, term)
    ga = g.scale(ga, 1.0 / len(cross_atts))
    total = g.add(g.add(g.add(l1_pre, l1_post), bce), g.scale(ga, GA_WEIGHT))
    return {"l1_pre": l1_pre, "l1_post": l1_post, "bce": bce, "ga": ga, "total": total}


@dataclass
class Batch:
    """Padded training batch plus the masks and loss weights the graph needs."""

    mode: str                       # text | mel
    src: np.ndarray                 # (B,S) ids or (B,S,mel) frames
    src_lens: np.ndarray
    dec_in: np.ndarray              # (B,G,r*mel)
    target: np.ndarray              # (B,T,mel)
    tgt_group_lens: np.ndarray
    meta: dict


def make_batch(cfg: ModelConfig, examples, pad_row):
    """examples: list of (source, target) where source is token ids (text mode)
    or a (n, mel) matrix (mel mode); targets are (m, mel) matrices."""
    if not examples:
        raise ContractError("empty batch")
    r = cfg.reduction_factor
    mode = "text" if examples[0][0].ndim == 1 else "mel"
    b = len(examples)

    targets = [pad_to_reduction(t, r, pad_row) for _, t in examples]
    group_lens = np.array([t.shape[0] // r for t in targets])
    n_groups = int(group_lens.max())
    t_max = n_groups * r
    src_lens = np.array([s.shape[0] for s, _ in examples])
    s_max = int(src_lens.max())

    target = np.tile(pad_row.astype(np.float32), (b, t_max, 1))
    dec_in = np.zeros((b, n_groups, r * cfg.mel_dim), dtype=np.float32)
    if mode == "text":
        src = np.zeros((b, s_max), dtype=np.int64)
    else:
        src = np.zeros((b, s_max, cfg.mel_dim), dtype=np.float32)
    for i, (s, _) in enumerate(examples):
        src[i, : s.shape[0]] = s
        target[i, : targets[i].shape[0]] = targets[i]
        groups = frames_to_groups(targets[i], r)
        dec_in[i, : groups.shape[0]] = shift_right_groups(groups)

    l1_weight = np.zeros((b, t_max, cfg.mel_dim), dtype=np.float32)
    stop_labels = np.zeros((b, n_groups), dtype=np.float32)
    stop_weight = np.zeros((b, n_groups), dtype=np.float32)
    ga_weight = np.zeros((b, cfg.heads, n_groups, s_max), dtype=np.float32)
    ga_cells = 0.0
    for i in range(b):
        gl, sl = int(group_lens[i]), int(src_lens[i])
        l1_weight[i, : gl * r] = 1.0
        stop_labels[i, gl - 1] = 1.0
        stop_weight[i, :gl] = 1.0
        ga_weight[i, :, :gl, :sl] = guided_attention_weights(gl, sl)[None]
        ga_cells += cfg.heads * gl * sl
    ga_weight /= max(ga_cells, 1.0)

    causal = np.triu(np.ones((n_groups, n_groups), dtype=bool), k=1)
    self_mask = np.broadcast_to(causal, (b, cfg.heads, n_groups, n_groups)).copy()
    src_pad = np.arange(s_max)[None, :] >= src_lens[:, None]
    self_pad = np.arange(n_groups)[None, :] >= group_lens[:, None]
    self_mask |= self_pad[:, None, None, :]
    cross_mask = np.broadcast_to(src_pad[:, None, None, :],
                                 (b, cfg.heads, n_groups, s_max)).copy()

    meta = {"target": target, "l1_weight": l1_weight, "stop_labels": stop_labels,
            "stop_weight": stop_weight, "ga_weight": ga_weight,
            "self_mask": self_mask, "cross_mask": cross_mask, "src_pad": src_pad}
    return Batch(mode=mode, src=src, src_lens=src_lens, dec_in=dec_in, target=target,
                 tgt_group_lens=group_lens, meta=meta)


def build_training_graph(params, cfg: ModelConfig, batch: Batch, rng=None, dropout=0.0):
    """Full teacher-forced graph for one batch; returns (graph, loss nodes, outputs)."""
    g = ad.Graph()
    drop = _DropoutCtx(rng, dropout)
    if batch.mode == "text":
        source = embed_text(g, params, cfg, batch.src)
    else:
        source = embed_mel(g, params, cfg, g.input("src_mel", batch.src), drop)
    src_pad = batch.meta["src_pad"] if batch.src.shape[1] > 1 else None
    memory = build_encoder(g, params, cfg, source, src_pad, drop)
    pre, post, stop, atts = build_decoder(g, params, cfg, memory,
                                          g.input("dec_in", batch.dec_in),
                                          batch.meta["self_mask"],
                                          batch.meta["cross_mask"], drop)
    losses = attach_losses(g, batch.meta, pre, post, stop, atts)
    outputs = {"pre": pre, "post": post, "stop": stop, "attention": atts}
    g.output("total", losses["total"])
    return g, losses, outputs


# --- spec-level single-utterance operations -----------------------------------------------

def encode(cfg: ModelConfig, params, source):
    """Encode one utterance (token ids or mel frames) to hidden vectors."""
    mode = frontend_mode(params)
    source = np.asarray(source)
    if source.ndim == 1:
        if mode != "text":
            raise ContractError("mel front-end cannot encode a token sequence")
        if source.size == 0:
            raise ContractError("empty source")
        return _np_encode_text(params, cfg, source.astype(np.int64))
    if source.ndim == 2 and source.shape[1] == cfg.mel_dim:
        if mode != "mel":
            raise ContractError("text front-end cannot encode mel frames")
        return _np_encode_mel(params, cfg, source.astype(np.float32))
    raise ContractError(f"source shape {source.shape} is neither ids nor mel frames")


def decode_teacher_forced(params, cfg: ModelConfig, memory, target, pad_row=None):
    """Teacher-forced decode against a precomputed memory (single utterance)."""
    target = np.asarray(target, dtype=np.float32)
    if target.size == 0:
        raise ContractError("empty target")
    r = cfg.reduction_factor
    if pad_row is None:
        pad_row = np.zeros(cfg.mel_dim, dtype=np.float32)
    padded = pad_to_reduction(target, r, pad_row)
    n_groups = padded.shape[0] // r
    dec_in = shift_right_groups(frames_to_groups(padded, r))[None]

    g = ad.Graph()
    drop = _DropoutCtx()
    mem_node = g.constant(memory[None])
    causal = np.triu(np.ones((n_groups, n_groups), dtype=bool), k=1)
    self_mask = np.broadcast_to(causal, (1, cfg.heads, n_groups, n_groups))
    pre, post, stop, atts = build_decoder(g, params, cfg, mem_node, g.constant(dec_in),
                                          self_mask, None, drop)
    attention = np.stack([a.value[0] for a in atts])
    return DecodeResult(pre=pre.value[0], post=post.value[0], stop_logits=stop.value[0],
                        attention=attention)


def loss_components(result: DecodeResult, target, stop_labels, pad_row=None):
    """Composite loss of a single-utterance decode, computed in plain numpy."""
    target = np.asarray(target, dtype=np.float32)
    r_pad = pad_to_reduction(target, result.pre.shape[0] // max(len(result.stop_logits), 1)
                             if len(result.stop_logits) else 1, pad_row)
    if r_pad.shape != result.pre.shape:
        raise ContractError(f"target shape {r_pad.shape} != prediction {result.pre.shape}")
    l1_pre = float(np.abs(result.pre - r_pad).mean())
    l1_post = float(np.abs(result.post - r_pad).mean())
    z = result.stop_logits.astype(np.float64)
    y = np.asarray(stop_labels, dtype=np.float64)
    if z.shape != y.shape:
        raise ContractError("stop label shape mismatch")
    bce = float((np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean())
    n_layers, _, steps, n_src = result.attention.shape
    ga_w = guided_attention_weights(steps, n_src)
    ga = float((result.attention * ga_w[None, None]).sum() / result.attention[..., 0].size
               / n_src * n_src)  # mean over layer/head/step cells times source sum
    ga = float((result.attention * ga_w[None, None]).sum()
               / (n_layers * result.attention.shape[1] * steps * n_src))
    total = l1_pre + l1_post + bce + GA_WEIGHT * ga
    return {"l1_pre": l1_pre, "l1_post": l1_post, "bce": bce, "ga": ga, "total": total}


# --- numpy inference path ------------------------------------------------------------------

def _np_linear(params, name, x):
    return x @ params[f"{name}.w"].data + params[f"{name}.b"].data


def _np_ln(params, name, x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc * inv * params[f"{name}.g"].data + params[f"{name}.b"].data


def _np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _np_encode_text(params, cfg, ids):
    if ids.min() < 0 or ids.max() >= cfg.vocab:
        raise ContractError("token id out of range")
    x = params["text_embed.weight"].data[ids] * np.float32(np.sqrt(cfg.model_dim))
    return _np_encoder_body(params, cfg, x)


def _np_encode_mel(params, cfg, mel):
    h = np.maximum(_np_linear(params, "mel_prenet.l1", mel), 0)
    x = np.maximum(_np_linear(params, "mel_prenet.l2", h), 0)
    return _np_encoder_body(params, cfg, x)


def _np_attention(params, cfg, name, q_in, kv_in):
    h, dh = cfg.heads, cfg.head_dim
    tq, tk = q_in.shape[0], kv_in.shape[0]
    q = _np_linear(params, f"{name}.q", q_in).reshape(tq, h, dh).transpose(1, 0, 2)
    k = _np_linear(params, f"{name}.k", kv_in).reshape(tk, h, dh).transpose(1, 0, 2)
    v = _np_linear(params, f"{name}.v", kv_in).reshape(tk, h, dh).transpose(1, 0, 2)
    att = _np_softmax((q @ k.transpose(0, 2, 1)) / np.sqrt(dh))
    ctx = (att @ v).transpose(1, 0, 2).reshape(tq, cfg.model_dim)
    return _np_linear(params, f"{name}.o", ctx), att


def _np_encoder_body(params, cfg, x):
    x = x + positional_encoding(x.shape[0], cfg.model_dim)
    for i in range(cfg.encoder_layers):
        base = f"enc.l{i}"
        a, _ = _np_attention(params, cfg, f"{base}.attn",
                             _np_ln(params, f"{base}.ln1", x),
                             _np_ln(params, f"{base}.ln1", x))
        x = x + a
        f = _np_ln(params, f"{base}.ln2", x)
        f = _np_linear(params, f"{base}.ff.l2",
                       np.maximum(_np_linear(params, f"{base}.ff.l1", f), 0))
        x = x + f
    return _np_ln(params, "enc.ln_out", x)


def postnet_np(params, cfg: ModelConfig, x):
    half = cfg.postnet_kernel // 2
    out = x
    for j in range(cfg.postnet_layers):
        cin = out.shape[1]
        padded = np.concatenate([np.zeros((half, cin), dtype=out.dtype), out,
                                 np.zeros((half, cin), dtype=out.dtype)], axis=0)
        t = out.shape[0]
        windows = np.concatenate([padded[o: o + t] for o in range(cfg.postnet_kernel)], axis=1)
        out = _np_linear(params, f"postnet.l{j}", windows)
        if j < cfg.postnet_layers - 1:
            out = np.tanh(out)
    return x + out


class _KvCache:
    def __init__(self):
        self.k = None
        self.v = None

    def append(self, k_new, v_new):
        # k_new/v_new: (heads, 1, dh)
        self.k = k_new if self.k is None else np.concatenate([self.k, k_new], axis=1)
        self.v = v_new if self.v is None else np.concatenate([self.v, v_new], axis=1)


def decode_autoregressive(params, cfg: ModelConfig, memory, max_frames=600,
                          stop_threshold=0.5, oracle_feedback=None, pad_row=None):
    """Generate frames until the stop head fires or max_frames is reached.

    Feeds back its own post-postnet frames; `oracle_feedback` replaces the
    feedback with ground-truth frames (the teacher-forced equivalence probe).
    """
    r = cfg.reduction_factor
    if max_frames < r:
        raise ContractError(f"max_frames must be at least the reduction factor {r}")
    d, h, dh = cfg.model_dim, cfg.heads, cfg.head_dim
    memory = np.asarray(memory, dtype=np.float32)
    n_src = memory.shape[0]
    max_groups = max_frames // r

    oracle_groups = None
    if oracle_feedback is not None:
        padded = pad_to_reduction(np.asarray(oracle_feedback, dtype=np.float32), r,
                                  pad_row if pad_row is not None else None)
        oracle_groups = frames_to_groups(padded, r)
        max_groups = min(max_groups, oracle_groups.shape[0])

    cross_k = []
    cross_v = []
    for i in range(cfg.decoder_layers):
        base = f"dec.l{i}.cross"
        cross_k.append(_np_linear(params, f"{base}.k", memory).reshape(n_src, h, dh).transpose(1, 0, 2))
        cross_v.append(_np_linear(params, f"{base}.v", memory).reshape(n_src, h, dh).transpose(1, 0, 2))
    self_cache = [_KvCache() for _ in range(cfg.decoder_layers)]

    pre_groups = []
    stop_logits = []
    cross_att_rows = [[] for _ in range(cfg.decoder_layers)]
    feedback = np.zeros(r * cfg.mel_dim, dtype=np.float32)
    truncated = True
    scale = 1.0 / np.sqrt(dh)

    for step in range(max_groups):
        x = np.maximum(_np_linear(params, "dec.prenet.l1", feedback[None]), 0)
        x = np.maximum(_np_linear(params, "dec.prenet.l2", x), 0)
        x = x + positional_encoding(step + 1, d)[step: step + 1]
        for i in range(cfg.decoder_layers):
            base = f"dec.l{i}"
            a_in = _np_ln(params, f"{base}.ln1", x)
            q = _np_linear(params, f"{base}.self.q", a_in).reshape(1, h, dh).transpose(1, 0, 2)
            k_new = _np_linear(params, f"{base}.self.k", a_in).reshape(1, h, dh).transpose(1, 0, 2)
            v_new = _np_linear(params, f"{base}.self.v", a_in).reshape(1, h, dh).transpose(1, 0, 2)
            self_cache[i].append(k_new, v_new)
            att = _np_softmax((q @ self_cache[i].k.transpose(0, 2, 1)) * scale)
            ctx = (att @ self_cache[i].v).transpose(1, 0, 2).reshape(1, d)
            x = x + _np_linear(params, f"{base}.self.o", ctx)

            c_in = _np_ln(params, f"{base}.ln2", x)
            qc = _np_linear(params, f"{base}.cross.q", c_in).reshape(1, h, dh).transpose(1, 0, 2)
            att_c = _np_softmax((qc @ cross_k[i].transpose(0, 2, 1)) * scale)
            cross_att_rows[i].append(att_c[:, 0, :])
            ctx_c = (att_c @ cross_v[i]).transpose(1, 0, 2).reshape(1, d)
            x = x + _np_linear(params, f"{base}.cross.o", ctx_c)

            f_in = _np_ln(params, f"{base}.ln3", x)
            ff = _np_linear(params, f"{base}.ff.l2",
                            np.maximum(_np_linear(params, f"{base}.ff.l1", f_in), 0))
            x = x + ff
        xd = _np_ln(params, "dec.ln_out", x)
        pre_groups.append(_np_linear(params, "dec.out", xd)[0])
        stop_logits.append(float(_np_linear(params, "dec.stop", xd)[0, 0]))

        if oracle_groups is not None:
            feedback = oracle_groups[step]
        else:
            pre = np.concatenate(pre_groups).reshape(-1, cfg.mel_dim)
            post = postnet_np(params, cfg, pre)
            feedback = post[-r:].reshape(-1)
        if oracle_groups is None and _sigmoid_scalar(stop_logits[-1]) > stop_threshold:
            truncated = False
            break
    else:
        truncated = oracle_groups is None

    pre = np.concatenate(pre_groups).reshape(-1, cfg.mel_dim).astype(np.float32)
    post = postnet_np(params, cfg, pre).astype(np.float32)
    attention = np.stack([np.stack(rows, axis=1) for rows in cross_att_rows]).astype(np.float32)
    return DecodeResult(pre=pre, post=post,
                        stop_logits=np.array(stop_logits, dtype=np.float32),
                        attention=attention, truncated=truncated)


def _sigmoid_scalar(x):
    return 1.0 / (1.0 + np.exp(-x)) if x >= 0 else np.exp(x) / (1.0 + np.exp(x))


# --- checkpoints ----------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"VTN1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params, cfg: ModelConfig, role, adam_state: ad.AdamState | None = None):
    if role not in CHECKPOINT_ROLES:
        raise ConfigError(f"unknown checkpoint role {role!r}")
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += _pack_str(role)
    out += _pack_str(json.dumps(asdict(cfg), sort_keys=True))
    out += struct.pack("<I", len(params))
    for name in sorted(params):
        out += _pack_tensor(name, params[name].data)
    if adam_state is None:
        out += struct.pack("<B", 0)
    else:
        out += struct.pack("<B", 1)
        out += struct.pack("<4dQ", adam_state.lr, adam_state.beta1, adam_state.beta2,
                           adam_state.eps, adam_state.t)
        out += struct.pack("<I", len(adam_state.m))
        for name in sorted(adam_state.m):
            out += _pack_tensor(name, adam_state.m[name])
            out += _pack_tensor(name, adam_state.v[name])
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_checkpoint(path):
    blob = open(path, "rb").read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    role, off = _unpack_str(blob, off)
    cfg_json, off = _unpack_str(blob, off)
    cfg = ModelConfig(**json.loads(cfg_json))
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    params = {}
    for _ in range(count):
        name, arr, off = _unpack_tensor(blob, off)
        params[name] = ad.Tensor(arr, requires_grad=True)
    (has_opt,) = struct.unpack_from("<B", blob, off)
    off += 1
    adam_state = None
    if has_opt:
        lr, b1, b2, eps, t = struct.unpack_from("<4dQ", blob, off)
        off += 40
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        adam_state = ad.AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, t=t)
        for _ in range(n):
            name, m, off = _unpack_tensor(blob, off)
            _, v, off = _unpack_tensor(blob, off)
            adam_state.m[name] = m
            adam_state.v[name] = v
    return params, cfg, role, adam_state


def _pack_str(s):
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(blob, off):
    (n,) = struct.unpack_from("<H", blob, off)
    off += 2
    return blob[off: off + n].decode("utf-8"), off + n


def _pack_tensor(name, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    out = _pack_str(name)
    out += struct.pack("<B", arr.ndim)
    out += struct.pack(f"<{arr.ndim}I", *arr.shape)
    out += arr.tobytes()
    return out


def _unpack_tensor(blob, off):
    name, off = _unpack_str(blob, off)
    (ndim,) = struct.unpack_from("<B", blob, off)
    off += 1
    shape = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape).copy()
    return name, arr, off + 4 * count
