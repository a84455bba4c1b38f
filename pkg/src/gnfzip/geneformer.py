"""Transformer entropy model with a recurrent latent array.

Pipeline for one prediction (Table-2 layer order):

    bases -> n-gram tokens -> embedding [L, d/g] -> byte-group [L/g, d]
    -> conv1d -> relu -> maxpool -> batchnorm -> dropout        (features X_t)
    -> relative attention over [H_{t-1}, X_t] -> layernorm -> dropout
    -> layernorm -> linear(d_ff) -> linear(d) -> dropout -> gelu -> dropout
    -> (+ residual) = H_t -> flatten -> linear -> softmax over 4**ngram

``H_t`` becomes the memory for the next window and never carries gradient
back into the window that produced it.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nx
from .entropy import EntropyModel, Session
from .errors import (BadContextLength, BadMagic, ConfigError, HashMismatch, TokenOutOfRange,
                     VersionUnsupported)
from .grouping import byte_group_reshape, tokenize_array

MASK_VALUE = -1e9
INIT_STD = 0.02


def auto_conv_kernel(length: int) -> int:
    # 24 taps for the 64-position ungrouped context, scaled for shorter inputs
    return max(1, min(length, round(length * 3 / 8)))


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 768
    d_ff: int = 3072
    n_heads: int = 8
    d_head: int | None = None
    context_len: int = 64
    ngram: int = 2
    byte_group: int = 4
    dropout: float = 0.1
    pe_base: float = 10000.0
    embed_mode: str = "learned"
    conv_kernel: int | None = None
    conv_stride: int = 1
    pool_kernel: int | None = None
    pool_stride: int | None = None
    latent_array: bool = True
    segment_cut: bool = True
    uncut_segments: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.d_model % self.byte_group:
            raise ConfigError("d_model must be divisible by byte_group")
        if self.context_len % (self.ngram * self.byte_group):
            raise ConfigError("context_len must be a multiple of ngram * byte_group")
        if self.embed_mode not in ("learned", "one-hot"):
            raise ConfigError(f"unknown embed_mode {self.embed_mode!r}")
        if self.embed_mode == "one-hot" and self.vocab > self.embed_dim:
            raise ConfigError("one-hot embedding needs d_model/byte_group >= 4**ngram")
        if self.n_pos < 1:
            raise ConfigError("convolution/pooling leave no positions")

    # -- derived geometry -----------------------------------------------------
    @property
    def vocab(self) -> int:
        return 4 ** self.ngram

    @property
    def head_dim(self) -> int:
        return self.d_head or self.d_model // self.n_heads

    @property
    def embed_dim(self) -> int:
        return self.d_model // self.byte_group

    @property
    def n_tokens(self) -> int:
        return self.context_len // self.ngram

    @property
    def enc_len(self) -> int:
        return self.n_tokens // self.byte_group

    @property
    def kernel(self) -> int:
        return self.conv_kernel or auto_conv_kernel(self.enc_len)

    @property
    def conv_len(self) -> int:
        return (self.enc_len - self.kernel) // self.conv_stride + 1

    @property
    def pool(self) -> tuple[int, int]:
        k = self.pool_kernel or (3 if self.conv_len >= 3 else 1)
        return k, self.pool_stride or k

    @property
    def n_pos(self) -> int:
        k, s = self.pool
        if self.enc_len < self.kernel or self.conv_len < k:
            return 0
        return (self.conv_len - k) // s + 1

    @property
    def mem_len(self) -> int:
        if not self.latent_array:
            return 0
        return self.n_pos * (1 if self.segment_cut else self.uncut_segments)

    @classmethod
    def full(cls, **kw) -> "ModelConfig":
        """Full-width model without grouping: the layer table's configuration."""
        base = dict(d_model=768, d_ff=3072, ngram=1, byte_group=1, context_len=64)
        base.update(kw)
        return cls(**base)

    @classmethod
    def toy(cls, **kw) -> "ModelConfig":
        base = dict(d_model=64, d_ff=256, n_heads=4)
        base.update(kw)
        return cls(**base)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def sinusoid(positions, d_model: int, base: float = 10000.0) -> np.ndarray:
    """g(i): sin on even dims, cos on odd dims, frequency base**(-2j/d)."""
    pos = np.asarray(positions, dtype=np.float64)[..., None]
    j = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / base ** (j / d_model)
    out = np.empty(pos.shape[:-1] + (d_model,))
    out[..., 0::2] = np.sin(angle)
    out[..., 1::2] = np.cos(angle)[..., : d_model // 2]
    return out


def sinusoidal_pe(i: int, d_model: int, base: float = 10000.0) -> np.ndarray:
    return sinusoid(i, d_model, base)


_POS_CACHE: dict = {}


def relative_positions(n: int, m: int, d_model: int, base: float) -> np.ndarray:
    """g((m + i) - j) for query i in 0..n and key j over [memory, current] (0..m+n)."""
    key = (n, m, d_model, base)
    if key not in _POS_CACHE:
        offsets = (m + np.arange(n))[:, None] - np.arange(m + n)[None, :]
        _POS_CACHE[key] = sinusoid(offsets, d_model, base)
    return _POS_CACHE[key]


def causal_mask(n: int, m: int) -> np.ndarray:
    j = np.arange(m + n)[None, :]
    i = np.arange(n)[:, None]
    return np.where(j > m + i, MASK_VALUE, 0.0)


def _contig(t: nx.Tensor) -> nx.Tensor:
    if not t.data.flags.c_contiguous:
        t.data = np.ascontiguousarray(t.data)
    return t


def relative_attention(x: nx.Tensor, memory, params: dict, n_heads: int, d_head: int,
                       pe_base: float = 10000.0, causal: bool = True) -> nx.Tensor:
    """Multi-head attention of x[B, N, d] over [memory, x] with relative positions.

    Per head, score(i, j) = ((q_i + u) . k_j + (q_i + v) . W_K g(m+i-j)) / sqrt(d_k)
    where q = x W_Q and k = [memory, x] W_K.  ``memory`` (B, M, d) is a
    constant; ``None`` means no memory.
    """
    B, N, d = x.shape
    h, dk = n_heads, d_head
    if memory is None:
        xhat, m = x, 0
    else:
        mem = memory if isinstance(memory, nx.Tensor) else nx.Tensor(memory)
        if mem.shape[0] != B or mem.shape[2] != d:
            raise nx.tensor.ShapeMismatch(f"memory shape {mem.shape} incompatible with {x.shape}")
        m = mem.shape[1]
        xhat = nx.concat([mem.detach(), x], axis=1)
    t = m + N
    wq, wk, wv, wo = params["attn.wq"], params["attn.wk"], params["attn.wv"], params["attn.wo"]
    u = params["attn.u"].reshape(1, h, 1, dk)
    v = params["attn.v"].reshape(1, h, 1, dk)
    q = _contig(nx.transpose((x @ wq).reshape(B, N, h, dk), (0, 2, 1, 3)))
    k_t = _contig(nx.transpose((xhat @ wk).reshape(B, t, h, dk), (0, 2, 3, 1)))
    val = _contig(nx.transpose((xhat @ wv).reshape(B, t, h, d // h), (0, 2, 1, 3)))
    content = (q + u) @ k_t  # [B, h, N, t]
    gpos = nx.Tensor(relative_positions(N, m, d, pe_base))  # [N, t, d]
    r = _contig(nx.transpose((gpos @ wk).reshape(N, t, h, dk), (2, 0, 3, 1)))  # [h, N, dk, t]
    position = ((q + v).reshape(B, h, N, 1, dk) @ r).reshape(B, h, N, t)
    scores = (content + position) * (1.0 / math.sqrt(dk))
    if causal:
        scores = scores + causal_mask(N, m)
    attn = nx.softmax(scores, axis=-1)
    mixed = _contig(nx.transpose(attn @ val, (0, 2, 1, 3))).reshape(B, N, d)
    return mixed @ wo


def _trunc_normal(rng, shape, std=INIT_STD):
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2
    return z * std


class GeneformerModel:
    def __init__(self, config: ModelConfig, init: bool = True):
        self.config = config
        self.params: dict[str, nx.Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._build(init)

    # -- parameters -------------------------------------------------------------
    def _build(self, init: bool):
        c = self.config
        rng = np.random.default_rng(c.seed)
        d, h, dk = c.d_model, c.n_heads, c.head_dim

        def p(name, arr):
            self.params[name] = nx.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True, name=name)

        if c.embed_mode == "learned":
            p("embed.weight", rng.standard_normal((c.vocab, c.embed_dim)))
        p("conv.weight", _trunc_normal(rng, (d, d, c.kernel)))
        p("conv.bias", np.zeros(d))
        p("bn.gamma", np.ones(d))
        p("bn.beta", np.zeros(d))
        p("attn.wq", _trunc_normal(rng, (d, h * dk)))
        p("attn.wk", _trunc_normal(rng, (d, h * dk)))
        p("attn.wv", _trunc_normal(rng, (d, d)))
        p("attn.wo", _trunc_normal(rng, (d, d)))
        p("attn.u", np.zeros((h, dk)))
        p("attn.v", np.zeros((h, dk)))
        p("ln1.gamma", np.ones(d))
        p("ln1.beta", np.zeros(d))
        p("ln2.gamma", np.ones(d))
        p("ln2.beta", np.zeros(d))
        p("ff1.weight", _trunc_normal(rng, (d, c.d_ff)))
        p("ff1.bias", np.zeros(c.d_ff))
        p("ff2.weight", _trunc_normal(rng, (c.d_ff, d)))
        p("ff2.bias", np.zeros(d))
        p("head.weight", np.zeros((c.n_pos * d, c.vocab)))
        p("head.bias", np.zeros(c.vocab))
        self.buffers["bn.running_mean"] = np.zeros(d)
        self.buffers["bn.running_var"] = np.ones(d)
        if c.embed_mode == "one-hot":
            self._onehot = np.eye(c.vocab, c.embed_dim)

    def parameters(self) -> list[nx.Tensor]:
        return list(self.params.values())

    def count_params(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    # -- forward ----------------------------------------------------------------
    def initial_memory(self, batch: int) -> np.ndarray | None:
        m = self.config.mem_len
        return np.zeros((batch, m, self.config.d_model)) if m else None

    def next_memory(self, memory, h_t: np.ndarray):
        """Latent array for the following window (segment cut keeps only H_t)."""
        c = self.config
        if not c.latent_array:
            return None
        if c.segment_cut:
            return h_t
        return np.concatenate([memory[:, c.n_pos:], h_t], axis=1)

    def features(self, contexts: np.ndarray, train=False, step=0, trace=None) -> nx.Tensor:
        c = self.config
        contexts = np.asarray(contexts)
        if contexts.ndim != 2 or contexts.shape[1] != c.context_len:
            raise BadContextLength(f"expected contexts of {c.context_len} bases, got {contexts.shape}")
        tokens = tokenize_array(contexts, c.ngram)
        if c.embed_mode == "learned":
            emb = nx.embedding(self.params["embed.weight"], tokens)
        else:
            emb = nx.Tensor(self._onehot[tokens])
        x = byte_group_reshape(emb, c.byte_group)  # [B, L', d]
        x = _contig(nx.swapaxes(x, 1, 2))  # [B, d, L']
        x = nx.conv1d(x, self.params["conv.weight"], self.params["conv.bias"], c.conv_stride)
        _mark(trace, "1DConv", x.shape[1:])
        x = nx.relu(x)
        _mark(trace, "Relu", x.shape[1:])
        k, s = c.pool
        x, _ = nx.maxpool1d(x, k, s)
        _mark(trace, "1DMaxPooling", x.shape[1:])
        x = nx.batch_norm(x, self.params["bn.gamma"], self.params["bn.beta"],
                          self.buffers["bn.running_mean"], self.buffers["bn.running_var"], train)
        _mark(trace, "BatchNormalization", x.shape[1:])
        x = nx.dropout(x, c.dropout, train, (c.seed, 1, step))
        _mark(trace, "Dropout(p=0.1)", x.shape[1:])
        return _contig(nx.swapaxes(x, 1, 2))  # [B, N, d]

    def encoder(self, x: nx.Tensor, memory, train=False, step=0, trace=None) -> nx.Tensor:
        c, P = self.config, self.params
        if memory is not None and memory.shape[1:] != (c.mem_len, c.d_model):
            raise nx.tensor.ShapeMismatch(f"latent array shape {memory.shape[1:]} != {(c.mem_len, c.d_model)}")
        a = relative_attention(x, memory, P, c.n_heads, c.head_dim, c.pe_base)
        _mark_enc(trace, "RelativeAttention", a)
        hid = nx.layer_norm(x + a, P["ln1.gamma"], P["ln1.beta"])
        _mark_enc(trace, "LayerNorm", hid)
        hid = nx.dropout(hid, c.dropout, train, (c.seed, 2, step))
        _mark_enc(trace, "Dropout(p=0.1)", hid)
        hid = nx.layer_norm(hid, P["ln2.gamma"], P["ln2.beta"])
        _mark_enc(trace, "LayerNorm", hid)
        f = nx.linear(hid, P["ff1.weight"], P["ff1.bias"])
        _mark_enc(trace, "Linear", f)
        f = nx.linear(f, P["ff2.weight"], P["ff2.bias"])
        _mark_enc(trace, "Linear", f)
        f = nx.dropout(f, c.dropout, train, (c.seed, 3, step))
        _mark_enc(trace, "Dropout(p=0.1)", f)
        f = nx.gelu(f)
        _mark_enc(trace, "GELUActivation", f)
        f = nx.dropout(f, c.dropout, train, (c.seed, 4, step))
        _mark_enc(trace, "Dropout(p=0.1)", f)
        return hid + f

    def forward(self, contexts, memory=None, train=False, step=0, trace=None):
        """Logits [B, vocab] and encoder output H_t [B, N, d] for a batch of windows."""
        c = self.config
        x = self.features(contexts, train, step, trace)
        if memory is None and c.latent_array:
            memory = self.initial_memory(x.shape[0])
        h_t = self.encoder(x, memory if c.latent_array else None, train, step, trace)
        B = x.shape[0]
        flat = h_t.reshape(B, 1, c.n_pos * c.d_model)
        logits = (flat @ self.params["head.weight"] + self.params["head.bias"]).reshape(B, c.vocab)
        _mark(trace, "Linear", (1, c.vocab))
        return logits, h_t

    def predict_proba(self, contexts, memory=None):
        logits, h_t = self.forward(contexts, memory)
        return nx.softmax(logits, axis=-1).data, h_t.data

    def predict_next(self, context, h_prev=None):
        """Distribution over the next token for one context, plus H_t."""
        context = np.asarray(context)
        if context.shape != (self.config.context_len,):
            raise BadContextLength(f"expected {self.config.context_len} bases, got {context.shape}")
        mem = None if h_prev is None else np.asarray(h_prev)[None]
        probs, h_t = self.predict_proba(context[None], mem)
        return probs[0], h_t[0]

    def shape_trace(self, contexts=None) -> list[tuple[str, tuple]]:
        c = self.config
        if contexts is None:
            contexts = np.zeros((1, c.context_len), dtype=np.uint8)
        trace: list = []
        self.forward(contexts, trace=trace)
        return trace

    def round_to_float32(self):
        for t in self.params.values():
            t.data = t.data.astype(np.float32).astype(np.float64)
        for k in self.buffers:
            self.buffers[k] = self.buffers[k].astype(np.float32).astype(np.float64)


def _mark(trace, name, shape):
    if trace is not None:
        trace.append((name, tuple(int(s) for s in shape)))


def _mark_enc(trace, name, t):
    # encoder tensors are [B, N, width]; report as width x N like the features
    if trace is not None:
        trace.append((name, (int(t.shape[2]), int(t.shape[1]))))


def count_params(config: ModelConfig) -> int:
    """Closed-form number of learnable scalars."""
    c = config
    d, h, dk = c.d_model, c.n_heads, c.head_dim
    n = c.vocab * c.embed_dim if c.embed_mode == "learned" else 0
    n += d * d * c.kernel + d          # conv
    n += 2 * d                         # batch norm affine
    n += 2 * d * h * dk + 2 * d * d    # W_Q, W_K, W_V, W_O
    n += 2 * h * dk                    # u, v
    n += 4 * d                         # two layer norms
    n += d * c.d_ff + c.d_ff + c.d_ff * d + d
    n += c.n_pos * d * c.vocab + c.vocab
    return n


# -- checkpoints ------------------------------------------------------------------

CKPT_MAGIC = b"GFCK"
CKPT_VERSION = 1


def save_checkpoint(model: GeneformerModel) -> bytes:
    """Serialize config + float32 parameters + buffers, followed by a SHA-256."""
    cfg = json.dumps(model.config.to_json(), sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(cfg)), cfg]
    blobs = list(model.params.items()) + [(k, v) for k, v in model.buffers.items()]
    parts.append(struct.pack("<I", len(blobs)))
    for name, arr in blobs:
        data = arr.data if isinstance(arr, nx.Tensor) else arr
        raw = np.ascontiguousarray(data, dtype="<f4").tobytes()
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<Q", len(raw)) + raw)
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def checkpoint_fingerprint(blob: bytes) -> bytes:
    return blob[-32:]


def load_checkpoint(blob: bytes) -> GeneformerModel:
    if len(blob) < 4 or blob[:4] != CKPT_MAGIC:
        raise BadMagic("not a checkpoint (bad magic)")
    if len(blob) < 4 + 6 + 32:
        raise HashMismatch("truncated checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise HashMismatch("checkpoint content hash does not match")
    version, cfg_len = struct.unpack_from("<HI", body, 4)
    if version != CKPT_VERSION:
        raise VersionUnsupported(f"checkpoint version {version}")
    pos = 10
    config = ModelConfig.from_json(json.loads(body[pos:pos + cfg_len]))
    pos += cfg_len
    model = GeneformerModel(config)
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode()
        pos += nlen
        (rlen,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        arr = np.frombuffer(body[pos:pos + rlen], dtype="<f4").astype(np.float64)
        pos += rlen
        if name in model.params:
            model.params[name].data = arr.reshape(model.params[name].shape).copy()
        elif name in model.buffers:
            model.buffers[name] = arr.reshape(model.buffers[name].shape).copy()
        else:
            raise HashMismatch(f"unexpected tensor {name!r} in checkpoint")
    return model


def save_checkpoint_file(model: GeneformerModel, path) -> bytes:
    blob = save_checkpoint(model)
    with open(path, "wb") as fh:
        fh.write(blob)
    return checkpoint_fingerprint(blob)


def load_checkpoint_file(path) -> GeneformerModel:
    with open(path, "rb") as fh:
        return load_checkpoint(fh.read())


# -- codec adapter ------------------------------------------------------------------

class GeneformerSession(Session):
    __slots__ = ("context", "memory", "pending", "ngram")

    def __init__(self, fragment: np.ndarray, memory, ngram: int):
        self.context = np.array(fragment, dtype=np.uint8)
        self.memory = memory
        self.pending = None
        self.ngram = ngram

    def advance(self, token: int):
        n = self.ngram
        bases = [(token >> (2 * j)) & 3 for j in range(n - 1, -1, -1)]
        self.context = np.concatenate([self.context[n:], np.array(bases, dtype=np.uint8)])
        self.memory = self.pending
        self.pending = None


class GeneformerEntropyModel(EntropyModel):
    """Adapter from a checkpointed model to the codec's session interface.

    Parameters are always taken from the serialized checkpoint so the
    encoder and any later decoder that loads the same file compute
    identical probabilities.
    """

    kind = "geneformer"

    def __init__(self, model: GeneformerModel | bytes):
        blob = model if isinstance(model, (bytes, bytearray)) else save_checkpoint(model)
        self.blob = bytes(blob)
        self.model = load_checkpoint(self.blob)
        self.ngram = self.model.config.ngram
        self.context_len = self.model.config.context_len

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    def descriptor(self):
        return {"kind": self.kind, "ngram": self.ngram}

    def fingerprint(self) -> bytes:
        return checkpoint_fingerprint(self.blob)

    def new_session(self, fragment):
        fragment = np.asarray(fragment, dtype=np.uint8)
        if fragment.size != self.context_len:
            raise BadContextLength(f"fragment of {fragment.size} bases, model needs {self.context_len}")
        mem = self.model.initial_memory(1)
        return GeneformerSession(fragment, None if mem is None else mem[0], self.ngram)

    def predict(self, sessions):
        ctx = np.stack([s.context for s in sessions])
        mem = None
        if self.model.config.latent_array:
            mem = np.stack([s.memory for s in sessions])
        probs, h_t = self.model.predict_proba(ctx, mem)
        nxt = self.model.next_memory(mem, h_t)
        for i, s in enumerate(sessions):
            s.pending = None if nxt is None else nxt[i]
        return probs
