"""Vision-language decoder: self-attention over pixel tokens, cross-attention
into text tokens, pre-norm residual layers with a two-layer MLP."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass
class DecoderConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_ffn: int = 128

    def validate(self, width):
        if width % self.n_heads:
            raise ValueError(f"width {width} not divisible by {self.n_heads} heads")


_pos_cache = {}


def sine_pos_1d(length, width):
    """Fixed sinusoidal encoding [length, width]; parameter-free."""
    if width % 2:
        raise ValueError(f"width {width} must be even")
    key = ("1d", length, width)
    if key not in _pos_cache:
        pos = np.arange(length, dtype=np.float64)[:, None]
        i = np.arange(width // 2, dtype=np.float64)
        freq = 1.0 / (10000.0 ** (2.0 * i / width))
        out = np.empty((length, width))
        out[:, 0::2] = np.sin(pos * freq)
        out[:, 1::2] = np.cos(pos * freq)
        _pos_cache[key] = out
    return _pos_cache[key]


def sine_pos_2d(h, w, width):
    """Fixed 2D encoding [h*w, width]: first half encodes x, second half y."""
    if width % 4:
        raise ValueError(f"width {width} must be divisible by 4")
    key = ("2d", h, w, width)
    if key not in _pos_cache:
        half = width // 2
        ex = sine_pos_1d(w, half)  # [w, half]
        ey = sine_pos_1d(h, half)  # [h, half]
        out = np.empty((h, w, width))
        out[:, :, :half] = ex[None, :, :]
        out[:, :, half:] = ey[:, None, :]
        _pos_cache[key] = out.reshape(h * w, width)
    return _pos_cache[key]


class MultiHeadAttention:
    """Scaled dot-product attention with per-head projections.

    Positional encodings are added to the query/key inputs only; values see
    the raw sequence, so zeroed output projections keep the residual stream
    untouched.
    """

    def __init__(self, store, prefix, width, n_heads):
        if width % n_heads:
            raise ValueError(f"width {width} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.width = width
        self.wq = store.uniform(f"{prefix}.wq", (width, width), width)
        self.wk = store.uniform(f"{prefix}.wk", (width, width), width)
        self.wv = store.uniform(f"{prefix}.wv", (width, width), width)
        self.wo = store.uniform(f"{prefix}.wo", (width, width), width)
        self.bq = store.zeros(f"{prefix}.bq", (width,))
        self.bk = store.zeros(f"{prefix}.bk", (width,))
        self.bv = store.zeros(f"{prefix}.bv", (width,))
        self.bo = store.zeros(f"{prefix}.bo", (width,))

    def __call__(self, q_in, kv_in, pos_q=None, pos_k=None, mask=None, collect=None):
        h = self.n_heads
        c = self.width
        d = c // h
        n = q_in.data.shape[0]
        m = kv_in.data.shape[0]

        q_src = ag.add(q_in, Tensor(pos_q)) if pos_q is not None else q_in
        k_src = ag.add(kv_in, Tensor(pos_k)) if pos_k is not None else kv_in
        q = ag.linear(q_src, self.wq.tensor, self.bq.tensor)
        k = ag.linear(k_src, self.wk.tensor, self.bk.tensor)
        v = ag.linear(kv_in, self.wv.tensor, self.bv.tensor)

        q = ag.transpose(ag.reshape(q, (n, h, d)), (1, 0, 2))   # [h,n,d]
        kt = ag.transpose(ag.reshape(k, (m, h, d)), (1, 2, 0))  # [h,d,m]
        v = ag.transpose(ag.reshape(v, (m, h, d)), (1, 0, 2))   # [h,m,d]

        scores = ag.scale(ag.matmul(q, kt), 1.0 / math.sqrt(d))  # [h,n,m]
        if mask is not None:
            att = ag.masked_softmax(scores, mask, axis=-1)
        else:
            att = ag.softmax(scores, axis=-1)
        if collect is not None:
            collect.append(att)
        out = ag.matmul(att, v)                                  # [h,n,d]
        out = ag.reshape(ag.transpose(out, (1, 0, 2)), (n, c))
        return ag.linear(out, self.wo.tensor, self.bo.tensor)


class _LayerNormParams:
    def __init__(self, store, prefix, width):
        self.gain = store.ones(f"{prefix}.gain", (width,))
        self.bias = store.zeros(f"{prefix}.bias", (width,))

    def __call__(self, x):
        return ag.layer_norm(x, self.gain.tensor, self.bias.tensor)


class DecoderLayer:
    def __init__(self, store, prefix, width, cfg: DecoderConfig):
        self.ln1 = _LayerNormParams(store, f"{prefix}.ln1", width)
        self.ln2 = _LayerNormParams(store, f"{prefix}.ln2", width)
        self.ln3 = _LayerNormParams(store, f"{prefix}.ln3", width)
        self.self_attn = MultiHeadAttention(store, f"{prefix}.self_attn", width, cfg.n_heads)
        self.cross_attn = MultiHeadAttention(store, f"{prefix}.cross_attn", width, cfg.n_heads)
        self.w1 = store.uniform(f"{prefix}.mlp.w1", (width, cfg.d_ffn), width)
        self.b1 = store.zeros(f"{prefix}.mlp.b1", (cfg.d_ffn,))
        self.w2 = store.uniform(f"{prefix}.mlp.w2", (cfg.d_ffn, width), cfg.d_ffn)
        self.b2 = store.zeros(f"{prefix}.mlp.b2", (width,))

    def __call__(self, x, text, pos_v, pos_t, collect=None):
        h = self.ln1(x)
        x = ag.add(x, self.self_attn(h, h, pos_q=pos_v, pos_k=pos_v, collect=collect))
        h = self.ln2(x)
        x = ag.add(x, self.cross_attn(h, text.tokens, pos_q=pos_v, pos_k=pos_t,
                                      mask=text.pad_mask, collect=collect))
        h = self.ln3(x)
        mlp = ag.linear(ag.relu(ag.linear(h, self.w1.tensor, self.b1.tensor)),
                        self.w2.tensor, self.b2.tensor)
        return ag.add(x, mlp)


class VLDecoder:
    """n pre-norm layers evolving the pixel sequence against the text tokens.

    Sine encodings are computed once for the input geometry and fed to the
    first layer's attention query/key inputs only; they never enter the
    residual stream, so zero output projections make the decoder an exact
    identity.
    """

    def __init__(self, store, width, cfg: DecoderConfig):
        cfg.validate(width)
        self.cfg = cfg
        self.width = width
        self.layers = [DecoderLayer(store, f"decoder.layer{i}", width, cfg)
                       for i in range(cfg.n_layers)]

    def __call__(self, vis_seq, grid_hw, text, use_pos=True, collect=None):
        h, w = grid_hw
        if vis_seq.data.shape[0] != h * w:
            raise ValueError(f"sequence length {vis_seq.data.shape[0]} != grid {h}x{w}")
        pos_v = sine_pos_2d(h, w, self.width) if use_pos else None
        pos_t = sine_pos_1d(text.tokens.data.shape[0], self.width) if use_pos else None
        x = vis_seq
        for i, layer in enumerate(self.layers):
            x = layer(x, text, pos_v if i == 0 else None, pos_t if i == 0 else None,
                      collect=collect)
        return x
