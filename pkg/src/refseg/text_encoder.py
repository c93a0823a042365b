"""Expression tokenizer and causal transformer text encoder.

Produces per-token features plus a global sentence vector pooled at the
end-of-sequence position. The vocabulary is a closed, word-level map built
from the training corpus.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .decoder import MultiHeadAttention, _LayerNormParams
from .errors import DataError

PAD, SOS, EOS = 0, 1, 2
_RESERVED = {"<pad>": PAD, "<sos>": SOS, "<eos>": EOS}

# encoder depth/heads are fixed at desk scale
TEXT_LAYERS = 2
TEXT_HEADS = 4


@dataclass
class Vocab:
    token_to_id: dict

    @property
    def size(self):
        return len(self.token_to_id)

    def to_json(self) -> str:
        return json.dumps(self.token_to_id, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(json.loads(text))


@dataclass
class TokenSeq:
    ids: np.ndarray
    eos_pos: int


@dataclass
class TextFeatures:
    tokens: Tensor       # [L_max, C]
    global_vec: Tensor   # [C']
    pad_mask: np.ndarray = field(repr=False)  # True past the EOS position


def build_vocab(corpus) -> Vocab:
    """Lower-cased whitespace tokens, deterministically ordered."""
    corpus = list(corpus)
    if not corpus:
        raise DataError("empty corpus")
    words = sorted({w for expr in corpus for w in expr.lower().split()})
    mapping = dict(_RESERVED)
    for i, w in enumerate(words):
        mapping[w] = len(_RESERVED) + i
    return Vocab(mapping)


def tokenize(expr: str, vocab: Vocab, l_max: int) -> TokenSeq:
    words = expr.lower().split()
    if len(words) > l_max - 2:
        raise DataError(f"expression longer than {l_max - 2} tokens: {expr!r}")
    ids = np.full(l_max, PAD, dtype=np.int64)
    ids[0] = SOS
    for i, w in enumerate(words):
        wid = vocab.token_to_id.get(w)
        if wid is None:
            raise DataError(f"out-of-vocabulary token {w!r}")
        ids[i + 1] = wid
    eos_pos = len(words) + 1
    ids[eos_pos] = EOS
    return TokenSeq(ids=ids, eos_pos=eos_pos)


_causal_cache = {}


def _causal_mask(n):
    if n not in _causal_cache:
        _causal_cache[n] = np.triu(np.ones((n, n), dtype=bool), k=1)
    return _causal_cache[n]


class TextEncoder:
    def __init__(self, store, vocab_size, l_max, width, out_width,
                 n_layers=TEXT_LAYERS, n_heads=TEXT_HEADS):
        self.l_max = l_max
        self.width = width
        self.embed = store.uniform("text.embed", (vocab_size, width), width)
        self.pos = store.uniform("text.pos", (l_max, width), width)
        self.layers = []
        for i in range(n_layers):
            p = f"text.layer{i}"
            self.layers.append({
                "ln1": _LayerNormParams(store, f"{p}.ln1", width),
                "attn": MultiHeadAttention(store, f"{p}.attn", width, n_heads),
                "ln2": _LayerNormParams(store, f"{p}.ln2", width),
                "w1": store.uniform(f"{p}.mlp.w1", (width, 4 * width), width),
                "b1": store.zeros(f"{p}.mlp.b1", (4 * width,)),
                "w2": store.uniform(f"{p}.mlp.w2", (4 * width, width), 4 * width),
                "b2": store.zeros(f"{p}.mlp.b2", (width,)),
            })
        self.ln_f = _LayerNormParams(store, "text.ln_f", width)
        self.w_out = store.uniform("text.w_out", (width, out_width), width)
        self.b_out = store.zeros("text.b_out", (out_width,))

    def __call__(self, seq: TokenSeq) -> TextFeatures:
        mask = _causal_mask(self.l_max)
        x = ag.add(ag.embedding(self.embed.tensor, seq.ids), self.pos.tensor)
        for lyr in self.layers:
            h = lyr["ln1"](x)
            x = ag.add(x, lyr["attn"](h, h, mask=mask))
            h = lyr["ln2"](x)
            mlp = ag.linear(ag.relu(ag.linear(h, lyr["w1"].tensor, lyr["b1"].tensor)),
                            lyr["w2"].tensor, lyr["b2"].tensor)
            x = ag.add(x, mlp)
        tokens = self.ln_f(x)
        pooled = ag.take_row(tokens, seq.eos_pos)
        global_vec = ag.linear(pooled, self.w_out.tensor, self.b_out.tensor)
        pad_mask = np.arange(self.l_max) > seq.eos_pos
        return TextFeatures(tokens=tokens, global_vec=global_vec, pad_mask=pad_mask)
