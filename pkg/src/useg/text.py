"""Caption tokenizer, a small contextual encoder and masked mean pooling."""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence

import numpy as np

from useg.autograd import ParameterStore, Tensor, constant, fan_in_uniform, ops
from useg.errors import AllPadded, EmptyText, ShapeMismatch

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
MAX_LEN = 32

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def split_words(text: str) -> List[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    def __init__(self, token_to_id: Mapping[str, int]):
        ids = sorted(token_to_id.values())
        if ids != list(range(len(ids))):
            raise ValueError("vocabulary ids must be dense in [0, V)")
        if token_to_id.get(PAD_TOKEN) != PAD or token_to_id.get(UNK_TOKEN) != UNK:
            raise ValueError("PAD and UNK must hold ids 0 and 1")
        self.token_to_id = dict(token_to_id)
        self.id_to_token = {i: t for t, i in token_to_id.items()}

    @classmethod
    def build(cls, captions: Iterable[str]) -> "Vocabulary":
        words = sorted({w for c in captions for w in split_words(c)})
        mapping = {PAD_TOKEN: PAD, UNK_TOKEN: UNK}
        for w in words:
            mapping[w] = len(mapping)
        return cls(mapping)

    def __len__(self) -> int:
        return len(self.token_to_id)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and other.token_to_id == self.token_to_id

    def to_json(self) -> str:
        return json.dumps(self.token_to_id, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple
    mask: tuple

    @property
    def n_real(self) -> int:
        return sum(self.mask)


def tokenize(text: str, vocab: Vocabulary, max_len: int = MAX_LEN) -> TokenSequence:
    if not text.strip():
        raise EmptyText("caption is empty after trimming whitespace")
    words = split_words(text)
    if not words:
        # punctuation-only input still yields one token
        words = [text.strip()]
    ids = [vocab.token_to_id.get(w, UNK) for w in words][:max_len]
    n = len(ids)
    return TokenSequence(tuple(ids + [PAD] * (max_len - n)), tuple([1] * n + [0] * (max_len - n)))


def detokenize(tokens: TokenSequence, vocab: Vocabulary) -> str:
    return " ".join(vocab.id_to_token[i] for i, m in zip(tokens.ids, tokens.mask) if m)


@dataclass(frozen=True)
class TextConfig:
    vocab_size: int
    dim: int = 64
    max_len: int = MAX_LEN
    n_blocks: int = 2
    ffn_mult: int = 2


def init_text_params(store: ParameterStore, cfg: TextConfig, rng: np.random.Generator, prefix: str = "text") -> None:
    d, f = cfg.dim, cfg.dim * cfg.ffn_mult
    store.add(f"{prefix}.tok_emb", rng.normal(0.0, 1.0, (cfg.vocab_size, d)))
    store.add(f"{prefix}.pos_emb", rng.normal(0.0, 0.1, (cfg.max_len, d)))
    for i in range(cfg.n_blocks):
        p = f"{prefix}.block{i}"
        for ln in ("ln1", "ln2"):
            store.add(f"{p}.{ln}.g", np.ones(d))
            store.add(f"{p}.{ln}.b", np.zeros(d))
        for w in ("wq", "wk", "wv", "wo"):
            store.add(f"{p}.{w}", fan_in_uniform(rng, (d, d), d))
        store.add(f"{p}.bo", np.zeros(d))
        store.add(f"{p}.ffn1.w", fan_in_uniform(rng, (d, f), d))
        store.add(f"{p}.ffn1.b", np.zeros(f))
        store.add(f"{p}.ffn2.w", fan_in_uniform(rng, (f, d), f))
        store.add(f"{p}.ffn2.b", np.zeros(d))


def _ln(x: Tensor, params, name: str) -> Tensor:
    return ops.layer_norm(x, axis=-1) * params[f"{name}.g"] + params[f"{name}.b"]


def _block(x: Tensor, key_bias: Tensor, params, dim: int) -> Tensor:
    h = _ln(x, params, "ln1")
    q, k, v = (ops.matmul(h, params[w]) for w in ("wq", "wk", "wv"))
    scores = ops.matmul(q, ops.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dim)) + key_bias
    att = ops.matmul(ops.softmax(scores, axis=-1), v)
    x = x + ops.linear(att, params["wo"], params["bo"])
    h = _ln(x, params, "ln2")
    h = ops.silu(ops.linear(h, params["ffn1.w"], params["ffn1.b"]))
    return x + ops.linear(h, params["ffn2.w"], params["ffn2.b"])


def encode_text(tokens: Sequence[TokenSequence], params, cfg: TextConfig) -> Tensor:
    """Batch of token sequences -> (batch, dim) pooled embeddings.

    Sequences are cropped to the longest real length in the batch before
    encoding, so trailing padding never enters the computation.
    """
    if isinstance(tokens, TokenSequence):
        tokens = [tokens]
    if not tokens:
        raise ShapeMismatch("encode_text needs at least one sequence")
    lengths = [t.n_real for t in tokens]
    if min(lengths) == 0:
        raise AllPadded("a token sequence has no real tokens")
    L = max(lengths)
    if L > cfg.max_len:
        raise ShapeMismatch(f"sequence length {L} exceeds positional table {cfg.max_len}")
    dtype = params["tok_emb"].dtype
    ids = np.array([t.ids[:L] for t in tokens])
    mask = np.array([t.mask[:L] for t in tokens], dtype=dtype)
    if np.any(ids >= cfg.vocab_size):
        raise ShapeMismatch("token id outside the vocabulary")

    onehot = constant(np.eye(cfg.vocab_size, dtype=dtype)[ids])
    pos = _crop_positions(params["pos_emb"], L)
    x = ops.matmul(onehot, params["tok_emb"]) + pos
    key_bias = constant(((mask[:, None, :] - 1.0) * 1e9).astype(dtype))
    for i in range(cfg.n_blocks):
        x = _block(x, key_bias, params.scope(f"block{i}"), cfg.dim)
    return mean_pool(x, mask)


def _crop_positions(pos: Tensor, L: int) -> Tensor:
    # rows [0, L) of the table via a 0/1 selector, exact and differentiable
    sel = np.eye(pos.shape[0], dtype=pos.dtype)[:L]
    return ops.reshape(ops.matmul(constant(sel), pos), (1, L, pos.shape[1]))


def mean_pool(x: Tensor, mask: np.ndarray) -> Tensor:
    """Average token vectors over positions where ``mask`` is 1."""
    mask = np.asarray(mask, dtype=x.dtype)
    counts = mask.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise AllPadded("cannot pool a sequence with no real tokens")
    summed = ops.sum_(x * constant(mask[:, :, None]), axis=1)
    return summed * constant(1.0 / counts)
