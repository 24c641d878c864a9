"""Hash-vocabulary tokenizer and the toy text transformer."""

from __future__ import annotations

import re

import numpy as np

from . import nn
from . import tensor as T
from .model import MAX_TOKENS, VOCAB_SIZE, ModelWeights
from .tensor import ContractError, Tensor

START_ID = 0
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a_64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def token_id(word: str) -> int:
    # ids 1..VOCAB_SIZE-1; 0 is reserved for the start token
    return 1 + fnv1a_64(word.encode("utf-8")) % (VOCAB_SIZE - 1)


def tokenize(text: str) -> list[int]:
    """Lowercase, split into words and punctuation marks, hash, prepend the start id.

    Truncated to the start token plus 32 pieces.
    """
    words = _TOKEN_RE.findall(text.lower())[: MAX_TOKENS - 1]
    return [START_ID] + [token_id(w) for w in words]


def encode_token_batch(batch: list[list[int]], weights: ModelWeights) -> Tensor:
    """Encode token sequences of any lengths; returns ``(N, d)`` start-token states.

    Shorter sequences are padded and the padding is masked out of attention.
    """
    config, p = weights.config, weights.params
    if not batch or any(not ids for ids in batch):
        raise ContractError("token sequences must be non-empty")
    lengths = [len(ids) for ids in batch]
    width = max(lengths)
    if width > MAX_TOKENS:
        raise ContractError(f"token sequence longer than {MAX_TOKENS}")
    ids = np.zeros((len(batch), width), dtype=np.intp)
    for i, seq in enumerate(batch):
        ids[i, : len(seq)] = seq
    mask = nn.key_padding_mask(lengths, width) if min(lengths) < width else None

    x = p["text.tok"][ids] + p["text.pos"][:width]
    for i in range(config.text_layers):
        x = nn.block(x, p, f"text.blocks.{i}", config.heads, mask)
    x = T.layer_norm(x[:, 0, :], p["text.ln_f.g"], p["text.ln_f.b"])
    return x


def encode_text(tokens: list[int], weights: ModelWeights) -> Tensor:
    """Sentence vector ``(1, d)``: final hidden state of the start token."""
    return encode_token_batch([tokens], weights)
