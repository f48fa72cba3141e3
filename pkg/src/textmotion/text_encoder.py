"""Text encoder interface with a small trainable stub standing in for a pretrained encoder.

The stub tokenizes on lowercase alphanumeric runs, hashes each word into a fixed
vocabulary, and runs a two-layer bidirectional transformer. The global feature
is the mean of the final token embeddings.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from . import numerics as nx
from .errors import ContractError, FormatError, ShapeError
from .layers import INIT_STD, LayerNorm, StandardLayer

_WORD = re.compile(r"[a-z0-9]+")
HASH_KEY = b"textmotion-v1"
MAX_TEXT_TOKENS = 64


def tokenize(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def word_id(word: str, vocab: int) -> int:
    h = hashlib.blake2b(word.encode(), digest_size=8, key=HASH_KEY).digest()
    return int.from_bytes(h, "little") % vocab


@dataclass
class TextEncoding:
    token_embeddings: torch.Tensor  # (n_t, d)
    global_feature: torch.Tensor  # (d,)

    @property
    def token_count(self) -> int:
        return self.token_embeddings.shape[0]

    def save(self, path: str | Path) -> None:
        nx.dump_tensor(path, self.token_embeddings)


class TextEncoder(nn.Module):
    def __init__(self, width: int, vocab: int = 4096, n_layers: int = 2, n_heads: int = 4,
                 activation: str = "relu"):
        super().__init__()
        self.vocab, self.width = vocab, width
        self.table = nn.Parameter(torch.randn(vocab, width) * INIT_STD)
        self.pos = nn.Parameter(torch.randn(MAX_TEXT_TOKENS, width) * INIT_STD)
        self.layers = nn.ModuleList(StandardLayer(width, n_heads, 4 * width, activation)
                                    for _ in range(n_layers))
        self.ln = LayerNorm(width)

    def ids(self, text: str) -> list[int]:
        words = tokenize(text)
        if not words:
            raise ContractError(f"text {text!r} has no tokens")
        if len(words) > MAX_TEXT_TOKENS:
            words = words[:MAX_TEXT_TOKENS]
        return [word_id(w, self.vocab) for w in words]

    def encode_batch(self, texts: list[str]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(E_t (B, n_max, d), valid mask (B, n_max), e_t (B, d)) for a list of captions."""
        ids = [self.ids(t) for t in texts]
        n = max(len(i) for i in ids)
        B = len(ids)
        tok = torch.zeros(B, n, dtype=torch.int64)
        valid = torch.zeros(B, n, dtype=torch.bool)
        for b, row in enumerate(ids):
            tok[b, :len(row)] = torch.tensor(row)
            valid[b, :len(row)] = True
        h = nx.embedding_lookup(self.table, tok) + self.pos[:n]
        for layer in self.layers:
            h = layer(h, valid)
        h = self.ln(h)
        w = valid.to(h.dtype)[..., None]
        e_t = (h * w).sum(1) / w.sum(1)
        return h, valid, e_t

    def encode_text(self, text: str) -> TextEncoding:
        E, valid, e = self.encode_batch([text])
        return TextEncoding(E[0], e[0])


def import_external_embeddings(path: str | Path, width: int) -> TextEncoding:
    """Token embeddings from a tensor dump; bypasses the stub encoder."""
    try:
        E = nx.load_tensor(path)
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from None
    if E.dim() != 2:
        raise ShapeError(f"embedding file must hold an (n_t, d) matrix, got shape {tuple(E.shape)}")
    if E.shape[0] == 0:
        raise ShapeError("embedding file holds zero tokens")
    if E.shape[1] != width:
        raise ShapeError(f"embedding width {E.shape[1]} does not match model width {width}")
    E = E.float()
    return TextEncoding(E, E.mean(0))
