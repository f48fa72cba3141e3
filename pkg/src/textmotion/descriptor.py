"""Context token summarizing motion under a text query.

E_ctx = mean over motion tokens of softmax_text(E_m E_t^T) E_t. The softmax runs
over text tokens, so every row of the weighted sum is a convex combination of
text embeddings.
"""

from __future__ import annotations

import torch

from . import numerics as nx
from .errors import ShapeError


def context_embedding(E_m: torch.Tensor, E_t: torch.Tensor) -> torch.Tensor:
    """(n_m, d), (n_t, d) -> (d,)."""
    if E_m.dim() != 2 or E_t.dim() != 2 or E_m.shape[1] != E_t.shape[1]:
        raise ShapeError(f"motion {tuple(E_m.shape)} and text {tuple(E_t.shape)} embeddings must share width")
    if E_m.shape[0] < 1 or E_t.shape[0] < 1:
        raise ShapeError("context embedding needs at least one motion and one text token")
    weights = nx.softmax(nx.matmul(E_m, E_t.T), axis=-1)
    return nx.matmul(weights, E_t).mean(0)


def context_embedding_batched(
    E_m: torch.Tensor, m_valid: torch.Tensor, E_t: torch.Tensor, t_valid: torch.Tensor
) -> torch.Tensor:
    """Padded-batch version: (B, n_m, d), (B, n_m), (B, n_t, d), (B, n_t) -> (B, d)."""
    if E_m.shape[-1] != E_t.shape[-1]:
        raise ShapeError(f"motion width {E_m.shape[-1]} != text width {E_t.shape[-1]}")
    scores = E_m @ E_t.transpose(1, 2)
    scores = scores.masked_fill(~t_valid[:, None, :], float("-inf"))
    rows = nx.softmax(scores, axis=-1) @ E_t
    w = m_valid.to(rows.dtype)[..., None]
    return (rows * w).sum(1) / w.sum(1).clamp_min(1.0)
