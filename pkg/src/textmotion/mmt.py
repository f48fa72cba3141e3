"""Multi-path motion transformer.

Input slots are [e_t][E_t rows][E_ctx][E_m rows] plus learned positions. The
first ``first_half`` layers are standard pre-norm blocks. In the remaining
layers the feed-forward stage is replaced by three expert pools: each token
goes through the pool of its own modality and through the shared cross-modal
pool; the pool of the other modality contributes a zero block. The three
blocks are concatenated and projected back to the model width.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import torch
import torch.nn as nn

from . import numerics as nx
from .config import MmtConfig
from .descriptor import context_embedding_batched
from .errors import ContractError, ShapeError
from .layers import INIT_STD, LayerNorm, Linear, MultiHeadAttention, StandardLayer
from .text_encoder import MAX_TEXT_TOKENS, TextEncoder

TEXT, MOTION, UNTAGGED = 0, 1, -1


class PathwayMoe(nn.Module):
    """Gated pool of feed-forward experts; all experts run, the gate blends them."""

    def __init__(self, d: int, d_ff: int, n_experts: int, gating: str = "dense", top_k: int = 1,
                 activation: str = "relu"):
        super().__init__()
        self.n_experts, self.gating, self.top_k, self.activation = n_experts, gating, top_k, activation
        self.w1 = nn.Parameter(torch.randn(n_experts, d, d_ff) * INIT_STD)
        self.b1 = nn.Parameter(torch.zeros(n_experts, d_ff))
        self.w2 = nn.Parameter(torch.randn(n_experts, d_ff, d) * INIT_STD)
        self.b2 = nn.Parameter(torch.zeros(n_experts, d))
        self.gate = Linear(d, n_experts)

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        logits = self.gate(x)
        if self.gating == "sparse" and self.top_k < self.n_experts:
            kth = torch.topk(logits, self.top_k, dim=-1).values[..., -1:]
            logits = logits.masked_fill(logits < kth, float("-inf"))
        return nx.softmax(logits, axis=-1)

    def expert_outputs(self, x: torch.Tensor) -> torch.Tensor:
        """(E, N, d) outputs of every expert for rows of ``x`` (N, d)."""
        h = torch.einsum("nd,edf->enf", x, self.w1) + self.b1[:, None, :]
        h = nx.activation(h, self.activation)
        return torch.einsum("enf,efo->eno", h, self.w2) + self.b2[:, None, :]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        shape = x.shape
        flat = x.reshape(-1, shape[-1])
        g = self.gates(flat)
        y = torch.einsum("ne,eno->no", g, self.expert_outputs(flat))
        return y.reshape(shape)


class MultipathFfn(nn.Module):
    def __init__(self, cfg: MmtConfig):
        super().__init__()
        d, f = cfg.width, cfg.ffn_mult * cfg.width
        mk = lambda n: PathwayMoe(d, f, n, cfg.gating, cfg.top_k, cfg.activation)  # noqa: E731
        self.motion = mk(cfg.experts_motion)
        self.text = mk(cfg.experts_text) if cfg.use_text_path else None
        self.cross = mk(cfg.experts_cross) if cfg.use_cross_path else None
        self.proj = Linear(3 * d, d)

    def forward(self, x: torch.Tensor, modality: torch.Tensor, valid: torch.Tensor,
                pretrain: bool = False) -> torch.Tensor:
        """``modality`` (B, S) in {TEXT, MOTION}; ``pretrain`` sends motion tokens down every pathway."""
        if bool(((modality != TEXT) & (modality != MOTION) & valid).any()):
            raise ContractError("multipath layer received a slot without a modality tag")
        is_motion = (modality == MOTION).to(x.dtype)[..., None]
        is_text = (modality == TEXT).to(x.dtype)[..., None]
        zeros = torch.zeros_like(x)
        u_motion = self.motion(x) * is_motion
        if self.text is None:
            u_text = zeros
        else:
            u_text = self.text(x) * (torch.ones_like(is_text) if pretrain else is_text)
        u_cross = zeros if self.cross is None else self.cross(x)
        return self.proj(torch.cat([u_motion, u_text, u_cross], dim=-1))


class MultipathLayer(nn.Module):
    def __init__(self, cfg: MmtConfig):
        super().__init__()
        d = cfg.width
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, cfg.n_heads)
        self.ln2 = LayerNorm(d)
        self.ffn = MultipathFfn(cfg)

    def forward(self, h: torch.Tensor, key_valid: torch.Tensor | None = None,
                modality: torch.Tensor | None = None, pretrain: bool = False) -> torch.Tensor:
        if modality is None:
            raise ContractError("multipath layer needs modality tags")
        h = h + self.attn(self.ln1(h), key_valid)
        valid = torch.ones_like(modality, dtype=torch.bool) if key_valid is None else key_valid
        return h + self.ffn(self.ln2(h), modality, valid, pretrain)


@dataclass
class TokenLayout:
    modality: torch.Tensor  # (B, S)
    valid: torch.Tensor  # (B, S)
    positions: torch.Tensor  # (B, S)
    motion_start: int  # first motion slot (same for every sample in the batch)


class MultipathTransformer(nn.Module):
    def __init__(self, cfg: MmtConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or MmtConfig()
        cfg.validate()
        d = cfg.width
        # rows: codes, End, Mask, Pad
        self.motion_table = nn.Parameter(torch.randn(cfg.n_codes + 3, d) * INIT_STD)
        self.pos = nn.Parameter(torch.randn(cfg.max_positions, d) * INIT_STD)
        layers: list[nn.Module] = [StandardLayer(d, cfg.n_heads, cfg.ffn_mult * d, cfg.activation)
                                   for _ in range(cfg.first_half)]
        layers += [MultipathLayer(cfg) for _ in range(cfg.second_half)]
        self.layers = nn.ModuleList(layers)
        self.ln_f = LayerNorm(d)
        self.head = Linear(d, cfg.vocab)

    def embed_motion(self, ids: torch.Tensor) -> torch.Tensor:
        return nx.embedding_lookup(self.motion_table, ids)

    def build_input(
        self,
        motion_ids: torch.Tensor,
        motion_valid: torch.Tensor | None = None,
        text: tuple[torch.Tensor, torch.Tensor, torch.Tensor] | None = None,
    ) -> tuple[torch.Tensor, TokenLayout]:
        """Hidden states (B, S, d) and layout for a padded batch.

        ``text`` is (E_t (B, n_t, d), valid (B, n_t), e_t (B, d)); None gives the
        motion-only layout used in pretraining.
        """
        cfg = self.cfg
        B, n_m = motion_ids.shape
        if motion_valid is None:
            motion_valid = torch.ones(B, n_m, dtype=torch.bool)
        E_m = self.embed_motion(motion_ids)
        parts, valids, tags = [], [], []
        if text is not None:
            E_t, t_valid, e_t = text
            if E_t.shape[-1] != cfg.width:
                raise ShapeError(f"text width {E_t.shape[-1]} != model width {cfg.width}")
            one = torch.ones(B, 1, dtype=torch.bool)
            parts += [e_t[:, None, :], E_t]
            valids += [one, t_valid]
            if cfg.use_descriptor:
                parts.append(context_embedding_batched(E_m, motion_valid, E_t, t_valid)[:, None, :])
                valids.append(one)
        n_text = sum(p.shape[1] for p in parts)
        parts.append(E_m)
        valids.append(motion_valid)
        h = torch.cat(parts, dim=1)
        valid = torch.cat(valids, dim=1)
        modality = torch.full(valid.shape, MOTION, dtype=torch.int64)
        modality[:, :n_text] = TEXT
        positions = (torch.cumsum(valid.to(torch.int64), dim=1) - 1).clamp_min(0)
        if int(positions.max()) >= cfg.max_positions:
            raise ShapeError(f"sequence of {int(positions.max()) + 1} slots exceeds "
                             f"{cfg.max_positions} positions")
        h = h + nx.embedding_lookup(self.pos, positions)
        return h, TokenLayout(modality, valid, positions, n_text)

    def forward(
        self,
        motion_ids: torch.Tensor,
        motion_valid: torch.Tensor | None = None,
        text: tuple[torch.Tensor, torch.Tensor, torch.Tensor] | None = None,
    ) -> torch.Tensor:
        """Logits (B, n_motion, K + 1) over codes and End for the motion slots."""
        h, layout = self.build_input(motion_ids, motion_valid, text)
        pretrain = text is None
        for layer in self.layers:
            h = layer(h, layout.valid, modality=layout.modality, pretrain=pretrain)
        h = self.ln_f(h[:, layout.motion_start:])
        return self.head(h)


def layer_param_count(cfg: MmtConfig, multipath: bool) -> int:
    d, f = cfg.width, cfg.ffn_mult * cfg.width
    attn = 4 * d * d + 4 * d
    norms = 4 * d
    if not multipath:
        return norms + attn + 2 * d * f + f + d
    experts = [cfg.experts_motion]
    experts += [cfg.experts_text] if cfg.use_text_path else []
    experts += [cfg.experts_cross] if cfg.use_cross_path else []
    pools = sum(e * (2 * d * f + f + d) + e * (d + 1) for e in experts)
    return norms + attn + pools + 3 * d * d + d


def mmt_param_count(cfg: MmtConfig) -> int:
    """Closed-form parameter count of ``MultipathTransformer(cfg)``."""
    d = cfg.width
    embed = (cfg.n_codes + 3) * d + cfg.max_positions * d
    layers = cfg.first_half * layer_param_count(cfg, False) + cfg.second_half * layer_param_count(cfg, True)
    return embed + layers + 2 * d + d * cfg.vocab + cfg.vocab


def text_param_count(cfg: MmtConfig) -> int:
    d = cfg.width
    # the text stub always uses a 4x feed-forward, independent of cfg.ffn_mult
    stub = dataclasses.replace(cfg, ffn_mult=4)
    return cfg.text_vocab * d + MAX_TEXT_TOKENS * d + cfg.text_layers * layer_param_count(stub, False) + 2 * d


class TextMotionModel(nn.Module):
    """Text stub plus multi-path transformer, trained jointly in the text-conditioned stage."""

    def __init__(self, cfg: MmtConfig | None = None):
        super().__init__()
        self.cfg = cfg or MmtConfig()
        self.mmt = MultipathTransformer(self.cfg)
        self.text_encoder = TextEncoder(self.cfg.width, self.cfg.text_vocab, self.cfg.text_layers,
                                        self.cfg.text_heads, self.cfg.activation)

    def forward(self, motion_ids, motion_valid=None, text=None):
        return self.mmt(motion_ids, motion_valid, text)

    def encode_texts(self, texts: list[str]):
        return self.text_encoder.encode_batch(texts)
