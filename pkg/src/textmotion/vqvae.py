"""Multi-expert VQ-VAE: convolutional motion tokenizer with an EMA codebook."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import numerics as nx
from .config import VqConfig
from .errors import ContractError, ShapeError


class Conv(nn.Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, pad: int = 0):
        super().__init__()
        bound = 1.0 / math.sqrt(c_in * k)
        self.weight = nn.Parameter(torch.empty(c_out, c_in, k).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(c_out).uniform_(-bound, bound))
        self.stride, self.pad = stride, pad

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nx.conv1d(x, self.weight, self.stride, self.pad, self.bias)


class MultiExpertConv(nn.Module):
    """y = sum_i w_i * Conv_i(x), all experts active, w_i global learnable scalars."""

    def __init__(self, c_in: int, c_out: int, k: int, n_experts: int, stride: int = 1, pad: int = 0):
        super().__init__()
        if n_experts < 1:
            raise ContractError("a multi-expert conv needs at least one expert")
        bound = 1.0 / math.sqrt(c_in * k)
        self.weight = nn.Parameter(torch.empty(n_experts, c_out, c_in, k).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(n_experts, c_out).uniform_(-bound, bound))
        self.expert_weights = nn.Parameter(torch.full((n_experts,), 1.0 / n_experts))
        self.stride, self.pad = stride, pad

    @property
    def n_experts(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # convolution is linear in its kernel, so the weighted expert sum folds into one kernel
        w = torch.einsum("e,eoik->oik", self.expert_weights, self.weight)
        b = self.expert_weights @ self.bias
        return nx.conv1d(x, w, self.stride, self.pad, b)

    def expert_outputs(self, x: torch.Tensor) -> torch.Tensor:
        """Per-expert outputs (E, ..., C_out, T'), unweighted."""
        return torch.stack([nx.conv1d(x, self.weight[i], self.stride, self.pad, self.bias[i])
                            for i in range(self.n_experts)])


class _Block(nn.Module):
    """Three standard convolutions followed by one multi-expert convolution."""

    def __init__(self, width: int, n_experts: int, down: bool):
        super().__init__()
        self.down = down
        self.conv0 = Conv(width, width, 4, 2, 1) if down else Conv(width, width, 3, 1, 1)
        self.conv1 = Conv(width, width, 3, 1, 1)
        self.conv2 = Conv(width, width, 3, 1, 1)
        self.expert = MultiExpertConv(width, width, 3, n_experts, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.down:
            x = torch.repeat_interleave(x, 2, dim=-1)
        h = torch.relu(self.conv0(x))
        h = h + self.conv2(torch.relu(self.conv1(h)))
        return torch.relu(self.expert(h))


class Encoder(nn.Module):
    def __init__(self, cfg: VqConfig):
        super().__init__()
        self.inp = Conv(cfg.feature_dim, cfg.width, 3, 1, 1)
        self.blocks = nn.ModuleList(_Block(cfg.width, cfg.n_experts, True) for _ in range(cfg.down_stages))
        self.out = Conv(cfg.width, cfg.code_dim, 3, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.inp(x))
        for b in self.blocks:
            h = b(h)
        return self.out(h)


class Decoder(nn.Module):
    def __init__(self, cfg: VqConfig):
        super().__init__()
        self.inp = Conv(cfg.code_dim, cfg.width, 3, 1, 1)
        self.blocks = nn.ModuleList(_Block(cfg.width, cfg.n_experts, False) for _ in range(cfg.down_stages))
        self.out = Conv(cfg.width, cfg.feature_dim, 3, 1, 1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.inp(z))
        for b in self.blocks:
            h = b(h)
        return self.out(h)


def nearest_codes(z: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
    """Index of the closest code per row of ``z`` (ties resolve to the smallest index)."""
    zz = z.detach().double()
    cc = codes.detach().double()
    d = ((zz[:, None, :] - cc[None, :, :]) ** 2).sum(-1)
    return torch.argmin(d, dim=1)


class Codebook(nn.Module):
    def __init__(self, n_codes: int, code_dim: int, decay: float = 0.99,
                 dead_threshold: float = 1.0, reset_window: int = 256, eps: float = 1e-5):
        super().__init__()
        self.decay, self.dead_threshold, self.reset_window, self.eps = decay, dead_threshold, reset_window, eps
        self.register_buffer("codes", torch.zeros(n_codes, code_dim))
        self.register_buffer("ema_counts", torch.ones(n_codes))
        self.register_buffer("ema_sums", torch.zeros(n_codes, code_dim))
        self.register_buffer("idle_steps", torch.zeros(n_codes, dtype=torch.int64))
        self.register_buffer("initialized", torch.zeros((), dtype=torch.int64))

    @property
    def n_codes(self) -> int:
        return self.codes.shape[0]

    @torch.no_grad()
    def init_from(self, z: torch.Tensor, gen: torch.Generator | None = None) -> None:
        """Seed codes with batch latents (tiled with small noise if the batch is smaller than K)."""
        z = z.detach()
        K = self.n_codes
        if z.shape[0] < K:
            reps = -(-K // z.shape[0])
            z = z.repeat(reps, 1)
            z = z + 0.01 / math.sqrt(z.shape[1]) * torch.randn(z.shape, generator=gen, dtype=z.dtype)
        pick = torch.randperm(z.shape[0], generator=gen)[:K]
        self.codes.copy_(z[pick])
        self.ema_sums.copy_(self.codes)
        self.ema_counts.fill_(1.0)
        self.idle_steps.zero_()
        self.initialized.fill_(1)

    def quantize(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(indices, straight-through quantized latents, commitment loss) for rows of ``z``."""
        idx = nearest_codes(z, self.codes)
        zq = nx.embedding_lookup(self.codes, idx)
        commit = F.mse_loss(z, zq.detach()) if z.numel() else z.sum()
        zq_st = z + (zq - z).detach()
        return idx, zq_st, commit

    @torch.no_grad()
    def ema_update(self, z: torch.Tensor, idx: torch.Tensor) -> None:
        if z.shape[0] == 0:
            return
        z = z.detach().to(self.codes.dtype)
        counts = torch.bincount(idx, minlength=self.n_codes).to(self.codes.dtype)
        sums = torch.zeros_like(self.ema_sums).index_add_(0, idx, z)
        g = self.decay
        self.ema_counts.mul_(g).add_(counts, alpha=1 - g)
        self.ema_sums.mul_(g).add_(sums, alpha=1 - g)
        self.codes.copy_(self.ema_sums / self.ema_counts.clamp_min(self.eps)[:, None])
        self.idle_steps.add_(1)
        self.idle_steps[counts > 0] = 0

    @torch.no_grad()
    def reset_dead_codes(self, z: torch.Tensor, gen: torch.Generator | None = None) -> int:
        """Move codes that are both rarely and not recently used onto random batch latents."""
        if z.shape[0] == 0:
            return 0
        dead = (self.ema_counts < self.dead_threshold) & (self.idle_steps >= self.reset_window)
        n = int(dead.sum())
        if n == 0:
            return 0
        pick = torch.randint(0, z.shape[0], (n,), generator=gen)
        fresh = z.detach().to(self.codes.dtype)[pick]
        self.codes[dead] = fresh
        self.ema_sums[dead] = fresh
        self.ema_counts[dead] = 1.0
        self.idle_steps[dead] = 0
        return n


class VqVae(nn.Module):
    def __init__(self, cfg: VqConfig | None = None):
        super().__init__()
        self.cfg = cfg or VqConfig()
        self.encoder = Encoder(self.cfg)
        self.decoder = Decoder(self.cfg)
        self.codebook = Codebook(self.cfg.n_codes, self.cfg.code_dim, self.cfg.ema_decay,
                                 self.cfg.dead_threshold, self.cfg.reset_window)

    @property
    def downsample(self) -> int:
        return self.cfg.downsample

    def _pad(self, x: torch.Tensor) -> torch.Tensor:
        """Edge-replicate (B, T, D) up to a multiple of the downsampling rate."""
        T = x.shape[1]
        l = self.downsample
        if T < l:
            raise ShapeError(f"sequence of {T} frames is shorter than the downsampling rate {l}")
        extra = (-T) % l
        if extra:
            x = torch.cat([x, x[:, -1:].expand(-1, extra, -1)], dim=1)
        return x

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """(B, T, D) normalized features -> (B, ceil(T / l), d_c) latents."""
        if x.shape[-1] != self.cfg.feature_dim:
            raise ShapeError(f"expected feature width {self.cfg.feature_dim}, got {x.shape[-1]}")
        h = self.encoder(self._pad(x).transpose(1, 2))
        return h.transpose(1, 2)

    def quantize(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        B, n, d = z.shape
        idx, zq, commit = self.codebook.quantize(z.reshape(B * n, d))
        return idx.view(B, n), zq.view(B, n, d), commit

    def decode_latents(self, zq: torch.Tensor) -> torch.Tensor:
        return self.decoder(zq.transpose(1, 2)).transpose(1, 2)

    def decode(self, idx: torch.Tensor) -> torch.Tensor:
        """(B, n) code indices -> (B, l * n, D) normalized features."""
        if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= self.cfg.n_codes):
            raise ShapeError(f"code indices must lie in [0, {self.cfg.n_codes}), got "
                             f"[{int(idx.min())}, {int(idx.max())}]")
        return self.decode_latents(nx.embedding_lookup(self.codebook.codes, idx))

    def forward(self, x: torch.Tensor):
        T = x.shape[1]
        z = self.encode(x)
        idx, zq, commit = self.quantize(z)
        recon = self.decode_latents(zq)[:, :T]
        return recon, idx, commit, z

    def vq_loss(self, x: torch.Tensor, beta: float | None = None):
        """(total, reconstruction, commitment) with total = rec + beta * commit."""
        beta = self.cfg.beta if beta is None else beta
        recon, idx, commit, z = self(x)
        rec = F.smooth_l1_loss(recon, x)
        return rec + beta * commit, rec, commit

    @torch.no_grad()
    def tokenize(self, feats: np.ndarray) -> np.ndarray:
        """Normalized (T, D) features -> code indices (ceil(T / l),)."""
        x = torch.as_tensor(np.asarray(feats), dtype=self.codebook.codes.dtype)[None]
        idx, _, _ = self.quantize(self.encode(x))
        return idx[0].numpy()

    @torch.no_grad()
    def detokenize(self, idx: np.ndarray) -> np.ndarray:
        t = torch.as_tensor(np.asarray(idx), dtype=torch.int64)[None]
        return self.decode(t)[0].double().numpy()
