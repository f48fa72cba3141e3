"""Distribution and retrieval metrics plus the small contrastive evaluator they run in."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import numerics as nx
from .config import config_hash
from .errors import ContractError, ShapeError
from .layers import Linear
from .pose_features import FEATURE_DIM
from .text_encoder import TextEncoder


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @classmethod
    def of(cls, features: np.ndarray) -> "FeatureStats":
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or len(x) < 2:
            raise ShapeError(f"need an (N >= 2, D) feature matrix, got {x.shape}")
        cov = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
        return cls(x.mean(0), (cov + cov.T) / 2, len(x))


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid(a: FeatureStats, b: FeatureStats) -> float:
    """Frechet distance between two Gaussian fits.

    tr((S_a S_b)^1/2) is taken as tr((A S_b A)^1/2) with A = S_a^1/2, which is
    symmetric, so a plain eigendecomposition with clamping is enough.
    """
    if a.mean.shape != b.mean.shape or a.cov.shape != b.cov.shape:
        raise ShapeError(f"feature dims differ: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    root_a = _sqrt_psd(a.cov)
    inner = root_a @ b.cov @ root_a
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    d = a.mean - b.mean
    return max(0.0, float(d @ d) + float(np.trace(a.cov) + np.trace(b.cov)) - 2.0 * tr_sqrt)


def _unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def r_precision_from_features(text_f: np.ndarray, motion_f: np.ndarray, pool_size: int = 32,
                              seed: int = 0) -> tuple[float, float, float]:
    """Top-1/2/3 retrieval rate of each text's own motion in a pool with pool_size - 1 random distractors."""
    n = len(text_f)
    if len(motion_f) != n:
        raise ShapeError(f"{n} text features vs {len(motion_f)} motion features")
    if n < pool_size:
        raise ContractError(f"r-precision needs at least {pool_size} pairs, got {n}")
    t, m = _unit(text_f), _unit(motion_f)
    rng = np.random.default_rng(seed)
    hits = np.zeros(3)
    for i in range(n):
        others = rng.choice(n - 1, pool_size - 1, replace=False)
        others = others + (others >= i)
        dist_true = 1.0 - t[i] @ m[i]
        dist_other = 1.0 - m[others] @ t[i]
        rank = int((dist_other < dist_true).sum())
        hits += rank < np.arange(1, 4)
    top = hits / n
    return float(top[0]), float(top[1]), float(top[2])


def diversity(features: np.ndarray, n_pairs: int, seed: int = 0) -> float:
    """Mean distance between two independently drawn subsets of size ``n_pairs``."""
    x = np.asarray(features, dtype=np.float64)
    if n_pairs < 1 or n_pairs > len(x):
        raise ContractError(f"n_pairs = {n_pairs} but only {len(x)} samples are available")
    rng = np.random.default_rng(seed)
    a = rng.choice(len(x), n_pairs, replace=False)
    b = rng.choice(len(x), n_pairs, replace=False)
    return float(np.linalg.norm(x[a] - x[b], axis=1).mean())


def mmdist_from_features(text_f: np.ndarray, motion_f: np.ndarray) -> float:
    t, m = np.asarray(text_f, dtype=np.float64), np.asarray(motion_f, dtype=np.float64)
    if t.shape != m.shape:
        raise ShapeError(f"text features {t.shape} vs motion features {m.shape}")
    return float(np.linalg.norm(t - m, axis=1).mean())


@dataclass
class TrialResult:
    mean: float
    ci95: float
    values: list[float]

    @property
    def trials(self) -> int:
        return len(self.values)


def trial_seeds(k: int, base_seed: int = 0) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(base_seed).generate_state(k, dtype=np.uint32)]


def repeated_trials(metric: Callable[[int], float], k: int = 20, base_seed: int = 0) -> TrialResult:
    """Run a seed-parametrized metric k times; CI half-width 1.96 sigma / sqrt(k)."""
    if k < 2:
        raise ContractError(f"repeated trials need k >= 2, got {k}")
    values = [float(metric(s)) for s in trial_seeds(k, base_seed)]
    v = np.sort(np.asarray(values))
    return TrialResult(float(v.mean()), float(1.96 * v.std() / math.sqrt(k)), values)


def metric_report(metric: str, result: TrialResult, config: dict) -> dict:
    return {"metric": metric, "mean": result.mean, "ci95": result.ci95,
            "trials": result.trials, "config_hash": config_hash(config)}


# ---------------------------------------------------------------- evaluator

class EvaluatorModel(nn.Module):
    """Motion conv encoder and text stub mapped into one shared feature space."""

    def __init__(self, width: int = 128, out_dim: int = 64, n_layers: int = 4, text_vocab: int = 4096,
                 feature_dim: int = FEATURE_DIM):
        super().__init__()
        self.width, self.out_dim = width, out_dim
        self.inp = Linear(feature_dim, width)
        self.convs = nn.ParameterList(nn.Parameter(torch.randn(width, width, 3) * (1.0 / math.sqrt(3 * width)))
                                      for _ in range(n_layers))
        self.motion_out = Linear(width, out_dim)
        self.text = TextEncoder(width, text_vocab, n_layers=2)
        self.text_out = Linear(width, out_dim)

    def encode_motion(self, x: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        """(B, T, D) normalized features -> (B, out_dim)."""
        h = self.inp(x).transpose(1, 2)
        for w in self.convs:
            h = h + nx.activation(nx.conv1d(h, w, pad=1), "relu")
        h = h.transpose(1, 2)
        if valid is None:
            pooled = h.mean(1)
        else:
            wv = valid.to(h.dtype)[..., None]
            pooled = (h * wv).sum(1) / wv.sum(1).clamp_min(1.0)
        return self.motion_out(pooled)

    def encode_texts(self, texts: list[str]) -> torch.Tensor:
        return self.text_out(self.text.encode_batch(texts)[2])

    @torch.no_grad()
    def motion_features(self, arrays: Sequence[np.ndarray]) -> np.ndarray:
        return np.concatenate([self.encode_motion(torch.from_numpy(np.asarray(a, dtype=np.float32))[None]).numpy()
                               for a in arrays])

    @torch.no_grad()
    def text_features(self, texts: list[str]) -> np.ndarray:
        return self.encode_texts(texts).numpy()


def _pad_batch(arrays: list[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    T = max(len(a) for a in arrays)
    x = np.zeros((len(arrays), T, arrays[0].shape[1]), dtype=np.float32)
    valid = np.zeros((len(arrays), T), dtype=bool)
    for i, a in enumerate(arrays):
        x[i, :len(a)] = a
        valid[i, :len(a)] = True
    return torch.from_numpy(x), torch.from_numpy(valid)


def train_evaluator(arrays: list[np.ndarray], texts: list[list[str]], steps: int = 300, batch_size: int = 32,
                    lr: float = 1e-3, temperature: float = 0.1, seed: int = 0,
                    model: EvaluatorModel | None = None) -> tuple[EvaluatorModel, list[float]]:
    """Symmetric InfoNCE on (motion, caption) pairs; one random caption per clip per step."""
    if len(arrays) != len(texts) or len(arrays) < 2:
        raise ContractError("evaluator training needs at least two (motion, captions) pairs")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = model or EvaluatorModel()
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=1e-2)
    losses = []
    for _ in range(steps):
        pick = rng.choice(len(arrays), min(batch_size, len(arrays)), replace=False)
        x, valid = _pad_batch([arrays[i] for i in pick])
        caps = [texts[i][int(rng.integers(len(texts[i])))] for i in pick]
        m = torch.nn.functional.normalize(model.encode_motion(x, valid), dim=-1)
        t = torch.nn.functional.normalize(model.encode_texts(caps), dim=-1)
        logits = t @ m.T / temperature
        target = torch.arange(len(pick))
        loss = (nx.cross_entropy(logits, target) + nx.cross_entropy(logits.T, target)) / 2
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    model.eval()
    return model, losses


def r_precision(model: EvaluatorModel, arrays: list[np.ndarray], texts: list[str], pool_size: int = 32,
                seed: int = 0) -> tuple[float, float, float]:
    return r_precision_from_features(model.text_features(texts), model.motion_features(arrays), pool_size, seed)


def mmdist(model: EvaluatorModel, arrays: list[np.ndarray], texts: list[str]) -> float:
    return mmdist_from_features(model.text_features(texts), model.motion_features(arrays))
