"""Iterative masked parallel decoding, motion in-betweening and End handling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import DecodeSchedule
from .errors import ContractError, ShapeError
from .mmt import TextMotionModel
from .pose_features import MotionFeatureSequence, Normalizer, SkeletonClip, recover
from .text_encoder import TextEncoding
from .vqvae import VqVae

log = logging.getLogger(__name__)

MODES = ("generate", "prefix", "suffix", "infix")


def masked_after(t: int, n: int, schedule: DecodeSchedule) -> int:
    """How many of ``n`` hidden tokens are still masked after iteration ``t`` (1-based)."""
    T = schedule.iterations
    if t >= T:
        return 0
    if schedule.schedule == "linear":
        return -(-n * (T - t) // T)
    return int(math.ceil(n * math.cos(math.pi * t / (2 * T)) - 1e-9))


def temperature_at(t: int, schedule: DecodeSchedule) -> float:
    """Linear anneal from the base temperature (t = 0) to 0 at the last iteration."""
    return schedule.temperature * (schedule.iterations - t) / schedule.iterations


@dataclass
class DecodeTrace:
    committed_per_step: list[np.ndarray] = field(default_factory=list)
    snapshots: list[np.ndarray] = field(default_factory=list)  # sequence after each iteration


def _text_batch(text: TextEncoding | None):
    if text is None:
        return None
    E = text.token_embeddings[None]
    valid = torch.ones(1, E.shape[1], dtype=torch.bool)
    return E, valid, text.global_feature[None]


@torch.no_grad()
def decode_tokens(
    model: TextMotionModel,
    text: TextEncoding | None,
    init: np.ndarray,
    fixed: np.ndarray,
    schedule: DecodeSchedule,
    trace: DecodeTrace | None = None,
) -> np.ndarray:
    """Fill every non-fixed slot of ``init`` by confidence-ordered parallel decoding.

    Each iteration samples every masked slot at the annealed temperature,
    scores it by the (untempered) probability of the sampled token, and commits
    the most confident ones so that exactly ``masked_after(t)`` remain masked.
    Committed and fixed tokens never change.
    """
    schedule.validate()
    cfg = model.cfg
    n = len(init)
    if n < 1:
        raise ShapeError("cannot decode an empty sequence")
    seq = np.asarray(init, dtype=np.int64).copy()
    masked = ~np.asarray(fixed, dtype=bool)
    seq[masked] = cfg.mask_id
    n_hidden = int(masked.sum())
    text_b = _text_batch(text)
    gen = torch.Generator().manual_seed(schedule.seed)
    for t in range(1, schedule.iterations + 1):
        if not masked.any():
            break
        logits = model(torch.from_numpy(seq)[None], None, text_b)[0]
        probs = torch.softmax(logits, dim=-1)
        tau = temperature_at(t, schedule)
        if tau <= 0:
            sampled = torch.argmax(probs, dim=-1)
        else:
            sampled = torch.multinomial(torch.softmax(logits / tau, dim=-1), 1, generator=gen)[:, 0]
        conf = probs.gather(-1, sampled[:, None])[:, 0].double().numpy()
        cand = np.flatnonzero(masked)
        n_commit = len(cand) - masked_after(t, n_hidden, schedule)
        if n_commit <= 0:
            continue
        # highest confidence first, ties to the earliest slot
        order = cand[np.lexsort((cand, -conf[cand]))][:n_commit]
        seq[order] = sampled.numpy()[order]
        masked[order] = False
        if trace is not None:
            trace.committed_per_step.append(np.sort(order))
            trace.snapshots.append(seq.copy())
    return seq


def trim_at_end(tokens: np.ndarray | list[int], end_id: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    hits = np.flatnonzero(tokens == end_id)
    if len(hits) == 0:
        return tokens
    if hits[0] == 0:
        log.warning("End token at position 0: empty motion")
    return tokens[:hits[0]]


def completion_spans(n: int, mode: str, hidden_fraction: float = 0.5) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """(observed spans, generated spans) for a completion mode on ``n`` tokens.

    prefix keeps the first (1 - f) n tokens, suffix the last (1 - f) n, infix
    keeps both ends and regenerates the middle f n.
    """
    if mode not in ("prefix", "suffix", "infix"):
        raise ContractError(f"completion mode must be prefix, suffix or infix, got {mode!r}")
    if not 0.0 <= hidden_fraction <= 1.0:
        raise ContractError(f"hidden fraction {hidden_fraction} outside [0, 1]")
    h = int(round(hidden_fraction * n))
    if mode == "prefix":
        return [(0, n - h)], [(n - h, n)]
    if mode == "suffix":
        return [(h, n)], [(0, h)]
    lo = (n - h) // 2
    return [(0, lo), (lo + h, n)], [(lo, lo + h)]


def _span_mask(n: int, spans: list[tuple[int, int]]) -> np.ndarray:
    m = np.zeros(n, dtype=bool)
    for a, b in spans:
        if not 0 <= a <= b <= n:
            raise ShapeError(f"span ({a}, {b}) outside [0, {n})")
        m[a:b] = True
    return m


def complete(
    model: TextMotionModel,
    text: TextEncoding | None,
    tokens: np.ndarray,
    observed: list[tuple[int, int]],
    generated: list[tuple[int, int]],
    schedule: DecodeSchedule,
) -> np.ndarray:
    """Regenerate the ``generated`` spans of ``tokens``; ``observed`` spans are kept bit-exact."""
    n = len(tokens)
    obs = _span_mask(n, observed)
    gen = _span_mask(n, generated)
    if (obs & gen).any():
        raise ContractError("observed and generated spans overlap")
    if not (obs | gen).all():
        raise ContractError("observed and generated spans must cover the sequence")
    out = decode_tokens(model, text, np.asarray(tokens), obs, schedule)
    assert np.array_equal(out[obs], np.asarray(tokens)[obs])
    return out


@dataclass
class Generation:
    tokens: np.ndarray  # as decoded, possibly containing End
    codes: np.ndarray  # trimmed at End
    features: MotionFeatureSequence | None
    clip: SkeletonClip | None


class MotionPipeline:
    """Frozen tokenizer + transformer bundle used for generation and completion."""

    def __init__(self, vq: VqVae, normalizer: Normalizer, model: TextMotionModel):
        self.vq, self.normalizer, self.model = vq.eval(), normalizer, model.eval()
        if vq.cfg.n_codes != model.cfg.n_codes:
            raise ContractError(f"tokenizer has {vq.cfg.n_codes} codes, transformer expects {model.cfg.n_codes}")

    def encode_text(self, text: str | TextEncoding | None) -> TextEncoding | None:
        if text is None or isinstance(text, TextEncoding):
            return text
        with torch.no_grad():
            return self.model.text_encoder.encode_text(text)

    def check_length(self, n_tokens: int, text: TextEncoding | None) -> None:
        n_text = 0 if text is None else text.token_count + 1 + int(self.model.cfg.use_descriptor)
        if n_tokens < 1 or n_text + n_tokens > self.model.cfg.max_positions:
            raise ShapeError(f"{n_tokens} motion tokens (+{n_text} text slots) exceed "
                             f"{self.model.cfg.max_positions} positions")

    def to_motion(self, tokens: np.ndarray) -> Generation:
        codes = trim_at_end(tokens, self.model.cfg.end_id)
        codes = codes[codes < self.vq.cfg.n_codes]
        if len(codes) == 0:
            return Generation(tokens, codes, None, None)
        feats = self.normalizer.de_normalize(self.vq.detokenize(codes))
        seq = MotionFeatureSequence(feats)
        return Generation(tokens, codes, seq, recover(seq))

    def generate(self, text: str | TextEncoding | None, n_tokens: int, schedule: DecodeSchedule) -> Generation:
        enc = self.encode_text(text)
        self.check_length(n_tokens, enc)
        init = np.zeros(n_tokens, dtype=np.int64)
        tokens = decode_tokens(self.model, enc, init, np.zeros(n_tokens, dtype=bool), schedule)
        return self.to_motion(tokens)

    def tokenize_features(self, raw_features: np.ndarray) -> np.ndarray:
        return self.vq.tokenize(self.normalizer.normalize(raw_features).astype(np.float32))

    def complete(self, text: str | TextEncoding | None, tokens: np.ndarray, mode: str,
                 schedule: DecodeSchedule, hidden_fraction: float = 0.5) -> Generation:
        enc = self.encode_text(text)
        self.check_length(len(tokens), enc)
        observed, generated = completion_spans(len(tokens), mode, hidden_fraction)
        out = complete(self.model, enc, tokens, observed, generated, schedule)
        return self.to_motion(out)
