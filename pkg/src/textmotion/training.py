"""Three-stage training: tokenizer, motion-only masked pretraining, text-conditioned masked training."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, TextIO

import numpy as np
import torch

from . import checkpoint as ckpt
from . import numerics as nx
from .config import MmtConfig, TrainConfig, VqConfig, from_dict, to_dict
from .dataset import Corpus
from .errors import ContractError, NumericError
from .mmt import TextMotionModel
from .pose_features import Normalizer
from .vqvae import VqVae

log = logging.getLogger(__name__)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to the peak, then cosine decay to 0 at ``cfg.steps``."""
    if step < cfg.warmup:
        return cfg.lr * step / cfg.warmup
    span = max(1, cfg.steps - cfg.warmup)
    frac = min(1.0, (step - cfg.warmup) / span)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class MaskPlan:
    indices: np.ndarray  # sorted distinct slot indices

    def as_mask(self, n: int) -> np.ndarray:
        m = np.zeros(n, dtype=bool)
        m[self.indices] = True
        return m


def mask_ratio(u: float) -> float:
    return math.cos(math.pi * u / 2)


def sample_mask_plan(n_tokens: int, rng: np.random.Generator, u: float | None = None) -> MaskPlan:
    """Cosine-scheduled ratio r = cos(pi u / 2), u ~ U(0, 1); masks max(1, round(r n)) slots."""
    if n_tokens < 1:
        raise ContractError("cannot mask an empty sequence")
    if u is None:
        u = float(rng.random())
    count = min(n_tokens, max(1, int(round(mask_ratio(u) * n_tokens))))
    idx = rng.choice(n_tokens, size=count, replace=False)
    return MaskPlan(np.sort(idx))


class Trainer:
    """Optimizer, schedule, RNG streams and checkpointing for one training stage."""

    def __init__(self, module: torch.nn.Module, cfg: TrainConfig, params: list[torch.nn.Parameter] | None = None):
        cfg.validate()
        self.module, self.cfg = module, cfg
        self.params = list(module.parameters()) if params is None else params
        self.opt = torch.optim.AdamW(self.params, lr=0.0, betas=tuple(cfg.betas),
                                     weight_decay=cfg.weight_decay)
        self.rng = np.random.default_rng(cfg.seed)
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.step = 0
        self.history: list[dict] = []

    def apply(self, loss: torch.Tensor) -> float:
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NumericError(f"training diverged at step {self.step}: loss {value}")
        lr = lr_at(self.step, self.cfg)
        for g in self.opt.param_groups:
            g["lr"] = lr
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        if self.cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.params, self.cfg.grad_clip)
        self.opt.step()
        return lr

    def record(self, entry: dict, sink: TextIO | None) -> None:
        self.history.append(entry)
        if sink is not None:
            sink.write(json.dumps(entry) + "\n")
            sink.flush()

    def state_blobs(self) -> tuple[dict, dict]:
        blobs = {}
        index = {id(p): i for i, p in enumerate(self.params)}
        for p, st in self.opt.state.items():
            i = index[id(p)]
            for k, v in st.items():
                blobs[f"opt.{i}.{k}"] = v if isinstance(v, torch.Tensor) else torch.tensor(v)
        blobs["rng.torch"] = self.gen.get_state()
        header = {"step": self.step, "rng_numpy": self.rng.bit_generator.state,
                  "train_config": to_dict(self.cfg)}
        return header, blobs

    def restore(self, header: dict, blobs: dict[str, torch.Tensor]) -> None:
        self.step = int(header["step"])
        self.rng.bit_generator.state = header["rng_numpy"]
        self.gen.set_state(blobs["rng.torch"].to(torch.uint8))
        state: dict[int, dict] = {}
        for name, v in blobs.items():
            if name.startswith("opt."):
                _, i, k = name.split(".", 2)
                state.setdefault(int(i), {})[k] = v.clone()
        sd = self.opt.state_dict()
        sd["state"] = state
        self.opt.load_state_dict(sd)


def _open_log(path: str | Path | None, resume: bool) -> TextIO | None:
    if path is None:
        return None
    return open(path, "a" if resume else "w")


def blob_checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- stage 1

def save_vqvae(path: str | Path, vq: VqVae, norm: Normalizer, trainer: Trainer | None = None) -> None:
    header = {"kind": "vqvae", "config": to_dict(vq.cfg)}
    blobs = ckpt.state_blobs(vq, "model.")
    blobs["norm.mean"] = torch.from_numpy(norm.mean)
    blobs["norm.std"] = torch.from_numpy(norm.std)
    if trainer is not None:
        th, tb = trainer.state_blobs()
        header.update(th)
        blobs.update(tb)
    ckpt.save(path, header, blobs)


def load_vqvae(path: str | Path) -> tuple[VqVae, Normalizer, dict, dict]:
    header, blobs = ckpt.load(path)
    if header.get("kind") != "vqvae":
        raise ContractError(f"{path} is not a tokenizer checkpoint")
    vq = VqVae(from_dict(VqConfig, header["config"]))
    ckpt.load_state(vq, blobs, "model.")
    norm = Normalizer(blobs["norm.mean"].numpy(), blobs["norm.std"].numpy())
    return vq, norm, header, blobs


def _crop_batch(arrays: list[np.ndarray], cfg: TrainConfig, rng: np.random.Generator) -> torch.Tensor:
    pick = rng.integers(0, len(arrays), size=cfg.batch_size)
    out = np.empty((cfg.batch_size, cfg.window_frames, arrays[0].shape[1]), dtype=np.float32)
    for b, i in enumerate(pick):
        a = arrays[int(i)]
        if len(a) >= cfg.window_frames:
            s = int(rng.integers(0, len(a) - cfg.window_frames + 1))
            out[b] = a[s:s + cfg.window_frames]
        else:
            out[b, :len(a)] = a
            out[b, len(a):] = a[-1]
    return torch.from_numpy(out)


def codebook_usage(vq: VqVae, arrays: list[np.ndarray]) -> float:
    """Fraction of codes selected at least once when tokenizing ``arrays``."""
    used = np.zeros(vq.cfg.n_codes, dtype=bool)
    for a in arrays:
        used[vq.tokenize(a)] = True
    return float(used.mean())


def train_stage1(
    corpus: Corpus,
    vq_cfg: VqConfig,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    checkpoint_every: int = 0,
    resume: str | Path | None = None,
    stop_at: int | None = None,
) -> tuple[VqVae, list[dict]]:
    """Optimize rec + beta * commit with EMA codebook updates and dead-code resets."""
    torch.manual_seed(cfg.seed)
    vq = VqVae(vq_cfg)
    trainer = Trainer(vq, cfg)
    if resume is not None:
        _, _, header, blobs = load_vqvae(resume)
        ckpt.load_state(vq, blobs, "model.")
        trainer.restore(header, blobs)
    arrays = [corpus.normalized(it) for it in corpus.split("train")]
    sink = _open_log(log_path, resume is not None)
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    try:
        while trainer.step < end:
            x = _crop_batch(arrays, cfg, trainer.rng)
            if not int(vq.codebook.initialized):
                with torch.no_grad():
                    vq.codebook.init_from(vq.encode(x).reshape(-1, vq_cfg.code_dim), trainer.gen)
            recon, idx, commit, z = vq(x)
            rec = torch.nn.functional.smooth_l1_loss(recon, x)
            loss = rec + vq_cfg.beta * commit
            lr = trainer.apply(loss)
            flat = z.detach().reshape(-1, vq_cfg.code_dim)
            vq.codebook.ema_update(flat, idx.reshape(-1))
            n_reset = vq.codebook.reset_dead_codes(flat, trainer.gen)
            trainer.step += 1
            if trainer.step % cfg.log_every == 0 or trainer.step == end:
                usage = float((vq.codebook.idle_steps < vq_cfg.reset_window).float().mean())
                trainer.record({"step": trainer.step, "loss": float(loss.detach()), "rec": float(rec.detach()),
                                "commit": float(commit.detach()), "lr": lr, "codebook_usage": usage,
                                "resets": n_reset}, sink)
            if checkpoint_path and checkpoint_every and trainer.step % checkpoint_every == 0:
                save_vqvae(checkpoint_path, vq, corpus.normalizer, trainer)
    finally:
        if sink is not None:
            sink.close()
    if checkpoint_path:
        save_vqvae(checkpoint_path, vq, corpus.normalizer, trainer)
    vq.eval()
    return vq, trainer.history


# ---------------------------------------------------------------- stages 2 and 3

@dataclass
class TokenClip:
    id: str
    tokens: np.ndarray  # codes followed by End
    texts: list[str]


def tokenize_corpus(vq: VqVae, corpus: Corpus, which: str) -> list[TokenClip]:
    end = vq.cfg.n_codes
    out = []
    for it in corpus.split(which):
        codes = vq.tokenize(corpus.normalized(it))
        out.append(TokenClip(it.id, np.concatenate([codes, [end]]).astype(np.int64), list(it.texts)))
    return out


@dataclass
class MaskedBatch:
    inputs: torch.Tensor  # (B, N) with Mask / Pad substituted
    targets: torch.Tensor  # (B, N) original tokens (0 at padding)
    valid: torch.Tensor  # (B, N)
    masked: torch.Tensor  # (B, N) loss support

    def __len__(self) -> int:
        return self.inputs.shape[0]


def make_masked_batch(seqs: list[np.ndarray], plans: list[MaskPlan], cfg: MmtConfig) -> MaskedBatch:
    B, N = len(seqs), max(len(s) for s in seqs)
    targets = torch.zeros(B, N, dtype=torch.int64)
    valid = torch.zeros(B, N, dtype=torch.bool)
    masked = torch.zeros(B, N, dtype=torch.bool)
    for b, (s, p) in enumerate(zip(seqs, plans)):
        targets[b, :len(s)] = torch.from_numpy(np.asarray(s, dtype=np.int64))
        valid[b, :len(s)] = True
        masked[b, torch.from_numpy(np.asarray(p.indices, dtype=np.int64))] = True
    inputs = targets.masked_fill(masked, cfg.mask_id).masked_fill(~valid, cfg.pad_id)
    return MaskedBatch(inputs, targets, valid, masked & valid)


def masked_nll(
    model: TextMotionModel,
    batch: MaskedBatch,
    texts: list[str] | None = None,
    text_enc=None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample summed NLL over masked slots and per-sample masked counts."""
    if text_enc is None and texts is not None:
        text_enc = model.encode_texts(texts)
    logits = model(batch.inputs, batch.valid, text_enc)
    nll = nx.cross_entropy(logits, batch.targets, reduction="none")
    sel = batch.masked.to(nll.dtype)
    return (nll * sel).sum(1), sel.sum(1)


def batch_loss(model: TextMotionModel, batch: MaskedBatch, texts: list[str] | None) -> torch.Tensor:
    """Mean NLL per masked token; exactly 0 when nothing is masked."""
    total, count = masked_nll(model, batch, texts)
    n = count.sum()
    return total.sum() / n.clamp_min(1.0)


def save_t2m(path: str | Path, model: TextMotionModel, stage: int, trainer: Trainer | None = None,
             vq_checksum: str | None = None) -> None:
    header = {"kind": "mmt", "stage": stage, "config": to_dict(model.cfg), "vq_checksum": vq_checksum}
    blobs = ckpt.state_blobs(model, "model.")
    if trainer is not None:
        th, tb = trainer.state_blobs()
        header.update(th)
        blobs.update(tb)
    ckpt.save(path, header, blobs)


def load_t2m(path: str | Path) -> tuple[TextMotionModel, dict, dict]:
    header, blobs = ckpt.load(path)
    if header.get("kind") != "mmt":
        raise ContractError(f"{path} is not a transformer checkpoint")
    model = TextMotionModel(from_dict(MmtConfig, header["config"]))
    ckpt.load_state(model, blobs, "model.")
    return model, header, blobs


def _masked_stage(
    stage: int,
    model: TextMotionModel,
    clips: list[TokenClip],
    cfg: TrainConfig,
    log_path: str | Path | None,
    checkpoint_path: str | Path | None,
    checkpoint_every: int,
    resume: str | Path | None,
    stop_at: int | None,
    vq_checksum: str | None,
    force_empty_mask: bool = False,
) -> list[dict]:
    if not clips:
        raise ContractError("empty training corpus")
    params = list(model.mmt.parameters())
    if stage == 3:
        params += list(model.text_encoder.parameters())
    trainer = Trainer(model, cfg, params)
    if resume is not None:
        header, blobs = ckpt.load(resume)
        ckpt.load_state(model, blobs, "model.")
        trainer.restore(header, blobs)
    sink = _open_log(log_path, resume is not None)
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    mcfg = model.cfg
    try:
        while trainer.step < end:
            pick = trainer.rng.integers(0, len(clips), size=cfg.batch_size)
            batch_clips = [clips[int(i)] for i in pick]
            seqs = [c.tokens for c in batch_clips]
            if force_empty_mask:
                plans = [MaskPlan(np.zeros(0, dtype=np.int64)) for _ in seqs]
            else:
                plans = [sample_mask_plan(len(s), trainer.rng) for s in seqs]
            texts = None
            if stage == 3:
                texts = [c.texts[int(trainer.rng.integers(len(c.texts)))] for c in batch_clips]
            batch = make_masked_batch(seqs, plans, mcfg)
            loss = batch_loss(model, batch, texts)
            lr = trainer.apply(loss)
            trainer.step += 1
            if trainer.step % cfg.log_every == 0 or trainer.step == end:
                trainer.record({"step": trainer.step, "loss": float(loss.detach()), "lr": lr,
                                "pathways": {"text": mcfg.use_text_path, "cross": mcfg.use_cross_path},
                                "gating": mcfg.gating}, sink)
            if checkpoint_path and checkpoint_every and trainer.step % checkpoint_every == 0:
                save_t2m(checkpoint_path, model, stage, trainer, vq_checksum)
    finally:
        if sink is not None:
            sink.close()
    if checkpoint_path:
        save_t2m(checkpoint_path, model, stage, trainer, vq_checksum)
    model.eval()
    return trainer.history


def train_stage2(
    clips: list[TokenClip],
    mmt_cfg: MmtConfig,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    checkpoint_every: int = 0,
    resume: str | Path | None = None,
    stop_at: int | None = None,
    vq_checksum: str | None = None,
    force_empty_mask: bool = False,
) -> tuple[TextMotionModel, list[dict]]:
    """Motion-only masked modeling; every pathway sees the motion tokens."""
    torch.manual_seed(cfg.seed)
    model = TextMotionModel(mmt_cfg)
    hist = _masked_stage(2, model, clips, cfg, log_path, checkpoint_path, checkpoint_every,
                         resume, stop_at, vq_checksum, force_empty_mask)
    return model, hist


def train_stage3(
    clips: list[TokenClip],
    init: TextMotionModel | None,
    cfg: TrainConfig,
    mmt_cfg: MmtConfig | None = None,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    checkpoint_every: int = 0,
    resume: str | Path | None = None,
    stop_at: int | None = None,
    vq_checksum: str | None = None,
) -> tuple[TextMotionModel, list[dict], int]:
    """Text-conditioned masked modeling. Returns (model, history, clips skipped for lacking text)."""
    paired = [c for c in clips if c.texts]
    skipped = len(clips) - len(paired)
    if skipped:
        log.warning("stage 3: skipped %d clips without text", skipped)
    torch.manual_seed(cfg.seed)
    if init is not None:
        model = TextMotionModel(init.cfg)
        model.load_state_dict(init.state_dict())
    else:
        model = TextMotionModel(mmt_cfg)
    model.train()
    hist = _masked_stage(3, model, paired, cfg, log_path, checkpoint_path, checkpoint_every,
                         resume, stop_at, vq_checksum)
    return model, hist, skipped


# ---------------------------------------------------------------- held-out evaluation

def eval_plans(clips: list[TokenClip], seed: int, draws: int = 1) -> list[list[MaskPlan]]:
    rng = np.random.default_rng(seed)
    return [[sample_mask_plan(len(c.tokens), rng) for c in clips] for _ in range(draws)]


@torch.no_grad()
def heldout_nll(
    model: TextMotionModel,
    clips: list[TokenClip],
    plans: list[list[MaskPlan]],
    text_fn: Callable[[int], str] | None = None,
    batch_size: int = 16,
) -> np.ndarray:
    """Per-batch mean masked NLL, one entry per (draw, batch)."""
    out = []
    for draw in plans:
        for lo in range(0, len(clips), batch_size):
            idx = list(range(lo, min(lo + batch_size, len(clips))))
            batch = make_masked_batch([clips[i].tokens for i in idx], [draw[i] for i in idx], model.cfg)
            texts = None if text_fn is None else [text_fn(i) for i in idx]
            total, count = masked_nll(model, batch, texts)
            out.append(float(total.sum() / count.sum().clamp_min(1.0)))
    return np.array(out)


def unigram_nll(train: list[TokenClip], clips: list[TokenClip], plans: list[list[MaskPlan]],
                vocab: int) -> float:
    """Baseline: NLL of masked targets under add-one smoothed training token frequencies."""
    counts = np.ones(vocab)
    for c in train:
        np.add.at(counts, c.tokens, 1)
    logp = np.log(counts / counts.sum())
    total, n = 0.0, 0
    for draw in plans:
        for c, p in zip(clips, draw):
            total -= logp[c.tokens[p.indices]].sum()
            n += len(p.indices)
    return total / n


def model_nll(model: TextMotionModel, clips: list[TokenClip], plans: list[list[MaskPlan]],
              text_fn: Callable[[int], str] | None = None) -> float:
    """Token-weighted mean masked NLL over all plans (comparable with ``unigram_nll``)."""
    total, n = 0.0, 0
    with torch.no_grad():
        for draw in plans:
            for lo in range(0, len(clips), 16):
                idx = list(range(lo, min(lo + 16, len(clips))))
                batch = make_masked_batch([clips[i].tokens for i in idx], [draw[i] for i in idx], model.cfg)
                texts = None if text_fn is None else [text_fn(i) for i in idx]
                t, c = masked_nll(model, batch, texts)
                total += float(t.sum())
                n += int(c.sum())
    return total / n
