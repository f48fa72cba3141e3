"""Tensor operations used by every model in the package, plus gradient checking.

The ops are thin, shape-checked wrappers over torch. Reverse-mode
differentiation comes from torch autograd; ``grad_check`` verifies it against
central finite differences computed independently here.
"""

from __future__ import annotations

import contextlib
import io
import math
import struct
from pathlib import Path
from typing import BinaryIO, Callable, Iterator

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, FormatError, NumericError, ShapeError

_CHECKED = False
_KINKS: list[torch.Tensor] | None = None

TENSOR_MAGIC = b"GM3TNSR\x00"
_DTYPE_CODES = {torch.float32: 0, torch.float64: 1}
_CODE_DTYPES = {0: (torch.float32, "<f4"), 1: (torch.float64, "<f8")}


def set_checked(enabled: bool) -> None:
    global _CHECKED
    _CHECKED = bool(enabled)


def is_checked() -> bool:
    return _CHECKED


@contextlib.contextmanager
def checked(enabled: bool = True) -> Iterator[None]:
    """Temporarily turn finite-value assertions on (or off)."""
    prev = _CHECKED
    set_checked(enabled)
    try:
        yield
    finally:
        set_checked(prev)


@contextlib.contextmanager
def record_kinks() -> Iterator[list[torch.Tensor]]:
    """Collect the sign pattern of every relu input evaluated inside the block."""
    global _KINKS
    prev, _KINKS = _KINKS, []
    try:
        yield _KINKS
    finally:
        _KINKS = prev


def _same_side(a: list[torch.Tensor], b: list[torch.Tensor]) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def _difference(f0: float, hi: float, lo: float, eps: float, base, k_hi, k_lo) -> float | None:
    """Central difference, or the one-sided difference on the side that stays in the
    baseline relu region; None when both sides cross a kink."""
    up, down = _same_side(base, k_hi), _same_side(base, k_lo)
    if up and down:
        return (hi - lo) / (2 * eps)
    if up:
        return (hi - f0) / eps
    if down:
        return (f0 - lo) / eps
    return None


def _finite(out: torch.Tensor, op: str) -> torch.Tensor:
    if _CHECKED and out.is_floating_point() and not bool(torch.isfinite(out).all()):
        raise NumericError(f"{op}: non-finite values in output")
    return out


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions differ for {tuple(a.shape)} and {tuple(b.shape)}")
    return _finite(a @ b, "matmul")


def conv1d(
    x: torch.Tensor,
    w: torch.Tensor,
    stride: int = 1,
    pad: int = 0,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """Cross-correlation over the last axis. ``x`` is (C_in, T) or (B, C_in, T)."""
    if stride < 1:
        raise ShapeError(f"conv1d: stride must be >= 1, got {stride}")
    if w.dim() != 3:
        raise ShapeError(f"conv1d: kernel must be (C_out, C_in, k), got {tuple(w.shape)}")
    unbatched = x.dim() == 2
    xb = x.unsqueeze(0) if unbatched else x
    if xb.dim() != 3 or xb.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: input {tuple(x.shape)} incompatible with kernel {tuple(w.shape)}")
    k = w.shape[2]
    if k > xb.shape[2] + 2 * pad:
        raise ShapeError(
            f"conv1d: kernel size {k} exceeds padded input length {xb.shape[2] + 2 * pad}"
        )
    out = F.conv1d(xb, w, bias, stride=stride, padding=pad)
    return _finite(out.squeeze(0) if unbatched else out, "conv1d")


def conv_out_len(t: int, k: int, stride: int, pad: int) -> int:
    return (t + 2 * pad - k) // stride + 1


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    if not -x.dim() <= axis < max(x.dim(), 1):
        raise ShapeError(f"softmax: axis {axis} invalid for shape {tuple(x.shape)}")
    # torch subtracts the running max internally
    return _finite(torch.softmax(x, dim=axis), "softmax")


def layer_norm(
    x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5
) -> torch.Tensor:
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ShapeError(
            f"layer_norm: input {tuple(x.shape)} vs gain {tuple(gain.shape)} / bias {tuple(bias.shape)}"
        )
    return _finite(F.layer_norm(x, (x.shape[-1],), gain, bias, eps), "layer_norm")


def activation(x: torch.Tensor, kind: str = "relu") -> torch.Tensor:
    if kind == "relu":
        if _KINKS is not None:
            _KINKS.append((x > 0).detach().reshape(-1))
        out = torch.relu(x)
    elif kind == "gelu":
        out = F.gelu(x)
    else:
        raise ContractError(f"unknown activation {kind!r}")
    return _finite(out, "activation")


def embedding_lookup(table: torch.Tensor, indices: torch.Tensor) -> torch.Tensor:
    if indices.numel() and (int(indices.min()) < 0 or int(indices.max()) >= table.shape[0]):
        raise ShapeError(
            f"embedding_lookup: indices in [{int(indices.min())}, {int(indices.max())}] "
            f"outside table of {table.shape[0]} rows"
        )
    return F.embedding(indices, table)


def cross_entropy(
    logits: torch.Tensor, target: torch.Tensor, reduction: str = "mean"
) -> torch.Tensor:
    """Negative log-likelihood of ``target`` under softmax(``logits``) on the last axis."""
    if _CHECKED and bool(torch.isnan(logits).any()):
        raise NumericError("cross_entropy: NaN in logits")
    if logits.shape[:-1] != target.shape:
        raise ShapeError(
            f"cross_entropy: logits {tuple(logits.shape)} vs targets {tuple(target.shape)}"
        )
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    if reduction == "none":
        return nll
    if reduction == "sum":
        return nll.sum()
    if reduction == "mean":
        return nll.mean()
    raise ContractError(f"unknown reduction {reduction!r}")


def attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor | None = None
) -> torch.Tensor:
    """Bidirectional scaled dot-product attention.

    ``mask`` broadcasts to (..., n_q, n_k); False entries are excluded.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(
            f"attention: q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)} incompatible"
        )
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    return _finite(torch.softmax(scores, dim=-1) @ v, "attention")


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    eps: float = 1e-5,
    coords: np.ndarray | None = None,
    stats: dict | None = None,
) -> float:
    """Max relative error between autograd and central differences of scalar ``f`` at ``x``.

    The error per coordinate is |analytic - numeric| / max(1, |numeric|).
    ``coords`` restricts the check to a subset of flat indices. Coordinates
    whose +/- eps evaluations move a relu input across zero fall back to the
    one-sided difference on the other side; when both sides cross, the
    coordinate is skipped and counted in ``stats["skipped"]``.
    """
    x0 = x.detach().clone()
    xg = x0.clone().requires_grad_(True)
    with record_kinks() as base:
        out = f(xg)
    f0 = float(out.detach()) if isinstance(out, torch.Tensor) and out.numel() == 1 else 0.0
    if not isinstance(out, torch.Tensor) or out.numel() != 1:
        raise ContractError("grad_check: f must return a scalar tensor")
    analytic = None
    if out.requires_grad:
        (analytic,) = torch.autograd.grad(out.reshape(()), xg, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x0)
    analytic = analytic.reshape(-1)

    flat = x0.reshape(-1)
    idx = np.arange(flat.numel()) if coords is None else np.asarray(coords)
    worst, skipped = 0.0, 0
    with torch.no_grad():
        for i in idx:
            i = int(i)
            orig = flat[i].item()
            flat[i] = orig + eps
            with record_kinks() as k_hi:
                hi = float(f(x0))
            flat[i] = orig - eps
            with record_kinks() as k_lo:
                lo = float(f(x0))
            flat[i] = orig
            numeric = _difference(f0, hi, lo, eps, base, k_hi, k_lo)
            if numeric is None:
                skipped += 1
                continue
            err = abs(float(analytic[i]) - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    if stats is not None:
        stats["skipped"] = stats.get("skipped", 0) + skipped
    return worst


def grad_check_params(
    loss_fn: Callable[[], torch.Tensor],
    params: dict[str, torch.nn.Parameter],
    eps: float = 1e-5,
    max_coords: int = 24,
    seed: int = 0,
    stats: dict | None = None,
) -> dict[str, float]:
    """Finite-difference check of ``loss_fn`` w.r.t. each named parameter.

    At most ``max_coords`` randomly chosen coordinates are perturbed per tensor.
    A coordinate whose +/- eps evaluations put any relu input on the other side
    of zero straddles a kink, where the central difference does not estimate
    the derivative. The one-sided difference on the side that stays in the
    baseline region is used instead, and a coordinate crossing on both sides is
    replaced by another one. ``stats["skipped"]`` counts the replacements.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
    with record_kinks() as base:
        out = loss_fn()
        out.backward()
    f0 = float(out.detach())
    analytic = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                for n, p in params.items()}
    report: dict[str, float] = {}
    skipped = 0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.data.view(-1)
            n = flat.numel()
            order = rng.permutation(n)
            g = analytic[name].reshape(-1)
            worst, used = 0.0, 0
            for i in order:
                if used == max_coords:
                    break
                i = int(i)
                orig = flat[i].item()
                flat[i] = orig + eps
                with record_kinks() as k_hi:
                    hi = float(loss_fn())
                flat[i] = orig - eps
                with record_kinks() as k_lo:
                    lo = float(loss_fn())
                flat[i] = orig
                numeric = _difference(f0, hi, lo, eps, base, k_hi, k_lo)
                if numeric is None:
                    skipped += 1
                    continue
                used += 1
                worst = max(worst, abs(float(g[i]) - numeric) / max(1.0, abs(numeric)))
            report[name] = worst
    if stats is not None:
        stats["skipped"] = stats.get("skipped", 0) + skipped
    return report


def write_tensor(fh: BinaryIO, t: torch.Tensor | np.ndarray) -> None:
    arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if arr.dtype == np.float64:
        code = 1
    else:
        arr = arr.astype(np.float32)
        code = 0
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<BI", code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr).astype(_CODE_DTYPES[code][1]).tobytes())


def read_tensor(fh: BinaryIO) -> torch.Tensor:
    magic = fh.read(8)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"not a tensor dump (magic {magic!r})")
    head = fh.read(5)
    if len(head) != 5:
        raise FormatError("truncated tensor header")
    code, rank = struct.unpack("<BI", head)
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    dtype, npdt = _CODE_DTYPES[code]
    count = int(np.prod(dims)) if rank else 1
    payload = fh.read(count * np.dtype(npdt).itemsize)
    if len(payload) != count * np.dtype(npdt).itemsize:
        raise FormatError("truncated tensor payload")
    arr = np.frombuffer(payload, dtype=npdt).reshape(dims)
    return torch.from_numpy(arr.copy())


def dump_tensor(path: str | Path, t: torch.Tensor | np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path: str | Path) -> torch.Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def tensor_bytes(t: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()
