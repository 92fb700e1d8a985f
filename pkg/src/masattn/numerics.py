"""Dense tensor primitives with reverse-mode differentiation.

Tensors are ``torch.Tensor`` values; autograd is torch's. This module pins the
small set of ops the model is written in, adds the contract checks the rest of
the package relies on (finite outputs, non-degenerate masks, single-use
backward) and owns the MASW1 weight container.
"""

from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
import torch

from .errors import DegenerateRowError, DimensionError, FormatError, NonFiniteError, StateError

Tensor = torch.Tensor

DTYPES = {"f32": torch.float32, "f64": torch.float64}
DTYPE_TAGS = {torch.float32: 0, torch.float64: 1}
_TAG_TO_DTYPE = {v: k for k, v in DTYPE_TAGS.items()}
_NP_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}

# Stand-in for -inf in the additive mask; masked cells are re-zeroed after softmax.
MASK_FILL = -1e9

MAGIC = b"MASW1"

_matmul_log: list[tuple[int, ...]] | None = None
_check_ops = True


def resolve_dtype(dtype: str | torch.dtype) -> torch.dtype:
    if isinstance(dtype, torch.dtype):
        return dtype
    try:
        return DTYPES[dtype]
    except KeyError:
        raise DimensionError(f"unknown dtype {dtype!r}") from None


def tensor(data, dtype: str | torch.dtype = "f32", requires_grad: bool = False) -> Tensor:
    t = torch.as_tensor(data, dtype=resolve_dtype(dtype)).clone()
    if requires_grad:
        t.requires_grad_(True)
    return t


def check_finite(x: Tensor, op: str, force: bool = False) -> Tensor:
    if (_check_ops or force) and not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"{op} produced non-finite values")
    return x


@contextlib.contextmanager
def deferred_checks() -> Iterator[None]:
    """Skip per-op finite checks; the caller checks the final result with ``force=True``."""
    global _check_ops
    previous = _check_ops
    _check_ops = False
    try:
        yield
    finally:
        _check_ops = previous


@contextlib.contextmanager
def count_matmuls() -> Iterator[list[tuple[int, ...]]]:
    """Record the operand shapes ``(*batch, m, k, n)`` of every matmul in scope."""
    global _matmul_log
    previous = _matmul_log
    log: list[tuple[int, ...]] = []
    _matmul_log = log
    try:
        yield log
    finally:
        _matmul_log = previous


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes are batch axes."""
    if a.dim() < 2 or b.dim() < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {tuple(a.shape)} x {tuple(b.shape)}")
    out = a @ b
    if _matmul_log is not None:
        _matmul_log.append((*out.shape[:-2], a.shape[-2], a.shape[-1], b.shape[-1]))
    return check_finite(out, "matmul")


def additive_mask(allowed: Tensor, dtype: torch.dtype = torch.float32) -> Tensor:
    """Render a boolean allow-matrix as the additive {0, -inf} form."""
    out = torch.zeros(allowed.shape, dtype=dtype)
    return out.masked_fill(~allowed, float("-inf"))


def masked_softmax(scores: Tensor, allowed: Tensor) -> Tensor:
    """Row softmax restricted to ``allowed`` cells; masked cells come out exactly 0.

    ``allowed`` is boolean and broadcastable against ``scores``.
    """
    if allowed.dtype != torch.bool:
        raise DimensionError("mask must be boolean")
    if allowed.shape[-2:] != scores.shape[-2:]:
        raise DimensionError(f"mask shape {tuple(allowed.shape)} does not match scores {tuple(scores.shape)}")
    if not bool(allowed.any(dim=-1).all()):
        raise DegenerateRowError("mask has a row with no allowed entries")
    filled = scores.masked_fill(~allowed, MASK_FILL)
    filled = filled - filled.amax(dim=-1, keepdim=True).detach()
    probs = torch.softmax(filled, dim=-1).masked_fill(~allowed, 0.0)
    return check_finite(probs, "masked_softmax")


def silu(x: Tensor) -> Tensor:
    return check_finite(torch.nn.functional.silu(x), "silu")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise DimensionError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine params must have shape ({d},)")
    out = torch.nn.functional.layer_norm(x, (d,), gamma, beta, eps)
    return check_finite(out, "layer_norm")


def rms_norm(x: Tensor, gamma: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise DimensionError("rms_norm eps must be positive")
    out = x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps) * gamma
    return check_finite(out, "rms_norm")


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

    A recorded graph can be consumed once; calling this again on the same loss
    without a fresh forward pass raises ``StateError``.
    """
    if loss.numel() != 1:
        raise DimensionError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None:
        raise StateError("no recorded graph behind this loss; run a forward pass first")
    if getattr(loss, "_mas_consumed", False):
        raise StateError("graph already consumed by backward; run a new forward pass")
    check_finite(loss.detach(), "loss", force=True)
    loss._mas_consumed = True
    try:
        loss.backward()
    except RuntimeError as exc:  # torch frees saved tensors after the first pass
        raise StateError(str(exc)) from exc


# MASW1 container:
#   "MASW1" | u8 dtype tag | u32 tensor count
#   per tensor: u32 name length | utf-8 name | u32 rank | u64 extents[rank] | payload
# All integers and payloads little-endian.

def save_tensors(path: str | Path, tensors: Mapping[str, Tensor], dtype: str | torch.dtype = "f32") -> None:
    dt = resolve_dtype(dtype)
    parts = [MAGIC, struct.pack("<BI", DTYPE_TAGS[dt], len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = t.detach().to(dt).contiguous().numpy().astype(_NP_DTYPES[dt], copy=False)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path: str | Path) -> tuple[dict[str, Tensor], torch.dtype]:
    buf = Path(path).read_bytes()
    if buf[:5] != MAGIC:
        raise FormatError(f"{path}: not a MASW1 file")
    try:
        tag, count = struct.unpack_from("<BI", buf, 5)
        dt = _TAG_TO_DTYPE[tag]
        off = 10
        out: dict[str, Tensor] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(_NP_DTYPES[dt]).itemsize
            if off + nbytes > len(buf):
                raise FormatError(f"{path}: truncated payload for {name!r}")
            arr = np.frombuffer(buf, dtype=_NP_DTYPES[dt], count=nbytes // np.dtype(_NP_DTYPES[dt]).itemsize, offset=off)
            off += nbytes
            out[name] = torch.from_numpy(arr.reshape(shape).copy())
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt MASW1 file ({exc})") from exc
    if off != len(buf):
        raise FormatError(f"{path}: trailing bytes after last tensor")
    return out, dt
