"""Small functional tensor layer on top of torch autograd.

Every op validates shapes up front and (optionally) rejects non-finite
outputs, so that numerical blowups surface at the op that produced them
rather than three layers later as a NaN loss.  Tensors are float32 unless a
caller explicitly passes float64 data (the gradient checks do).

Also home to the AdamW wrapper and the binary checkpoint container.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float32

# Finite-output checks cost one reduction per op; training can switch them off.
CHECK_FINITE = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _finite(out: torch.Tensor, op: str) -> torch.Tensor:
    if CHECK_FINITE and not bool(torch.isfinite(out).all()):
        raise NonFiniteError(f"{op} produced non-finite values")
    return out


def tensor(data, requires_grad: bool = False, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(data), dtype=dtype).clone()
    t.requires_grad_(requires_grad)
    return t


# ---------------------------------------------------------------------------
# forward ops


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, padding: int = 0) -> torch.Tensor:
    """NCHW convolution (cross-correlation, zero padding)."""
    if x.dim() != 4 or weight.dim() != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {tuple(x.shape)}, {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[1]} vs kernel {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d bias shape {tuple(bias.shape)} != ({weight.shape[0]},)")
    return _finite(F.conv2d(x, weight, bias, stride=stride, padding=padding), "conv2d")


def upsample2x_nearest(x: torch.Tensor) -> torch.Tensor:
    if x.dim() != 4:
        raise ShapeError(f"upsample2x_nearest expects NCHW, got {tuple(x.shape)}")
    return F.interpolate(x, scale_factor=2, mode="nearest")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {tuple(a.shape)} @ {tuple(b.shape)}")
    return _finite(a @ b, "matmul")


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise sum. The only broadcast allowed is a bias vector over the
    channel axis (dim 1) of ``a``."""
    if a.shape != b.shape:
        bias_ok = b.dim() == 1 and a.dim() >= 2 and a.shape[1] == b.shape[0]
        if not bias_ok:
            raise ShapeError(f"add shape mismatch {tuple(a.shape)} + {tuple(b.shape)}")
        b = b.view((1, -1) + (1,) * (a.dim() - 2))
    return _finite(a + b, "add")


def scale(x: torch.Tensor, alpha: float) -> torch.Tensor:
    return _finite(x * alpha, "scale")


def leaky_relu(x: torch.Tensor, slope: float = 0.2) -> torch.Tensor:
    return F.leaky_relu(x, negative_slope=slope)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def mean(x: torch.Tensor) -> torch.Tensor:
    return x.mean()


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return _finite(((a - b) ** 2).mean(), "mse")


def gaussian_kernel1d(sigma: float, radius: int | None = None, dtype=DTYPE) -> torch.Tensor:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if radius is None:
        radius = max(1, int(math.ceil(3.0 * sigma)))
    xs = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-0.5 * (xs / sigma) ** 2)
    return (k / k.sum()).to(dtype)


def gaussian_blur(x: torch.Tensor, sigma: float, radius: int | None = None) -> torch.Tensor:
    """Separable Gaussian blur of an NCHW tensor with reflect padding."""
    if x.dim() != 4:
        raise ShapeError(f"gaussian_blur expects NCHW, got {tuple(x.shape)}")
    k = gaussian_kernel1d(sigma, radius, dtype=x.dtype)
    r = (k.numel() - 1) // 2
    c = x.shape[1]
    # reflect padding needs r < spatial size
    mode = "reflect" if r < min(x.shape[2], x.shape[3]) else "replicate"
    xp = F.pad(x, (r, r, r, r), mode=mode)
    kh = k.view(1, 1, 1, -1).repeat(c, 1, 1, 1)
    kv = k.view(1, 1, -1, 1).repeat(c, 1, 1, 1)
    out = F.conv2d(F.conv2d(xp, kh, groups=c), kv, groups=c)
    return _finite(out, "gaussian_blur")


# ---------------------------------------------------------------------------
# reverse mode


def backward(loss: torch.Tensor, params: Sequence[torch.Tensor]) -> list[torch.Tensor | None]:
    """Gradients of a scalar ``loss`` w.r.t. ``params``.

    Frozen tensors (``requires_grad=False``) and parameters that do not
    participate in the graph get ``None``.
    """
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not bool(torch.isfinite(loss)):
        raise NonFiniteError(f"non-finite loss {loss.item()}")
    live = [i for i, p in enumerate(params) if p.requires_grad]
    grads: list[torch.Tensor | None] = [None] * len(params)
    if not live:
        return grads
    got = torch.autograd.grad(loss, [params[i] for i in live], allow_unused=True)
    for i, g in zip(live, got):
        grads[i] = g
    return grads


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


def make_optimizer(params: Iterable[torch.Tensor], cfg: OptimConfig | None = None) -> torch.optim.AdamW:
    cfg = cfg or OptimConfig()
    # foreach=False keeps the update order fixed regardless of which params have grads
    return torch.optim.AdamW(list(params), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                             weight_decay=cfg.weight_decay, foreach=False)


def optimizer_step(opt: torch.optim.Optimizer, params: Sequence[torch.Tensor],
                   grads: Sequence[torch.Tensor | None]) -> None:
    """Install ``grads`` on ``params`` and take one decoupled-weight-decay step.

    Parameters whose gradient is ``None`` are skipped entirely: no decay, no
    moment update.  This is what keeps unrouted markers bit-identical.
    """
    if len(params) != len(grads):
        raise ShapeError("params/grads length mismatch")
    for p, g in zip(params, grads):
        if g is not None and g.shape != p.shape:
            raise ShapeError(f"gradient shape {tuple(g.shape)} != param shape {tuple(p.shape)}")
        p.grad = None if g is None else g.detach().clone()
    opt.step()
    for p in params:
        p.grad = None


def optimizer_state_entries(opt: torch.optim.Optimizer, prefix: str = "opt") -> dict[str, np.ndarray]:
    """Flatten AdamW state to checkpoint entries keyed by parameter position."""
    out: dict[str, np.ndarray] = {}
    params = [p for g in opt.param_groups for p in g["params"]]
    for i, p in enumerate(params):
        st = opt.state.get(p)
        if not st:
            continue
        out[f"{prefix}/{i}/exp_avg"] = st["exp_avg"].detach().cpu().numpy()
        out[f"{prefix}/{i}/exp_avg_sq"] = st["exp_avg_sq"].detach().cpu().numpy()
        out[f"{prefix}/{i}/step"] = np.asarray([float(st["step"])], dtype=np.float64)
    return out


def load_optimizer_state(opt: torch.optim.Optimizer, entries: Mapping[str, np.ndarray],
                         prefix: str = "opt") -> None:
    params = [p for g in opt.param_groups for p in g["params"]]
    opt.state.clear()
    for i, p in enumerate(params):
        key = f"{prefix}/{i}/exp_avg"
        if key not in entries:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(entries[f"{prefix}/{i}/step"][0])),
            "exp_avg": torch.from_numpy(np.array(entries[key])).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(np.array(entries[f"{prefix}/{i}/exp_avg_sq"])).to(p.dtype),
        }


# ---------------------------------------------------------------------------
# checkpoint container
#
# layout (all integers little-endian):
#   magic   8 bytes  b"MOLMCKPT"
#   version u32
#   count   u32
#   count x entry:
#     name_len u16, name utf-8
#     dtype    u8   (see _DTYPES)
#     ndim     u8,  shape ndim x u64
#     nbytes   u64, payload
# A manifest dict is stored as a uint8 entry named "__manifest__" holding JSON.

MAGIC = b"MOLMCKPT"
FORMAT_VERSION = 1
MANIFEST_KEY = "__manifest__"

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1")}
_TAGS = {v: k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    pass


def _as_array(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype == np.float32 or arr.dtype == np.float64 or arr.dtype == np.int64 or arr.dtype == np.uint8:
        # ascontiguousarray would turn 0-d arrays into 1-d ones
        return np.array(arr, dtype=arr.dtype.newbyteorder("<"), order="C", copy=True)
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def dumps_checkpoint(entries: Mapping[str, object], manifest: Mapping | None = None) -> bytes:
    items = dict(entries)
    if manifest is not None:
        blob = json.dumps(manifest, sort_keys=True).encode()
        items[MANIFEST_KEY] = np.frombuffer(blob, dtype=np.uint8)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(items)))
    for name in sorted(items):
        arr = _as_array(items[name])
        raw_name = name.encode()
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", _TAGS[arr.dtype.newbyteorder("<")], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload = arr.tobytes(order="C")
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    return buf.getvalue()


def loads_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    view = memoryview(data)
    if bytes(view[:8]) != MAGIC:
        raise CheckpointError("bad magic bytes")
    version, count = struct.unpack_from("<II", view, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 16
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, off)
        off += 2
        name = bytes(view[off:off + nlen]).decode()
        off += nlen
        tag, ndim = struct.unpack_from("<BB", view, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}Q", view, off)
        off += 8 * ndim
        (nbytes,) = struct.unpack_from("<Q", view, off)
        off += 8
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {name!r}")
        arr = np.frombuffer(bytes(view[off:off + nbytes]), dtype=_DTYPES[tag]).reshape(shape)
        off += nbytes
        entries[name] = arr
    manifest = {}
    if MANIFEST_KEY in entries:
        manifest = json.loads(entries.pop(MANIFEST_KEY).tobytes().decode())
    return entries, manifest


def save_checkpoint(path: str | os.PathLike, entries: Mapping[str, object],
                    manifest: Mapping | None = None) -> Path:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = dumps_checkpoint(entries, manifest)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    return loads_checkpoint(Path(path).read_bytes())


def module_entries(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module_entries(module: torch.nn.Module, entries: Mapping[str, np.ndarray], prefix: str) -> None:
    state = {}
    for k in module.state_dict():
        key = f"{prefix}/{k}"
        if key not in entries:
            raise CheckpointError(f"missing checkpoint entry {key!r}")
        state[k] = torch.from_numpy(np.array(entries[key]))
    module.load_state_dict(state)


def checksum(module_or_tensors) -> str:
    """sha256 over parameter bytes in name order."""
    import hashlib

    if isinstance(module_or_tensors, torch.nn.Module):
        items = sorted(module_or_tensors.state_dict().items())
    else:
        items = sorted(dict(module_or_tensors).items())
    h = hashlib.sha256()
    for name, t in items:
        h.update(name.encode())
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
