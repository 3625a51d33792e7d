"""Differentiable substrate: MLPs, Adam, global-norm clipping, gradient checks, checkpoints.

Tensors and reverse-mode gradients come from torch; this module adds the
pieces whose exact behaviour the training regimen pins down.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import NonFiniteError, ShapeError

ACTIVATIONS = {
    "silu": torch.nn.functional.silu,
    "identity": lambda x: x,
    "sigmoid": torch.sigmoid,
}

DTYPES = {"float64": torch.float64, "float32": torch.float32}


def resolve_dtype(precision: str) -> torch.dtype:
    try:
        return DTYPES[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected float64 or float32") from None


# ---------------------------------------------------------------------------
# Primitives with explicit shape contracts
# ---------------------------------------------------------------------------


def affine(W: torch.Tensor, x: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ W.T + b`` with ``W`` shaped (out, in)."""
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"affine: input width {x.shape[-1]} != weight fan-in {W.shape[1]}")
    y = x @ W.T
    return y if b is None else y + b


def scatter_add(src: torch.Tensor, index: torch.Tensor, size: int) -> torch.Tensor:
    """Sum rows of ``src`` into ``size`` buckets; accumulation follows row order."""
    if src.shape[0] != index.shape[0]:
        raise ShapeError(f"scatter_add: {src.shape[0]} rows but {index.shape[0]} indices")
    out = src.new_zeros((size,) + tuple(src.shape[1:]))
    return out.index_add(0, index, src)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    if x.shape[dim] == 0:
        raise ShapeError("softmax over an empty axis")
    return torch.softmax(x, dim=dim)


def dropout(x: torch.Tensor, p: float, train: bool) -> torch.Tensor:
    """Inverted dropout: scaled by 1/(1-p) in training, identity otherwise."""
    if not train or p == 0.0:
        return x
    keep = (torch.rand_like(x) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


# ---------------------------------------------------------------------------
# MLPs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths including input, e.g. ``(108, 64, 32)`` is two affine layers."""

    widths: tuple[int, ...]
    activation: str = "silu"
    dropout: float = 0.0

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("MlpSpec needs at least one layer (two widths)")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


def init_affine(fan_in: int, fan_out: int, generator: torch.Generator | None = None, scale: float = 1.0):
    """Uniform(-s/sqrt(fan_in), s/sqrt(fan_in)) weights and zero bias."""
    bound = scale / math.sqrt(fan_in)
    W = (torch.rand(fan_out, fan_in, generator=generator, dtype=torch.float64) * 2 - 1) * bound
    return W, torch.zeros(fan_out, dtype=torch.float64)


def mlp_apply(spec: MlpSpec, params: Sequence[tuple[torch.Tensor, torch.Tensor]], x: torch.Tensor, train: bool) -> torch.Tensor:
    """Affine layers with the configured activation and dropout between them; last layer is linear."""
    if len(params) != len(spec.widths) - 1:
        raise ShapeError(f"mlp_apply: {len(params)} layers given, spec has {len(spec.widths) - 1}")
    if x.shape[-1] != spec.widths[0]:
        raise ShapeError(f"mlp_apply: input width {x.shape[-1]} != {spec.widths[0]}")
    act = ACTIVATIONS[spec.activation]
    for k, (W, b) in enumerate(params):
        x = affine(W, x, b)
        if k < len(params) - 1:
            x = dropout(act(x), spec.dropout, train)
    return x


class Mlp(nn.Module):
    """Module wrapper around :func:`mlp_apply`."""

    def __init__(self, spec: MlpSpec, out_scale: float = 1.0):
        super().__init__()
        self.spec = spec
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        n_layers = len(spec.widths) - 1
        for k, (a, b) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
            W, bias = init_affine(a, b, scale=out_scale if k == n_layers - 1 else 1.0)
            self.weights.append(nn.Parameter(W))
            self.biases.append(nn.Parameter(bias))

    def forward(self, x: torch.Tensor, train: bool = False) -> torch.Tensor:
        return mlp_apply(self.spec, list(zip(self.weights, self.biases)), x, train)


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``."""
    if len(params) != len(grads):
        raise ShapeError("adam_step: params and grads differ in length")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    for k, g in enumerate(grads):
        if g is not None and not torch.isfinite(g).all():
            raise NonFiniteError(f"adam_step: non-finite gradient in parameter #{k}")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape:
                raise ShapeError(f"adam_step: grad shape {tuple(g.shape)} != param {tuple(p.shape)}")
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


def global_norm(grads: Sequence[torch.Tensor | None]) -> float:
    total = 0.0
    for g in grads:
        if g is not None:
            total += float(torch.sum(g.double() ** 2))
    return math.sqrt(total)


def clip_global_norm(grads: Sequence[torch.Tensor | None], max_norm: float = 0.5) -> tuple[list, float]:
    """Scale all gradients by ``max_norm / norm`` when the joint L2 norm exceeds ``max_norm``.

    Returns the (possibly) scaled gradients and the pre-clip norm.
    """
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads), norm
    scale = max_norm / norm
    return [None if g is None else g * scale for g in grads], norm


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    worst: tuple[str, int] | None
    per_param: dict
    # Tensors with no coordinate above ``min_abs_grad``.
    fallback: list = field(default_factory=list)


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    params: dict[str, torch.Tensor] | Sequence[torch.Tensor],
    eps: float = 1e-5,
    n_samples: int = 64,
    seed: int = 0,
    min_per_param: int = 1,
    floor: float = 1e-7,
    min_abs_grad: float = 0.0,
) -> GradCheckResult:
    """Compare autograd gradients with central differences on sampled coordinates.

    Coordinates are sampled across every named parameter (at least
    ``min_per_param`` each, ``n_samples`` in total). Relative error per
    coordinate is ``|a - n| / max(|a|, |n|, floor)``.

    With ``min_abs_grad > 0`` coordinates are drawn only from those whose
    analytic gradient is at least that large, where a central difference
    resolves the derivative above rounding noise (roughly
    ``ulp(loss) / eps``). A tensor with no such coordinate contributes its
    largest-gradient coordinates instead. ``loss_fn`` must be
    deterministic; a loss that differs between two identical calls (e.g.
    with dropout active) is rejected.
    """
    if not isinstance(params, dict):
        params = {f"p{k}": p for k, p in enumerate(params)}
    names = list(params)
    tensors = [params[n] for n in names]

    with torch.no_grad():
        a = float(loss_fn())
        b = float(loss_fn())
    if a != b:
        raise ValueError("finite_difference_check: loss_fn is not deterministic (dropout enabled?)")

    for p in tensors:
        p.grad = None
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)

    rng = np.random.default_rng(seed)
    pools, fallback = [], []
    for name, p, g in zip(names, tensors, analytic):
        mag = np.zeros(p.numel()) if g is None else g.detach().abs().reshape(-1).cpu().numpy()
        pool = np.flatnonzero(mag >= min_abs_grad) if min_abs_grad > 0 else np.arange(p.numel())
        if len(pool) == 0:
            pool = np.argsort(-mag, kind="stable")[:min_per_param]
            fallback.append(name)
        pools.append(pool)
    sizes = np.array([len(pool) for pool in pools])
    picks: list[tuple[int, int]] = []
    for k, pool in enumerate(pools):
        m = min(len(pool), min_per_param)
        picks.extend((k, int(i)) for i in rng.choice(pool, size=m, replace=False))
    remaining = max(0, n_samples - len(picks))
    if remaining:
        weights = sizes / sizes.sum()
        ks = rng.choice(len(tensors), size=remaining, p=weights)
        picks.extend((int(k), int(pools[k][rng.integers(sizes[k])])) for k in ks)

    worst, worst_err = None, 0.0
    per_param: dict[str, float] = {}
    with torch.no_grad():
        for k, i in picks:
            flat = tensors[k].view(-1)
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(loss_fn())
            flat[i] = orig - eps
            down = float(loss_fn())
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            g = analytic[k]
            an = 0.0 if g is None else float(g.reshape(-1)[i])
            err = abs(an - numeric) / max(abs(an), abs(numeric), floor)
            per_param[names[k]] = max(per_param.get(names[k], 0.0), err)
            if err >= worst_err:
                worst_err, worst = err, (names[k], i)
    return GradCheckResult(worst_err, len(picks), worst, per_param, fallback)


# ---------------------------------------------------------------------------
# Checkpoint file
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CDRCKPT\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, torch.Tensor | np.ndarray], meta: dict | None = None) -> None:
    """Write a named-tensor table.

    Layout (little-endian): 8-byte magic, uint32 version, uint32 metadata
    length + UTF-8 JSON metadata, uint32 tensor count, then per tensor:
    uint16 name length + UTF-8 name, uint8 ndim, uint64 per dimension, and
    the values as float64.
    """
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
            arr = np.array(arr, dtype="<f8", order="C")  # keeps 0-d shapes
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)) + nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    meta = json.loads(data[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
        tensors[name] = arr
    return tensors, meta
