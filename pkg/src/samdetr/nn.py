"""Layers, attention, position embeddings, focal loss and AdamW."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor

__all__ = [
    "Parameter",
    "Module",
    "Linear",
    "MLP",
    "LayerNorm",
    "Conv2d",
    "MultiHeadAttention",
    "sinusoidal_embed_2d",
    "focal_loss",
    "AdamW",
    "OptimizerState",
    "adamw_step",
    "clip_grad_norm",
]


class Parameter(Tensor):
    """A trainable leaf tensor that knows how to (re)initialize itself.

    ``init`` is one of ``("xavier", fan_in, fan_out)``, ``("normal", std)``,
    ``("const", value)``, ``("array", values)`` or ``("fn", draw)`` where
    ``draw(rng, shape)`` returns the values.
    """

    __slots__ = ("init",)

    def __init__(self, shape, init=("const", 0.0)):
        super().__init__(np.zeros(shape), requires_grad=True)
        self.init = init

    def reset(self, rng: np.random.Generator) -> None:
        kind = self.init[0]
        if kind == "xavier":
            fan_in, fan_out = self.init[1], self.init[2]
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            values = rng.uniform(-bound, bound, self.shape)
        elif kind == "normal":
            values = rng.normal(0.0, self.init[1], self.shape)
        elif kind == "const":
            values = np.full(self.shape, float(self.init[1]))
        elif kind == "array":
            values = np.broadcast_to(np.asarray(self.init[1], dtype=np.float64), self.shape)
        elif kind == "fn":
            values = self.init[1](rng, self.shape)
        else:
            raise ValueError(f"unknown initializer {kind!r}")
        self.assign(values)

    def assign(self, values) -> None:
        arr = np.array(values, dtype=np.float64)
        if arr.shape != self.shape:
            raise DimensionError(f"cannot assign {arr.shape} to parameter of shape {self.shape}")
        arr.flags.writeable = False
        self.data = arr


class Module:
    """Container that discovers parameters and sub-modules through attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def reset_parameters(self, seed: int) -> None:
        """Initialize each parameter from a stream keyed by ``(seed, name)``.

        Keying by name means two models that share a sub-module layout get
        identical initial values for the shared part.
        """
        for name, p in self.named_parameters():
            key = zlib.crc32(name.encode("utf-8"))
            p.reset(np.random.default_rng([int(seed), key]))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, bias: bool = True):
        self.weight = Parameter((n_in, n_out), ("xavier", n_in, n_out))
        self.bias = Parameter((n_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class MLP(Module):
    """Stack of linear layers with relu between them (not after the last)."""

    def __init__(self, dims: Sequence[int]):
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output widths")
        self.layers = [Linear(a, b) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = Parameter((d,), ("const", 1.0))
        self.shift = Parameter((d,))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.shift)


class Conv2d(Module):
    """Convolution layer; ``channels_last`` selects ``H x W x C`` input/output."""

    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, padding: int = 0,
                 channels_last: bool = False):
        fan_in, fan_out = c_in * k * k, c_out * k * k
        self.weight = Parameter((c_out, c_in, k, k), ("xavier", fan_in, fan_out))
        self.bias = Parameter((c_out,))
        self.stride = stride
        self.padding = padding
        self.channels_last = channels_last

    def __call__(self, x: Tensor) -> Tensor:
        conv = ad.conv2d_nhwc if self.channels_last else ad.conv2d
        return conv(x, self.weight, self.bias, self.stride, self.padding)


class MultiHeadAttention(Module):
    """Scaled dot-product attention split over ``n_heads`` heads.

    Position embeddings are added to queries and keys before projection, never
    to values. ``bias`` (``n_heads x N x S``) is added to the logits before the
    softmax.
    """

    def __init__(self, d: int, n_heads: int):
        if d % n_heads:
            raise ContractError(f"model width {d} is not divisible by head count {n_heads}")
        self.d = d
        self.n_heads = n_heads
        self.w_q = Parameter((d, d), ("xavier", d, d))
        self.w_k = Parameter((d, d), ("xavier", d, d))
        self.w_v = Parameter((d, d), ("xavier", d, d))
        self.w_o = Parameter((d, d), ("xavier", d, d))

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    def _split(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        return ad.transpose(ad.reshape(x, (n, self.n_heads, self.head_dim)), (1, 0, 2))

    def __call__(self, q, q_pos, k, k_pos, v, bias: Tensor | None = None):
        for name, t in (("query", q), ("key", k), ("value", v)):
            if t.ndim != 2 or t.shape[1] != self.d:
                raise DimensionError(f"attention {name} has shape {t.shape}, expected (*, {self.d})")
        if k.shape[0] != v.shape[0]:
            raise DimensionError(f"attention keys {k.shape} and values {v.shape} differ in length")
        n, s = q.shape[0], k.shape[0]
        if bias is not None and bias.shape != (self.n_heads, n, s):
            raise DimensionError(f"attention bias {bias.shape}, expected {(self.n_heads, n, s)}")
        q_in = q if q_pos is None else ad.add(q, q_pos)
        k_in = k if k_pos is None else ad.add(k, k_pos)
        qh = self._split(ad.matmul(q_in, self.w_q))
        kh = self._split(ad.matmul(k_in, self.w_k))
        vh = self._split(ad.matmul(v, self.w_v))
        logits = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(self.head_dim))
        if bias is not None:
            logits = ad.add(logits, bias)
        weights = ad.softmax(logits, axis=-1)
        heads = ad.matmul(weights, vh)
        merged = ad.reshape(ad.transpose(heads, (1, 0, 2)), (n, self.d))
        return ad.matmul(merged, self.w_o), weights


def sinusoidal_embed_2d(coords, dim: int, temperature: float = 10000.0) -> Tensor:
    """Sine/cosine embedding of normalized ``(x, y)`` coordinates.

    ``coords`` has shape ``(..., 2)``. The output has shape ``(..., dim)``: the
    first half encodes ``x`` and the second ``y``; within a half, frequency
    ``i`` contributes ``sin`` then ``cos`` of ``2*pi*c / temperature**(4i/dim)``.
    Differentiable with respect to ``coords`` when it is a Tensor.
    """
    if dim % 4:
        raise ContractError(f"embedding width {dim} is not divisible by 4")
    coords = ad.tensor(coords) if not isinstance(coords, Tensor) else coords
    if coords.shape[-1] != 2:
        raise DimensionError(f"coordinates must end in 2, got {coords.shape}")
    n_freq = dim // 4
    freq = 2.0 * math.pi / temperature ** (4.0 * np.arange(n_freq) / dim)
    c = coords.data
    # phase[..., axis, i]
    phase = c[..., :, None] * freq
    s, co = np.sin(phase), np.cos(phase)
    out = np.stack([s, co], axis=-1).reshape(c.shape[:-1] + (dim,))

    def grad_fn(g):
        g = g.reshape(c.shape[:-1] + (2, n_freq, 2))
        dphase = g[..., 0] * co - g[..., 1] * s
        return ((dphase * freq).sum(axis=-1),)

    return ad.record(out, (coords,), grad_fn)


def focal_loss(logits: Tensor, targets, alpha: float = 0.25, gamma: float = 2.0, reduction: str = "mean") -> Tensor:
    """Sigmoid focal loss over ``N x C`` logits.

    ``targets`` holds one class index per row, or ``-1`` for no object (an
    all-zero target row). Per row the class terms are summed; ``reduction``
    then takes the mean over rows (default), the sum, or nothing.
    """
    n, c = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise DimensionError(f"{targets.shape[0]} targets for {n} rows of logits")
    if np.any(targets >= c) or np.any(targets < -1):
        raise ContractError(f"target index out of range for {c} classes: {targets.tolist()}")
    t = np.zeros((n, c))
    rows = np.flatnonzero(targets >= 0)
    t[rows, targets[rows]] = 1.0
    p = ad.sigmoid(logits)
    # stable binary cross-entropy: softplus(x) - x*t
    ce = ad.sub(ad.softplus(logits), ad.mul(logits, t))
    p_t = ad.add(ad.mul(p, 2.0 * t - 1.0), 1.0 - t)
    modulator = ad.power(ad.sub(1.0, p_t), gamma) if gamma else None
    alpha_t = alpha * t + (1.0 - alpha) * (1.0 - t)
    per = ad.mul(ce, alpha_t)
    if modulator is not None:
        per = ad.mul(per, modulator)
    per_row = ad.reduce_sum(per, axis=1)
    if reduction == "mean":
        return ad.reduce_mean(per_row)
    if reduction == "sum":
        return ad.reduce_sum(per_row)
    if reduction == "none":
        return per_row
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass
class OptimizerState:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)


def adamw_step(params: Sequence[Parameter], grads: Sequence[np.ndarray], state: OptimizerState,
               lr_scales: Sequence[float] | None = None) -> None:
    """One AdamW update with decoupled weight decay, in place on ``params``."""
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.exp_avg:
        state.exp_avg = [np.zeros(p.shape) for p in params]
        state.exp_avg_sq = [np.zeros(p.shape) for p in params]
    if len(state.exp_avg) != len(params):
        raise DimensionError("optimizer state does not match the parameter list")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64)
        m, v = state.exp_avg[i], state.exp_avg_sq[i]
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(f"parameter {i}: shape {p.shape}, gradient {g.shape}, state {m.shape}")
        lr = state.lr * (lr_scales[i] if lr_scales is not None else 1.0)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        new = p.data * (1.0 - lr * state.weight_decay)
        new = new - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new.flags.writeable = False
        p.data = new


class AdamW:
    """AdamW over parameter groups, each with its own learning-rate multiplier."""

    def __init__(self, groups, lr: float = 1e-4, weight_decay: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if isinstance(groups, (list, tuple)) and groups and isinstance(groups[0], Tensor):
            groups = [{"params": list(groups)}]
        self.params: list[Parameter] = []
        self.lr_scales: list[float] = []
        for group in groups:
            for p in group["params"]:
                self.params.append(p)
                self.lr_scales.append(float(group.get("lr_scale", 1.0)))
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay, beta1=betas[0], beta2=betas[1], eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state, self.lr_scales)


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return total
