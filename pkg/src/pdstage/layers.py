"""Layer primitives: convolution, pooling, dense maps, activations, dropout,
layer normalization, multi-head self-attention and positional encoding.

Parameters may carry a leading *stream* axis so that the per-sensor networks
of the hybrid model run as one vectorised computation while keeping fully
independent weights per sensor.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Dict, Iterator, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import (
    ShapeError,
    Tensor,
    _make,
    add,
    as_tensor,
    matmul,
    mul,
    reduce,
    reshape,
    selu,
    transpose,
    unbroadcast,
)


_CONV_CHUNK_ELEMS = 1 << 15


def conv_output_length(length: int, width: int, stride: int = 1) -> int:
    """Output length of a valid-padding window operation."""
    return (length - width) // stride + 1


# ----------------------------------------------------------------------------
# functional forms


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid-padding 1D convolution, ``y[i] = sum_j x[i + j] * w[j] + b`` summed
    over input channels.

    Shapes: ``x (batch, C, L)`` with ``kernel (O, C, K)`` and ``bias (O,)``, or
    the stream-stacked form ``x (batch, S, C, L)`` with ``kernel (S, O, C, K)``
    and ``bias (S, O)``.

    The forward sum runs channel by channel, tap by tap, so results are
    bit-identical to a straightforward nested loop.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if kernel.ndim not in (3, 4) or x.ndim != kernel.ndim:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {kernel.shape}")
    if stride < 1:
        raise ValueError("stride must be positive")
    grouped = kernel.ndim == 4
    out_ch, in_ch, width = kernel.shape[-3:]
    length = x.shape[-1]
    if x.shape[-2] != in_ch or (grouped and x.shape[1] != kernel.shape[0]):
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {kernel.shape}")
    if length < width:
        raise ShapeError(f"conv1d: input length {length} shorter than kernel width {width}")
    out_len = conv_output_length(length, width, stride)
    span = stride * (out_len - 1) + 1
    xd, wd = x.data, kernel.data

    out = np.empty(x.shape[:-2] + (out_ch, out_len))
    # batch chunks keep the accumulator cache-resident
    per_item = max(1, out[:1].size)
    chunk = max(1, _CONV_CHUNK_ELEMS // per_item)
    for lo in range(0, x.shape[0], chunk):
        xc = xd[lo:lo + chunk]
        acc = np.zeros(xc.shape[:-2] + (out_ch, out_len))
        tmp = np.empty_like(acc)
        for c in range(in_ch):
            for j in range(width):
                np.multiply(xc[..., None, c, j:j + span:stride], wd[..., :, c, j, None], out=tmp)
                acc += tmp
        np.add(acc, bias.data[..., None], out=out[lo:lo + chunk])

    def backward(g):
        # im2col: (.., L_out, C*K) so both kernel and input grads are matmuls
        win = sliding_window_view(xd, width, axis=-1)[..., ::stride, :]
        nd = win.ndim
        cols = np.swapaxes(win, nd - 3, nd - 2).reshape(win.shape[:-3] + (out_len, in_ch * width))
        if grouped:
            n, s = g.shape[:2]
            g_s = np.moveaxis(g, 1, 0).transpose(0, 2, 1, 3).reshape(s, out_ch, n * out_len)
            c_s = np.moveaxis(cols, 1, 0).reshape(s, n * out_len, in_ch * width)
            gk = np.matmul(g_s, c_s).reshape(wd.shape)
            gb = g.sum(axis=(0, 3))
        else:
            n = g.shape[0]
            g_s = g.transpose(1, 0, 2).reshape(out_ch, n * out_len)
            gk = (g_s @ cols.reshape(n * out_len, in_ch * width)).reshape(wd.shape)
            gb = g.sum(axis=(0, 2))
        gx = np.zeros(xd.shape)
        for j in range(width):
            # (.., C, O) @ (.., O, L_out) -> (.., C, L_out)
            gx[..., j:j + span:stride] += np.matmul(np.swapaxes(wd[..., j], -1, -2), g)
        return gx, gk, gb

    return _make(out, "conv1d", (x, kernel, bias), backward)


def maxpool1d(x: Tensor, window: int, stride: int) -> Tensor:
    """Max over sliding windows of the last axis; ties go to the first index."""
    x = as_tensor(x)
    length = x.shape[-1]
    if window > length:
        raise ShapeError(f"maxpool1d: window {window} larger than length {length}")
    out_len = conv_output_length(length, window, stride)
    span = stride * (out_len - 1) + 1
    win = sliding_window_view(x.data, window, axis=-1)[..., ::stride, :]
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        for w in range(window):
            gx[..., w:w + span:stride] += g * (idx == w)
        return (gx,)

    return _make(np.ascontiguousarray(out), "maxpool1d", (x,), backward)


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ W + b`` over the last axis (linear when ``bias`` is None).

    A rank-3 ``weight (S, D_in, D_out)`` applies a separate map per stream to
    inputs shaped ``(..., S, L, D_in)``; its bias is ``(S, 1, D_out)``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[-2]:
        raise ShapeError(
            f"dense: input last dim {x.shape[-1]} != weight input dim {weight.shape[-2]}"
        )
    if x.ndim == 1:
        return reshape(dense(reshape(x, (1, -1)), weight, bias), (weight.shape[-1],))
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, "softmax", (x,), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout. Identity when not training or ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = counter_rng(0 if rng is None else int(rng))
    keep = rng.random(x.shape) >= rate
    return mul(x, keep / (1.0 - rate))


def counter_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator used for dropout masks."""
    return np.random.Generator(np.random.Philox(key=seed))


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply
    ``gain`` and ``offset``."""
    x, gain, offset = as_tensor(x), as_tensor(gain), as_tensor(offset)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gd = gain.data
    out = xhat * gd + offset.data
    gshape, oshape = gain.shape, offset.shape

    def backward(g):
        gxhat = g * gd
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, unbroadcast(g * xhat, gshape), unbroadcast(g, oshape)

    return _make(out, "layer_norm", (x, gain, offset), backward)


def global_average_pool(x: Tensor) -> Tensor:
    """Mean over the sequence axis: ``(..., seq, dim) -> (..., dim)``."""
    x = as_tensor(x)
    if x.shape[-2] < 1:
        raise ShapeError("global_average_pool needs a non-empty sequence")
    return reduce("mean", x, axis=x.ndim - 2)


@lru_cache(maxsize=64)
def _sinusoid_table(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    pair = np.arange(dim, dtype=np.float64)[None, :] // 2
    angle = pos / np.power(10000.0, 2.0 * pair / dim)
    table = np.where(np.arange(dim) % 2 == 0, np.sin(angle), np.cos(angle))
    table.setflags(write=False)
    return table


def sinusoid_table(length: int, dim: int) -> np.ndarray:
    """The raw (unscaled) sinusoidal table, shape ``(length, dim)``."""
    if length < 1 or dim < 1:
        raise ValueError("positional encoding needs length, dim >= 1")
    return _sinusoid_table(int(length), int(dim))


PE_SCALE = 1.0 / math.sqrt(2.0)


class PositionalEncoding:
    """Fixed sinusoidal table scaled by ``1/sqrt(2)``; not trainable."""

    def __init__(self, length: int, dim: int):
        self.length = length
        self.dim = dim
        self.table = Tensor(sinusoid_table(length, dim) * PE_SCALE)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-2:] != (self.length, self.dim):
            raise ShapeError(
                f"positional encoding ({self.length}, {self.dim}) does not fit input {x.shape}"
            )
        return add(x, self.table)


def positional_encoding(length: int, dim: int) -> PositionalEncoding:
    return PositionalEncoding(length, dim)


# ----------------------------------------------------------------------------
# parameterised layers


class Module:
    """Minimal container: parameters are ``Tensor`` attributes, children are
    ``Module`` attributes (or lists of them)."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())


def _fan_in_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape), requires_grad=True)


def _zeros(shape: tuple) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _lead(streams: Optional[int]) -> tuple:
    return () if streams is None else (streams,)


class Conv1dLayer(Module):
    def __init__(self, in_channels: int, out_channels: int, width: int, rng: np.random.Generator,
                 stride: int = 1, streams: Optional[int] = None):
        lead = _lead(streams)
        self.stride = stride
        self.kernel = _fan_in_normal(rng, lead + (out_channels, in_channels, width), in_channels * width)
        self.bias = _zeros(lead + (out_channels,))

    @property
    def width(self) -> int:
        return self.kernel.shape[-1]

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.kernel, self.bias, self.stride)


def conv1d_forward(layer: Conv1dLayer, x: Tensor) -> Tensor:
    return layer(x)


class Dense(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 streams: Optional[int] = None, use_bias: bool = True):
        self.weight = _fan_in_normal(rng, _lead(streams) + (in_dim, out_dim), in_dim)
        self.bias = _zeros((out_dim,) if streams is None else (streams, 1, out_dim)) if use_bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return dense(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, streams: Optional[int] = None, eps: float = 1e-5):
        shape = (dim,) if streams is None else (streams, 1, dim)
        self.gain = Tensor(np.ones(shape), requires_grad=True)
        self.offset = _zeros(shape)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.offset, self.eps)


def _split_heads(t: Tensor, heads: int) -> Tensor:
    *lead, length, dim = t.shape
    t = reshape(t, tuple(lead) + (length, heads, dim // heads))
    n = t.ndim
    return transpose(t, tuple(range(n - 3)) + (n - 2, n - 3, n - 1))


def _merge_heads(t: Tensor) -> Tensor:
    n = t.ndim
    t = transpose(t, tuple(range(n - 3)) + (n - 2, n - 3, n - 1))
    *lead, length, heads, dh = t.shape
    return reshape(t, tuple(lead) + (length, heads * dh))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tuple[Tensor, Tensor]:
    """``softmax(q k^T / sqrt(d)) v`` over the last two axes, no mask.
    Returns the context and the attention weights."""
    d = q.shape[-1]
    n = k.ndim
    kt = transpose(k, tuple(range(n - 2)) + (n - 1, n - 2))
    scores = mul(matmul(q, kt), 1.0 / math.sqrt(d))
    weights = softmax(scores, axis=-1)
    return matmul(weights, v), weights


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, streams: Optional[int] = None):
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by head count {heads}")
        self.heads = heads
        self.query = Dense(dim, dim, rng, streams)
        # a key bias only shifts each score row by a constant, which softmax
        # cancels; it would be a parameter with an identically zero gradient
        self.key = Dense(dim, dim, rng, streams, use_bias=False)
        self.value = Dense(dim, dim, rng, streams)
        self.out = Dense(dim, dim, rng, streams)

    def attend(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        q = _split_heads(self.query(x), self.heads)
        k = _split_heads(self.key(x), self.heads)
        v = _split_heads(self.value(x), self.heads)
        ctx, weights = scaled_dot_attention(q, k, v)
        return self.out(_merge_heads(ctx)), weights

    def __call__(self, x: Tensor) -> Tensor:
        return self.attend(x)[0]


class AttentionBlock(Module):
    """Pre-norm transformer encoder block:
    ``h = x + drop(MHA(LN(x)))``, ``y = h + drop(FFN(LN(h)))`` with a SeLU
    feed-forward of width ``4 * dim``."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 streams: Optional[int] = None, dropout_rate: float = 0.1,
                 ffn_multiplier: int = 4):
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by head count {heads}")
        self.head_count = heads
        self.model_dim = dim
        self.dropout_rate = dropout_rate
        self.norm1 = LayerNorm(dim, streams)
        self.attention = MultiHeadAttention(dim, heads, rng, streams)
        self.norm2 = LayerNorm(dim, streams)
        self.ffn_in = Dense(dim, ffn_multiplier * dim, rng, streams)
        self.ffn_out = Dense(ffn_multiplier * dim, dim, rng, streams)

    def __call__(self, x: Tensor, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        if x.shape[-1] != self.model_dim:
            raise ShapeError(f"attention block expects dim {self.model_dim}, got input {x.shape}")
        h = add(x, dropout(self.attention(self.norm1(x)), self.dropout_rate, training, rng))
        f = self.ffn_out(selu(self.ffn_in(self.norm2(h))))
        return add(h, dropout(f, self.dropout_rate, training, rng))


def multi_head_attention(block: AttentionBlock, x: Tensor, training: bool = False,
                         rng: Optional[np.random.Generator] = None) -> Tensor:
    return block(x, training, rng)
