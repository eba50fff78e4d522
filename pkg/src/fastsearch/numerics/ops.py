"""Convolution, bilinear resize and the five searchable operators."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .tensor import DTYPE, Tensor, _make, add, mul, parameter, relu

SEARCHABLE_KINDS = ("skip", "conv3x3", "conv3x3_x2", "zoomed_conv", "zoomed_conv_x2")


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int | None = None) -> Tensor:
    """Cross-correlation of ``x`` (N,C,H,W) with ``w`` (O,C,k,k), zero padded."""
    if stride not in (1, 2):
        raise ValueError(f"unsupported stride {stride}")
    n, c, h, wd = x.shape
    o, c2, k, _ = w.shape
    if c != c2:
        raise ValueError(f"channel mismatch: input has {c}, kernel expects {c2}")
    pad = k // 2 if padding is None else padding
    hp, wp = h + 2 * pad, wd + 2 * pad
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    # channels-last im2col; column order (ki, kj, c)
    xl = np.zeros((n, hp, wp, c), dtype=DTYPE)
    xl[:, pad : pad + h, pad : pad + wd, :] = x.data.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, k, k, c), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xl[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    cols = cols.reshape(n * ho * wo, k * k * c)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(o, k * k * c)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = None
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, k, k, c)
            gxl = np.zeros((n, hp, wp, c), dtype=DTYPE)
            for i in range(k):
                for j in range(k):
                    gxl[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[:, :, :, i, j, :]
            gx = gxl[:, pad : pad + h, pad : pad + wd, :].transpose(0, 3, 1, 2)
        return gx, gw

    return _make(np.ascontiguousarray(out), (x, w), back)


@lru_cache(maxsize=None)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D bilinear interpolation weights, half-pixel centres (align_corners=False)."""
    a = np.zeros((n_out, n_in), dtype=DTYPE)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        a[o, i0] += 1.0 - lam
        a[o, i1] += lam
    a.setflags(write=False)
    return a


def resize(x: Tensor, size: tuple[int, int]) -> Tensor:
    h, w = x.shape[-2:]
    if (h, w) == tuple(size):
        return x
    ah = bilinear_matrix(h, size[0])
    aw = bilinear_matrix(w, size[1])
    out = ah @ x.data @ aw.T
    return _make(out, (x,), lambda g: (ah.T @ g @ aw,))


def channels(x: Tensor, c: int) -> Tensor:
    """Keep the first ``c`` channels, zero-filling when ``x`` is narrower."""
    n, cin, h, w = x.shape
    if c == cin:
        return x
    if c < cin:
        return _make(x.data[:, :c], (x,), lambda g: (np.pad(g, ((0, 0), (0, cin - c), (0, 0), (0, 0))),))
    out = np.zeros((n, c, h, w), dtype=DTYPE)
    out[:, :cin] = x.data
    return _make(out, (x,), lambda g: (g[:, :cin],))


def prefix(p: Tensor, *sizes: int) -> Tensor:
    """Leading sub-block of a parameter; gradient lands in the same corner."""
    idx = tuple(slice(0, s) for s in sizes)
    if all(s == d for s, d in zip(sizes, p.shape)):
        return p

    def back(g):
        full = np.zeros(p.shape, dtype=DTYPE)
        full[idx] = g
        return (full,)

    return _make(p.data[idx], (p,), back)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance per sample and channel over the spatial axes."""
    axes = (2, 3)
    xc = x.data - x.data.mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
    y = xc * inv

    def back(g):
        gm = g.mean(axis=axes, keepdims=True)
        gy = (g * y).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make(y, (x,), back)


def affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel scale and shift; stands in for batch normalisation."""
    c = x.shape[1]
    s = prefix(scale, c).reshape(1, c, 1, 1)
    b = prefix(shift, c).reshape(1, c, 1, 1)
    return add(mul(x, s), b)


@dataclass
class ConvUnit:
    """conv -> instance norm -> affine -> relu, stored at maximal width."""

    weight: Tensor
    scale: Tensor
    shift: Tensor
    norm: bool = True

    @classmethod
    def init(cls, rng: np.random.Generator, c_out: int, c_in: int, k: int = 3, fan_in: int | None = None,
             norm: bool = True):
        fan = (fan_in or c_in) * k * k
        w = rng.normal(0.0, np.sqrt(2.0 / fan), size=(c_out, c_in, k, k))
        return cls(parameter(w), parameter(np.ones(c_out)), parameter(np.zeros(c_out)), norm)

    def __call__(self, x: Tensor, c_out: int, stride: int = 1, act: bool = True) -> Tensor:
        w = prefix(self.weight, c_out, x.shape[1])
        y = conv2d(x, w, stride=stride)
        if self.norm:
            y = instance_norm(y)
        y = affine(y, self.scale, self.shift)
        return relu(y) if act else y

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.scale, self.shift]


@dataclass
class Superkernel:
    """Maximal-width weights for one operator; widths are nested leading slices."""

    kind: str
    max_in: int
    max_out: int
    units: list[ConvUnit] = field(default_factory=list)

    @classmethod
    def init(cls, kind: str, max_in: int, max_out: int, stride: int, rng: np.random.Generator,
             fan_in: int | None = None) -> "Superkernel":
        if kind not in SEARCHABLE_KINDS:
            raise KeyError(f"unknown operator kind {kind!r}")
        units: list[ConvUnit] = []
        if kind == "skip":
            if stride == 2:
                units.append(ConvUnit.init(rng, max_out, max_in, k=1, fan_in=fan_in))
        else:
            units.append(ConvUnit.init(rng, max_out, max_in, fan_in=fan_in))
            if kind.endswith("_x2"):
                units.append(ConvUnit.init(rng, max_out, max_out, fan_in=fan_in))
        return cls(kind, max_in, max_out, units)

    def slice(self, c_in: int, c_out: int) -> list[np.ndarray]:
        """Weight views realising width (c_in -> c_out); prefixes of the maximal kernel."""
        views = []
        for i, u in enumerate(self.units):
            cin = c_in if i == 0 else c_out
            views.append(u.weight.data[:c_out, :cin])
        return views

    def parameters(self) -> list[Tensor]:
        return [p for u in self.units for p in u.parameters()]


def op_forward(kind: str, x: Tensor, kernel: Superkernel, c_out: int, stride: int = 1) -> Tensor:
    """Apply one searchable operator; output spatial size is input size / stride."""
    if stride not in (1, 2):
        raise ValueError(f"unsupported stride {stride}")
    if x.shape[1] > kernel.max_in or c_out > kernel.max_out:
        raise ValueError(
            f"width ({x.shape[1]}->{c_out}) exceeds superkernel ({kernel.max_in}->{kernel.max_out})"
        )
    h, w = x.shape[-2:]
    if stride == 2 and (h % 2 or w % 2):
        raise ValueError(f"stride 2 needs even spatial dims, got {h}x{w}")
    out_hw = (h // stride, w // stride)
    if kind == "skip":
        if stride == 1:
            return channels(x, c_out)
        return kernel.units[0](x, c_out, stride=2, act=False)
    if kind in ("conv3x3", "conv3x3_x2"):
        y = kernel.units[0](x, c_out, stride=stride)
        if kind == "conv3x3_x2":
            y = kernel.units[1](y, c_out)
        return y
    if kind in ("zoomed_conv", "zoomed_conv_x2"):
        z = resize(x, (max(h // 2, 1), max(w // 2, 1)))
        z = kernel.units[0](z, c_out, stride=stride if min(z.shape[-2:]) >= 2 else 1)
        if kind == "zoomed_conv_x2":
            z = kernel.units[1](z, c_out)
        return resize(z, out_hw)
    raise KeyError(f"unknown operator kind {kind!r}")
