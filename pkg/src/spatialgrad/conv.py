"""Direct 2-D convolution: forward pass and both backward passes.

The forward map is

    Y[n, co, h, w] = sum_{ci, kh, kw} W[co, ci, kh, kw] * Xp[n, ci, h*s + kh, w*s + kw]

with Xp the zero-padded input. The weight gradient is the same contraction
with dY in place of W,

    dW[co, ci, kh, kw] = sum_{n, h, w} dY[n, co, h, w] * Xp[n, ci, h*s + kh, w*s + kw],

which is a function of the input and the output gradient only; the weight
tensor never appears, so ``conv_backward_weights`` does not take it.

All three operations are direct convolutions (no FFT): the spatial window
products are evaluated with a vectorised einsum over an overlapping-window
view of the padded input, which keeps the reduction order fixed and the
results deterministic for a given input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, require_rank4


@dataclass(frozen=True)
class ConvSpec:
    """Static description of one convolution: channel counts, kernel, stride, padding."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        kx, ky = self.kernel
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"channel counts must be positive, got {self}")
        if kx < 1 or ky < 1:
            raise ValueError(f"kernel dims must be >= 1, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be non-negative, got {self.padding}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, *self.kernel)

    def out_size(self, height: int, width: int) -> tuple[int, int]:
        kx, ky = self.kernel
        oh = (height + 2 * self.padding - kx) // self.stride + 1
        ow = (width + 2 * self.padding - ky) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"non-positive output size {oh}x{ow} for input {height}x{width} with {self}"
            )
        return oh, ow


def _check_input(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    x = require_rank4(x, "input")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    return x


def _check_weights(w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    w = require_rank4(w, "weights")
    if w.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {w.shape} does not match spec {spec.weight_shape}")
    return w


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Overlapping-window view [N, Ci, H', W', kx, ky] of the padded input."""
    view = sliding_window_view(xp, spec.kernel, axis=(2, 3))
    if spec.stride > 1:
        view = view[:, :, :: spec.stride, :: spec.stride]
    return view


def conv_forward(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Convolve x [N, Ci, H, W] with w [Co, Ci, kx, ky] -> [N, Co, H', W']."""
    x = _check_input(x, spec)
    w = _check_weights(w, spec)
    spec.out_size(x.shape[2], x.shape[3])
    windows = _windows(_pad(x, spec.padding), spec)
    return np.einsum("oikl,nihwkl->nohw", w, windows, optimize=True)


def conv_backward_weights(dy: np.ndarray, x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Loss gradient w.r.t. the weights; depends on dY and X only, never on W."""
    x = _check_input(x, spec)
    dy = require_rank4(dy, "output gradient")
    oh, ow = spec.out_size(x.shape[2], x.shape[3])
    expected = (x.shape[0], spec.out_channels, oh, ow)
    if dy.shape != expected:
        raise ShapeError(f"output gradient shape {dy.shape}, expected {expected}")
    windows = _windows(_pad(x, spec.padding), spec)
    return np.einsum("nohw,nihwkl->oikl", dy, windows, optimize=True)


def conv_backward_input(dy: np.ndarray, w: np.ndarray, spec: ConvSpec,
                        input_hw: tuple[int, int]) -> np.ndarray:
    """Loss gradient w.r.t. the input, for an input of spatial size ``input_hw``."""
    w = _check_weights(w, spec)
    dy = require_rank4(dy, "output gradient")
    height, width = input_hw
    oh, ow = spec.out_size(height, width)
    if dy.shape[1:] != (spec.out_channels, oh, ow):
        raise ShapeError(
            f"output gradient shape {dy.shape}, expected (N, {spec.out_channels}, {oh}, {ow})"
        )
    pad, s = spec.padding, spec.stride
    kx, ky = spec.kernel
    n = dy.shape[0]
    dxp = np.zeros((n, spec.in_channels, height + 2 * pad, width + 2 * pad), dtype=dy.dtype)
    # Scatter each kernel offset's contribution back onto the padded grid.
    for kh in range(kx):
        for kw in range(ky):
            contrib = np.einsum("oi,nohw->nihw", w[:, :, kh, kw], dy, optimize=True)
            dxp[:, :, kh : kh + s * (oh - 1) + 1 : s, kw : kw + s * (ow - 1) + 1 : s] += contrib
    if pad == 0:
        return dxp
    return dxp[:, :, pad : pad + height, pad : pad + width]
