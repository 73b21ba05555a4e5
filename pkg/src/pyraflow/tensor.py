"""Dense float32 tensors and the hand-differentiated kernels built on them.

A tensor is a C-contiguous ``numpy.float32`` array shaped ``(C, H, W)``.
Every kernel here also accepts a leading batch axis ``(N, C, H, W)`` and
returns arrays with the same rank it was given.

Convolutions with kernels of size 5 and up run through real FFTs (zero
padded so that no circular wrap reaches the cropped output); smaller kernels
use an im2col matrix product. Both paths compute the same zero-padded
"same" correlation and are cross-checked in the test suite.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft as sfft
from numpy.lib.stride_tricks import sliding_window_view
from threadpoolctl import threadpool_limits

from .errors import ConfigError, NumericError

DTYPE = np.float32
ACTIVATIONS = ("relu", "none")
FFT_MIN_KERNEL = 5


def _default_threads() -> int:
    env = os.environ.get("PYRAFLOW_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"PYRAFLOW_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise ConfigError("PYRAFLOW_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


_threads = _default_threads()
_blas_limiter = None


def get_threads() -> int:
    return _threads


def set_threads(n: int) -> None:
    """Cap internal parallelism (FFT workers and BLAS threads).

    Results are bit-identical for a fixed thread count.
    """
    global _threads, _blas_limiter
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    _threads = int(n)
    if _blas_limiter is not None:
        _blas_limiter.restore_original_limits()
    _blas_limiter = threadpool_limits(limits=_threads, user_api="blas")


def as_tensor(data, channels: int | None = None) -> np.ndarray:
    """Return ``data`` as a contiguous float32 (C, H, W) array, validating it."""
    arr = np.ascontiguousarray(data, dtype=DTYPE)
    if arr.ndim != 3:
        raise ConfigError(f"tensor must be rank 3 (C, H, W), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ConfigError(f"tensor dimensions must be >= 1, got {arr.shape}")
    if channels is not None and arr.shape[0] != channels:
        raise ConfigError(f"expected {channels} channels, got {arr.shape[0]}")
    return arr


def check_finite(arr: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains non-finite values")


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ConfigError(f"expected a (C,H,W) or (N,C,H,W) array, got shape {x.shape}")


def _unbatch(x: np.ndarray, squeeze: bool) -> np.ndarray:
    return x[0] if squeeze else x


# ---------------------------------------------------------------------------
# convolution


@dataclass(eq=False)
class ConvLayer:
    """Square odd-sized convolution with bias and optional ReLU."""

    weight: np.ndarray  # (out, in, k, k)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=DTYPE)
        self.bias = np.ascontiguousarray(self.bias, dtype=DTYPE)
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ConfigError(f"conv weight must be (out, in, k, k), got {self.weight.shape}")
        if self.weight.shape[2] % 2 != 1:
            raise ConfigError(f"kernel size must be odd, got {self.weight.shape[2]}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ConfigError(f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} outputs")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @classmethod
    def zeros(cls, in_channels: int, out_channels: int, k: int, activation: str = "relu") -> "ConvLayer":
        return cls(np.zeros((out_channels, in_channels, k, k), DTYPE), np.zeros(out_channels, DTYPE), activation)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    @property
    def n_params(self) -> int:
        return self.out_channels * (self.in_channels * self.k * self.k + 1)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(H, W, N, C) -> (H*W*N, C*k*k) patches with zero padding."""
    h, w, n, c = x.shape
    if k == 1:
        return x.reshape(h * w * n, c)
    p = k // 2
    xp = np.pad(x, ((p, p), (p, p), (0, 0), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(0, 1))  # H, W, N, C, k, k
    return win.reshape(h * w * n, c * k * k)


def _correlate_direct(x: np.ndarray, weight: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, w, n, _ = x.shape
    cols = _im2col(x, weight.shape[2])
    out = cols @ weight.reshape(weight.shape[0], -1).T
    return out.reshape(h, w, n, -1), cols


def _fft_size(h: int, w: int, k: int) -> tuple[int, int]:
    return sfft.next_fast_len(h + k - 1, real=True), sfft.next_fast_len(w + k - 1, real=True)


@lru_cache(maxsize=None)
def _dft_tables(lh: int, lw: int, k: int):
    """Dense DFT matrices for k*k taps at lags -p..p on an (lh, lw) real-FFT grid.

    Returns the forward table (F, k*k) mapping centered kernel taps to
    spectrum bins with phase exp(+i w.(t - p)), and the inverse table
    (k*k, F) that reads the real signal back at lags -p..p from a half
    spectrum. Both are split into real and imaginary parts.
    """
    p = k // 2
    lf = lw // 2 + 1
    fy = np.arange(lh)[:, None, None, None]
    fx = np.arange(lf)[None, :, None, None]
    ty = np.arange(k)[None, None, :, None]
    tx = np.arange(k)[None, None, None, :]
    phase = np.exp(2j * np.pi * (fy * (ty - p) / lh + fx * (tx - p) / lw))
    fwd = phase.reshape(lh * lf, k * k)
    # half-spectrum bins other than DC and Nyquist stand for a conjugate pair
    mult = np.full(lf, 2.0)
    mult[0] = 1.0
    if lw % 2 == 0:
        mult[-1] = 1.0
    inv = (mult[None, :, None, None] * phase / (lh * lw)).reshape(lh * lf, k * k).T
    f32 = lambda a: np.ascontiguousarray(a, dtype=DTYPE)  # noqa: E731
    return (f32(fwd.real), f32(fwd.imag)), (f32(inv.real), f32(inv.imag))


def _kernel_spectrum(weight: np.ndarray, lh: int, lw: int) -> np.ndarray:
    """Centered spectrum of each (out, in) kernel on the padded grid, shaped (F, in, out).

    Multiplying an input spectrum by it yields the "same" correlation at
    output offset 0; multiplying by its conjugate yields the adjoint.
    """
    o, c, k, _ = weight.shape
    (re, im), _ = _dft_tables(lh, lw, k)
    taps = weight.transpose(2, 3, 1, 0).reshape(k * k, c * o)
    spec = np.empty((re.shape[0], c * o), np.complex64)
    spec.real = re @ taps
    spec.imag = im @ taps
    return spec.reshape(-1, c, o)


class _ConvCtx:
    __slots__ = ("method", "shape", "cols", "spec_x", "kspec", "pre")


def _conv_forward(x: np.ndarray, layer: ConvLayer, method: str = "auto", keep: bool = False):
    """Conv on a spatial-major (H, W, N, C) array; returns (output, ctx or None)."""
    h, w, n, c = x.shape
    if c != layer.in_channels:
        raise ConfigError(f"conv expects {layer.in_channels} input channels, got {c}")
    k = layer.k
    o = layer.out_channels
    if method == "auto":
        method = "fft" if k >= FFT_MIN_KERNEL else "direct"
    ctx = None
    if keep:
        ctx = _ConvCtx()
        ctx.method = method
        ctx.shape = x.shape
    if method == "direct":
        z, cols = _correlate_direct(x, layer.weight)
        if keep:
            ctx.cols = cols
    elif method == "fft":
        lh, lw = _fft_size(h, w, k)
        lf = lw // 2 + 1
        spec_x = sfft.rfft2(x, s=(lh, lw), axes=(0, 1), workers=_threads)  # lh, lf, N, C
        kspec = _kernel_spectrum(layer.weight, lh, lw)  # F, C, O
        mixed = np.matmul(spec_x.reshape(lh * lf, n, c), kspec)
        z = sfft.irfft2(mixed.reshape(lh, lf, n, o), s=(lh, lw), axes=(0, 1), workers=_threads)
        z = z[:h, :w]
        if keep:
            ctx.spec_x = spec_x
            ctx.kspec = kspec
    else:
        raise ConfigError(f"unknown conv method {method!r}")
    z = np.ascontiguousarray(z + layer.bias, dtype=DTYPE)
    if keep and layer.activation == "relu":
        ctx.pre = z
    y = np.maximum(z, 0) if layer.activation == "relu" else z
    return y, ctx


def _conv_backward(ctx: _ConvCtx, layer: ConvLayer, grad_out: np.ndarray, need_input: bool = True):
    h, w, n, c = ctx.shape
    k = layer.k
    o = layer.out_channels
    if grad_out.shape != (h, w, n, o):
        raise ConfigError(f"grad_out shape {grad_out.shape} does not match conv output")
    g = grad_out.astype(DTYPE, copy=False)
    if layer.activation == "relu":
        g = g * (ctx.pre > 0)  # derivative at exactly 0 is 0
    grad_b = g.reshape(-1, o).sum(axis=0, dtype=DTYPE)
    grad_x = None
    if ctx.method == "direct":
        grad_w = (g.reshape(-1, o).T @ ctx.cols).reshape(layer.weight.shape)
        if need_input:
            flipped = np.ascontiguousarray(layer.weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            grad_x, _ = _correlate_direct(g, flipped)
    else:
        lh, lw = _fft_size(h, w, k)
        lf = lw // 2 + 1
        f = lh * lf
        spec_g = sfft.rfft2(g, s=(lh, lw), axes=(0, 1), workers=_threads).reshape(f, n, o)
        # circular cross-correlation of x against g; only lags -p..p are needed
        corr = np.matmul(np.ascontiguousarray(np.conj(spec_g).transpose(0, 2, 1)), ctx.spec_x.reshape(f, n, c))
        corr = corr.reshape(f, o * c)
        _, (inv_re, inv_im) = _dft_tables(lh, lw, k)
        grad_w = inv_re @ np.ascontiguousarray(corr.real) - inv_im @ np.ascontiguousarray(corr.imag)
        grad_w = grad_w.reshape(k, k, o, c).transpose(2, 3, 0, 1)
        if need_input:
            adjoint = np.conj(ctx.kspec).transpose(0, 2, 1)  # F, O, C
            mixed = np.matmul(spec_g, adjoint)  # F, N, C
            full = sfft.irfft2(mixed.reshape(lh, lf, n, c), s=(lh, lw), axes=(0, 1), workers=_threads)
            grad_x = full[:h, :w]
    grad_w = np.ascontiguousarray(grad_w, dtype=DTYPE)
    if grad_x is not None:
        grad_x = np.ascontiguousarray(grad_x, dtype=DTYPE)
    return grad_x, grad_w, grad_b


def to_spatial_major(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> contiguous (H, W, N, C), the layout conv internals use."""
    return np.ascontiguousarray(x.transpose(2, 3, 0, 1), dtype=DTYPE)


def from_spatial_major(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(2, 3, 0, 1))


def conv2d(x: np.ndarray, layer: ConvLayer, method: str = "auto") -> np.ndarray:
    """Zero-padded "same" correlation plus bias, then the layer's activation.

    ``method`` picks the numeric path: ``"direct"`` (im2col), ``"fft"`` or
    ``"auto"`` (FFT for kernels of size 5 and larger).
    """
    xb, squeeze = _batched(x)
    y, _ = _conv_forward(to_spatial_major(xb), layer, method)
    return _unbatch(from_spatial_major(y), squeeze)


def conv2d_backward(x: np.ndarray, layer: ConvLayer, grad_out: np.ndarray, method: str = "auto"):
    """Gradients of ``conv2d`` w.r.t. input, weights and bias.

    The forward pass is recomputed to recover the ReLU gate. Weight and bias
    gradients are summed over the batch axis when one is present.
    """
    xb, squeeze = _batched(x)
    gb, _ = _batched(grad_out)
    _, ctx = _conv_forward(to_spatial_major(xb), layer, method, keep=True)
    grad_x, grad_w, grad_b = _conv_backward(ctx, layer, to_spatial_major(gb))
    return _unbatch(from_spatial_major(grad_x), squeeze), grad_w, grad_b


# ---------------------------------------------------------------------------
# resampling


def _halve(n: int) -> int:
    return (n + 1) // 2


def _pair_mean(x: np.ndarray, axis: int) -> np.ndarray:
    n = x.shape[axis]
    even = np.take(x, np.arange(0, n - 1, 2), axis=axis)
    odd = np.take(x, np.arange(1, n, 2), axis=axis)
    out = (even + odd) * DTYPE(0.5)
    if n % 2:
        out = np.concatenate([out, np.take(x, [n - 1], axis=axis)], axis=axis)
    return out


def avg_downsample2x(x: np.ndarray) -> np.ndarray:
    """Mean of each 2x2 block; odd trailing rows/columns average what remains."""
    xb, squeeze = _batched(x)
    if xb.shape[2] < 2 or xb.shape[3] < 2:
        raise ConfigError(f"downsampling needs H, W >= 2, got {xb.shape[2:]}")
    out = _pair_mean(_pair_mean(xb.astype(DTYPE, copy=False), 2), 3)
    return _unbatch(np.ascontiguousarray(out), squeeze)


def _block_weights(n: int) -> np.ndarray:
    """Share of each input row/column in its block mean."""
    wts = np.full(n, 0.5, DTYPE)
    if n % 2:
        wts[-1] = 1.0
    return wts


def avg_downsample2x_backward(grad_out: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    gb, squeeze = _batched(grad_out)
    if gb.shape[2:] != (_halve(in_h), _halve(in_w)):
        raise ConfigError(f"grad shape {gb.shape[2:]} does not match input {in_h}x{in_w}")
    rows = np.arange(in_h) // 2
    cols = np.arange(in_w) // 2
    g = gb[:, :, rows][:, :, :, cols]
    g = g * _block_weights(in_h)[:, None] * _block_weights(in_w)[None, :]
    return _unbatch(np.ascontiguousarray(g, dtype=DTYPE), squeeze)


def _align_corners(n_in: int, n_out: int):
    if n_out == 1:
        src = np.zeros(1)
    else:
        src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(np.floor(src).astype(np.intp), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = (src - i0).astype(DTYPE)
    return i0, i1, frac


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    i0, i1, frac = _align_corners(n_in, n_out)
    mat = np.zeros((n_out, n_in), DTYPE)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1 - frac)
    np.add.at(mat, (rows, i1), frac)
    return mat


def _check_upsample(h: int, w: int, out_h: int, out_w: int) -> None:
    if out_h < h or out_w < w:
        raise ConfigError(f"upsample target {out_h}x{out_w} is smaller than input {h}x{w}")


def bilinear_upsample2x(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resize to (out_h, out_w)."""
    xb, squeeze = _batched(x)
    _check_upsample(xb.shape[2], xb.shape[3], out_h, out_w)
    y0, y1, fy = _align_corners(xb.shape[2], out_h)
    x0, x1, fx = _align_corners(xb.shape[3], out_w)
    top = xb[:, :, y0]
    rows = top + fy[:, None] * (xb[:, :, y1] - top)
    left = rows[:, :, :, x0]
    out = left + fx * (rows[:, :, :, x1] - left)
    return _unbatch(np.ascontiguousarray(out, dtype=DTYPE), squeeze)


def bilinear_upsample2x_backward(grad_out: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    gb, squeeze = _batched(grad_out)
    out_h, out_w = gb.shape[2:]
    _check_upsample(in_h, in_w, out_h, out_w)
    ay = _interp_matrix(in_h, out_h)
    ax = _interp_matrix(in_w, out_w)
    g = ay.T @ gb.astype(DTYPE, copy=False) @ ax
    return _unbatch(np.ascontiguousarray(g, dtype=DTYPE), squeeze)


# ---------------------------------------------------------------------------
# warping


class _WarpCtx:
    __slots__ = ("idx", "weights", "fx", "fy", "in_x", "in_y", "shape")


def _warp_setup(flow: np.ndarray, h: int, w: int) -> _WarpCtx:
    ctx = _WarpCtx()
    sx = np.arange(w, dtype=DTYPE)[None, None, :] + flow[:, 0]
    sy = np.arange(h, dtype=DTYPE)[None, :, None] + flow[:, 1]
    ctx.in_x = (sx > 0) & (sx < w - 1)
    ctx.in_y = (sy > 0) & (sy < h - 1)
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx = (sx - x0).astype(DTYPE)
    fy = (sy - y0).astype(DTYPE)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    n = flow.shape[0]
    ctx.idx = [(ya * w + xa).reshape(n, 1, h * w) for ya, xa in ((y0, x0), (y0, x1), (y1, x0), (y1, x1))]
    gx, gy = 1 - fx, 1 - fy
    ctx.weights = [(wt).reshape(n, 1, h * w) for wt in (gy * gx, gy * fx, fy * gx, fy * fx)]
    ctx.fx = fx.reshape(n, 1, h * w)
    ctx.fy = fy.reshape(n, 1, h * w)
    return ctx


def _warp_forward(image: np.ndarray, flow: np.ndarray, keep: bool = False):
    n, c, h, w = image.shape
    if flow.shape != (n, 2, h, w):
        raise ConfigError(f"flow shape {flow.shape} does not match image {image.shape}")
    ctx = _warp_setup(flow, h, w)
    ctx.shape = image.shape
    flat = image.reshape(n, c, h * w)
    out = np.zeros((n, c, h * w), DTYPE)
    for idx, wt in zip(ctx.idx, ctx.weights):
        out += wt * np.take_along_axis(flat, np.broadcast_to(idx, (n, c, h * w)), axis=2)
    return out.reshape(n, c, h, w), (ctx if keep else None)


def _warp_backward(ctx: _WarpCtx, image: np.ndarray, grad_out: np.ndarray, need_image: bool = True):
    n, c, h, w = ctx.shape
    g = grad_out.reshape(n, c, h * w).astype(DTYPE, copy=False)
    flat = image.reshape(n, c, h * w)
    corners = [np.take_along_axis(flat, np.broadcast_to(idx, (n, c, h * w)), axis=2) for idx in ctx.idx]
    v00, v01, v10, v11 = corners
    fx, fy = ctx.fx, ctx.fy
    d_sx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
    d_sy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
    grad_flow = np.empty((n, 2, h, w), DTYPE)
    grad_flow[:, 0] = (g * d_sx).sum(axis=1).reshape(n, h, w) * ctx.in_x
    grad_flow[:, 1] = (g * d_sy).sum(axis=1).reshape(n, h, w) * ctx.in_y
    grad_image = None
    if need_image:
        base = (np.arange(n * c, dtype=np.intp) * (h * w)).reshape(n, c, 1)
        index = np.concatenate([(base + idx).ravel() for idx in ctx.idx])
        values = np.concatenate([(g * wt).ravel() for wt in ctx.weights])
        grad_image = np.bincount(index, weights=values, minlength=n * c * h * w)
        grad_image = grad_image.astype(DTYPE).reshape(n, c, h, w)
    return grad_image, grad_flow


def warp(image: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Sample ``image`` at (x + u, y + v) bilinearly with border clamping."""
    ib, squeeze = _batched(image)
    fb, _ = _batched(flow)
    if fb.shape[1] != 2:
        raise ConfigError(f"flow must have 2 channels, got {fb.shape[1]}")
    out, _ = _warp_forward(ib.astype(DTYPE, copy=False), fb.astype(DTYPE, copy=False))
    return _unbatch(out, squeeze)


def warp_backward(image: np.ndarray, flow: np.ndarray, grad_out: np.ndarray):
    """Gradients of ``warp`` w.r.t. (image, flow).

    The flow gradient is zero wherever the sample coordinate is clamped.
    """
    ib, squeeze = _batched(image)
    fb, _ = _batched(flow)
    gb, _ = _batched(grad_out)
    ib = ib.astype(DTYPE, copy=False)
    _, ctx = _warp_forward(ib, fb.astype(DTYPE, copy=False), keep=True)
    gi, gf = _warp_backward(ctx, ib, gb)
    return _unbatch(gi, squeeze), _unbatch(gf, squeeze)
