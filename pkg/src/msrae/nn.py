"""Convolutional building blocks with hand-derived gradients.

Every layer is a pure function of ``(parameters, input)`` operating on
``[batch, channels, depth, height, width]`` arrays.  Backward passes are
derived by hand and verified against central finite differences in the
test suite.

Accumulation policy: forward convolutions and all reductions (bias and
slope gradients, pooling sums) accumulate in float64; backward gemms run
in the promoted input dtype, which keeps float32 training cheap while
float64 inputs turn the whole stack into a 64-bit shadow mode — the mode
every finite-difference check runs in.

Layout conventions:

* convolutions are stride 1 with odd kernels and zero same-padding, so
  spatial extents are preserved;
* max-pooling and upsampling use non-overlapping 2x2x2 blocks; pooling
  ties are broken toward the lowest flat index of the input tensor, and
  the backward pass routes gradient only to the recorded argmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE, Rng, ShapeError

# numba only accelerates the window-gather copy; results are identical
# to the pure-numpy fallback (same element order, no arithmetic).
try:
    from numba import njit as _njit

    @_njit(cache=True)
    def _gather_windows(xp, out, d, h, w, kd, kh, kw):  # pragma: no cover
        b, ci = xp.shape[0], xp.shape[1]
        for n in range(b):
            for z in range(d):
                for y in range(h):
                    for x in range(w):
                        row = ((n * d + z) * h + y) * w + x
                        col = 0
                        for i in range(ci):
                            for a in range(kd):
                                for bb in range(kh):
                                    for c in range(kw):
                                        out[row, col] = xp[n, i, z + a, y + bb, x + c]
                                        col += 1

    @_njit(cache=True)
    def _scatter_windows(dxp, dcols, d, h, w, kd, kh, kw):  # pragma: no cover
        b, ci = dxp.shape[0], dxp.shape[1]
        for n in range(b):
            for z in range(d):
                for y in range(h):
                    for x in range(w):
                        row = ((n * d + z) * h + y) * w + x
                        col = 0
                        for i in range(ci):
                            for a in range(kd):
                                for bb in range(kh):
                                    for c in range(kw):
                                        dxp[n, i, z + a, y + bb, x + c] += dcols[row, col]
                                        col += 1

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False


@dataclass
class ConvLayer:
    """Stride-1 zero-same-padded 3-D convolution parameters.

    ``weights`` has shape ``[out_ch, in_ch, kd, kh, kw]`` with odd kernel
    extents; ``bias`` has shape ``[out_ch]``.
    """

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w, b = np.asarray(self.weights), np.asarray(self.bias)
        if w.ndim != 5:
            raise ShapeError(f"conv weights must be 5-D, got {w.shape}")
        if any(k % 2 == 0 for k in w.shape[2:]):
            raise ShapeError(f"conv kernel extents must be odd, got {w.shape[2:]}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv bias shape {b.shape} != ({w.shape[0]},)")
        self.weights, self.bias = w, b

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]


@dataclass
class PReluLayer:
    """Per-channel parametric rectifier: ``x if x > 0 else slope[c] * x``."""

    slope: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.slope)
        if s.ndim != 1:
            raise ShapeError(f"prelu slope must be 1-D, got {s.shape}")
        self.slope = s

    @property
    def channels(self) -> int:
        return self.slope.shape[0]


@dataclass
class ConvGrads:
    d_weights: np.ndarray
    d_bias: np.ndarray
    d_input: np.ndarray


@dataclass
class PReluGrads:
    d_slope: np.ndarray
    d_input: np.ndarray


def _check_input(x: np.ndarray, channels: int, what: str) -> None:
    if x.ndim != 5:
        raise ShapeError(f"{what}: expected [b, c, D, H, W] input, got {x.shape}")
    if x.shape[1] != channels:
        raise ShapeError(f"{what}: input has {x.shape[1]} channels, layer expects {channels}")
    if min(x.shape[2:]) < 1:
        raise ShapeError(f"{what}: empty spatial extent in {x.shape}")


def _im2col(x: np.ndarray, kernel: tuple[int, int, int], dtype) -> np.ndarray:
    """Gather same-padded kernel windows into rows of [b*D*H*W, ci*kd*kh*kw]."""
    kd, kh, kw = kernel
    b, ci, d, h, w = x.shape
    if kernel == (1, 1, 1):
        # a pointwise kernel needs no window gather
        cols = np.ascontiguousarray(x.transpose(0, 2, 3, 4, 1), dtype=dtype)
        return cols.reshape(b * d * h * w, ci)
    xp = np.pad(x, ((0, 0), (0, 0), (kd // 2,) * 2, (kh // 2,) * 2, (kw // 2,) * 2))
    if _HAVE_NUMBA:
        out = np.empty((b * d * h * w, ci * kd * kh * kw), dtype=dtype)
        _gather_windows(np.ascontiguousarray(xp, dtype=dtype), out, d, h, w, kd, kh, kw)
        return out
    win = np.lib.stride_tricks.sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7), dtype=dtype)
    return cols.reshape(b * d * h * w, ci * kd * kh * kw)


def conv3d_forward(layer: ConvLayer, x: np.ndarray) -> np.ndarray:
    """Same-padded convolution: ``out[o] = sum_i x[i] * w[o, i] + bias[o]``.

    The gemm accumulates in float64 and the result is cast back to the
    promoted input dtype.
    """
    _check_input(x, layer.in_channels, "conv3d_forward")
    out_dtype = np.result_type(x.dtype, layer.weights.dtype)
    b, _, d, h, w = x.shape
    co = layer.out_channels
    cols = _im2col(x, layer.weights.shape[2:], np.float64)
    wmat = np.ascontiguousarray(layer.weights.reshape(co, -1).T, dtype=np.float64)
    acc = cols @ wmat
    acc += layer.bias.astype(np.float64)
    return acc.reshape(b, d, h, w, co).transpose(0, 4, 1, 2, 3).astype(out_dtype, order="C")


def _col2im(dcols: np.ndarray, shape, kernel: tuple[int, int, int]) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back onto the input grid."""
    kd, kh, kw = kernel
    b, ci, d, h, w = shape
    if kernel == (1, 1, 1):
        dx = dcols.reshape(b, d, h, w, ci).transpose(0, 4, 1, 2, 3)
        return np.ascontiguousarray(dx)
    dxp = np.zeros((b, ci, d + kd - 1, h + kh - 1, w + kw - 1), dtype=dcols.dtype)
    if _HAVE_NUMBA:
        _scatter_windows(dxp, dcols, d, h, w, kd, kh, kw)
    else:
        blocks = dcols.reshape(b, d, h, w, ci, kd, kh, kw)
        for a in range(kd):
            for bb in range(kh):
                for c in range(kw):
                    dxp[:, :, a:a + d, bb:bb + h, c:c + w] += \
                        blocks[:, :, :, :, :, a, bb, c].transpose(0, 4, 1, 2, 3)
    return dxp[:, :, kd // 2: kd // 2 + d, kh // 2: kh // 2 + h, kw // 2: kw // 2 + w]


def conv3d_backward(layer: ConvLayer, x: np.ndarray, grad_out: np.ndarray,
                    need_input_grad: bool = True) -> ConvGrads:
    """Gradients of the convolution w.r.t. weights, bias, and input.

    Gemms run in the promoted input dtype (float64 inputs give 64-bit
    shadow-mode gradients); the bias reduction always accumulates in
    float64.  ``need_input_grad=False`` skips the input gradient
    (first-layer case) and returns ``d_input=None``.
    """
    _check_input(x, layer.in_channels, "conv3d_backward")
    co = layer.out_channels
    if grad_out.shape != (x.shape[0], co) + x.shape[2:]:
        raise ShapeError(
            f"conv3d_backward: grad_out {grad_out.shape} does not match "
            f"output shape {(x.shape[0], co) + x.shape[2:]}"
        )
    dtype = np.result_type(x.dtype, layer.weights.dtype)
    gmat = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 4, 1), dtype=dtype)
    gmat = gmat.reshape(-1, co)
    cols = _im2col(x, layer.weights.shape[2:], dtype)
    d_weights = (cols.T @ gmat).T.reshape(layer.weights.shape).astype(dtype, order="C")
    d_bias = np.sum(grad_out, axis=(0, 2, 3, 4), dtype=np.float64).astype(dtype)
    d_input = None
    if need_input_grad:
        wmat = layer.weights.reshape(co, -1).astype(dtype)
        dcols = gmat @ wmat
        d_input = _col2im(dcols, x.shape, layer.weights.shape[2:]).astype(dtype)
    return ConvGrads(d_weights, d_bias, d_input)


def prelu_forward(layer: PReluLayer, x: np.ndarray) -> np.ndarray:
    _check_input(x, layer.channels, "prelu_forward")
    a = layer.slope.reshape(1, -1, 1, 1, 1)
    return np.where(x > 0, x, (a * x).astype(np.result_type(x.dtype, layer.slope.dtype)))


def prelu_backward(layer: PReluLayer, x: np.ndarray, grad_out: np.ndarray) -> PReluGrads:
    """``d_slope[c]`` collects ``x * grad`` over the non-positive region."""
    _check_input(x, layer.channels, "prelu_backward")
    if grad_out.shape != x.shape:
        raise ShapeError(f"prelu_backward: grad_out {grad_out.shape} != input {x.shape}")
    out_dtype = np.result_type(x.dtype, layer.slope.dtype)
    a = layer.slope.reshape(1, -1, 1, 1, 1)
    d_input = np.where(x > 0, grad_out, (a * grad_out)).astype(out_dtype)
    neg = np.where(x > 0, 0.0, x * grad_out)
    d_slope = np.sum(neg, axis=(0, 2, 3, 4), dtype=np.float64).astype(out_dtype)
    return PReluGrads(d_slope, d_input)


def _pool_blocks(x: np.ndarray) -> np.ndarray:
    """View ``x`` as [b, c, D/2, H/2, W/2, 8] blocks in flat-index order."""
    b, c, d, h, w = x.shape
    blocks = x.reshape(b, c, d // 2, 2, h // 2, 2, w // 2, 2)
    return blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(b, c, d // 2, h // 2, w // 2, 8)


def maxpool2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Halve each spatial extent, returning (maxima, argmax block offsets)."""
    if x.ndim != 5:
        raise ShapeError(f"maxpool2_forward: expected 5-D input, got {x.shape}")
    if any(s % 2 for s in x.shape[2:]):
        raise ShapeError(f"maxpool2_forward: odd spatial extent in {x.shape}")
    blocks = _pool_blocks(x)
    # argmax returns the first maximal offset, i.e. the lowest flat index
    indices = blocks.argmax(axis=-1).astype(np.uint8)
    out = np.take_along_axis(blocks, indices[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, indices


def maxpool2_backward(indices: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Route each gradient to its recorded argmax position, zero elsewhere."""
    if grad_out.shape != indices.shape:
        raise ShapeError(f"maxpool2_backward: grad {grad_out.shape} != indices {indices.shape}")
    b, c, d2, h2, w2 = grad_out.shape
    blocks = np.zeros((b, c, d2, h2, w2, 8), dtype=grad_out.dtype)
    np.put_along_axis(blocks, indices[..., None].astype(np.intp), grad_out[..., None], axis=-1)
    blocks = blocks.reshape(b, c, d2, h2, w2, 2, 2, 2)
    return blocks.transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(b, c, 2 * d2, 2 * h2, 2 * w2)


def upsample2_forward(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbor replication by 2 along each spatial axis."""
    if x.ndim != 5:
        raise ShapeError(f"upsample2_forward: expected 5-D input, got {x.shape}")
    return x.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)


def upsample2_backward(grad_out: np.ndarray) -> np.ndarray:
    """Adjoint of replication: sum each 2x2x2 block of the gradient."""
    if grad_out.ndim != 5 or any(s % 2 for s in grad_out.shape[2:]):
        raise ShapeError(f"upsample2_backward: bad gradient shape {grad_out.shape}")
    b, c, d, h, w = grad_out.shape
    blocks = grad_out.reshape(b, c, d // 2, 2, h // 2, 2, w // 2, 2)
    return np.sum(blocks, axis=(3, 5, 7), dtype=np.float64).astype(grad_out.dtype)


def he_init(rng: Rng, out_channels: int, in_channels: int, kernel=3) -> ConvLayer:
    """Weights ~ normal(0, sqrt(2 / fan_in)), zero bias."""
    if isinstance(kernel, int):
        kernel = (kernel,) * 3
    fan_in = in_channels * int(np.prod(kernel))
    std = float(np.sqrt(2.0 / fan_in))
    weights = rng.normal((out_channels, in_channels) + tuple(kernel), 0.0, std)
    return ConvLayer(weights, np.zeros(out_channels, dtype=DTYPE))


def prelu_init(channels: int, slope: float = 0.25) -> PReluLayer:
    return PReluLayer(np.full(channels, slope, dtype=DTYPE))
