"""Dense numeric kernels: conv2d, ReLU, global average pooling, dense,
and softmax cross-entropy, each with forward and backward passes.

All production tensors are row-major float32. The kernels preserve the
dtype of their inputs so tests can drive the same code in float64 for
finite-difference checks.

Two convolution implementations live here on purpose:

* ``conv2d_forward`` accumulates in a fixed (channel-outer, row-major)
  order, one summand at a time, so its output is bit-identical to a
  naive six-nested-loop reference. It is the semantic contract.
* ``conv2d_forward_batch`` / ``conv2d_backward_batch`` lower the same
  convolution to matrix multiplies (im2col). They are deterministic
  run-to-run and agree with the reference path elementwise to float
  tolerance; the model layer uses them for throughput.

Stride is always 1 and padding is zero-fill; nothing here supports
dilation or other padding schemes.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

__all__ = [
    "conv2d_forward",
    "conv2d_backward",
    "conv2d_forward_batch",
    "conv2d_backward_batch",
    "conv_output_hw",
    "ConvGrads",
    "relu_forward",
    "relu_backward",
    "gap_forward",
    "gap_backward",
    "gap_forward_batch",
    "gap_backward_batch",
    "dense_forward",
    "dense_backward",
    "dense_forward_batch",
    "dense_backward_batch",
    "softmax_cross_entropy",
    "softmax_cross_entropy_batch",
]

# Cap on im2col buffer elements per GEMM chunk. Fixed so that chunking
# (and therefore the arithmetic) never depends on the environment.
_CHUNK_ELEMS = 1 << 25


@dataclass
class ConvGrads:
    input_grad: np.ndarray | None
    kernel_grad: np.ndarray | None
    bias_grad: np.ndarray | None


def _check_conv_shapes(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None, pad: int):
    if x.ndim != 3:
        raise ShapeError(f"conv2d input must be (Cin, H, W), got shape {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be (Cout, Cin, F, F), got shape {kernel.shape}")
    cin, h, w = x.shape
    cout, kcin, fh, fw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, input has {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    if pad < 0:
        raise ShapeError(f"pad must be >= 0, got {pad}")
    if fh > h + 2 * pad or fw > w + 2 * pad:
        raise ShapeError(
            f"kernel {fh}x{fw} larger than padded input {h + 2 * pad}x{w + 2 * pad}"
        )


def conv_output_hw(h: int, w: int, fh: int, fw: int, pad: int) -> tuple[int, int]:
    return h + 2 * pad - fh + 1, w + 2 * pad - fw + 1


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, pad: int = 0) -> np.ndarray:
    """Cross-correlation of one image with a kernel bank, stride 1.

    x: (Cin, H, W), kernel: (Cout, Cin, F, F), bias: (Cout,).
    Returns (Cout, H', W') with H' = H + 2*pad - F + 1.

    The accumulator starts at the bias and adds one (cin, fi, fj)
    summand at a time in that loop order; per output element this is
    exactly the arithmetic of the naive six-nested-loop formulation.
    """
    _check_conv_shapes(x, kernel, bias, pad)
    cout, cin, fh, fw = kernel.shape
    h2, w2 = conv_output_hw(x.shape[1], x.shape[2], fh, fw, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.empty((cout, h2, w2), dtype=np.result_type(x, kernel, bias))
    out[:] = bias[:, None, None]
    for ci in range(cin):
        for fi in range(fh):
            for fj in range(fw):
                out += xp[ci, fi : fi + h2, fj : fj + w2] * kernel[:, ci, fi, fj][:, None, None]
    return out


def _im2col(xp: np.ndarray, fh: int, fw: int, h2: int, w2: int) -> np.ndarray:
    """(B, Cin, Hp, Wp) -> (B*H2*W2, Cin*F*F) patch matrix."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (fh, fw), axis=(2, 3))
    # (B, Cin, H2, W2, F, F) -> rows (b, i, j), cols (cin, fi, fj)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(xp.shape[0] * h2 * w2, -1)


def _conv_chunk(batch: int, k: int, h2: int, w2: int) -> int:
    return max(1, _CHUNK_ELEMS // max(1, k * h2 * w2))


def conv2d_forward_batch(
    x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, pad: int = 0
) -> np.ndarray:
    """Batched conv forward via im2col + GEMM. x: (B, Cin, H, W)."""
    if x.ndim != 4:
        raise ShapeError(f"batched conv input must be (B, Cin, H, W), got {x.shape}")
    _check_conv_shapes(x[0], kernel, bias, pad)
    b, cin, h, w = x.shape
    cout, _, fh, fw = kernel.shape
    h2, w2 = conv_output_hw(h, w, fh, fw, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    kmat = kernel.reshape(cout, cin * fh * fw)
    out = np.empty((b, cout, h2, w2), dtype=np.result_type(x, kernel, bias))
    step = _conv_chunk(b, kmat.shape[1], h2, w2)
    for s in range(0, b, step):
        e = min(s + step, b)
        cols = _im2col(xp[s:e], fh, fw, h2, w2)
        r = cols @ kmat.T  # (n*H2*W2, Cout)
        r += bias
        out[s:e] = r.reshape(e - s, h2, w2, cout).transpose(0, 3, 1, 2)
    return out


def conv2d_backward_batch(
    x: np.ndarray,
    kernel: np.ndarray,
    out_grad: np.ndarray,
    pad: int = 0,
    *,
    need_input: bool = True,
    need_kernel: bool = True,
) -> ConvGrads:
    """Gradients of the batched conv. x: (B, Cin, H, W), out_grad:
    (B, Cout, H', W'). The input gradient is the transposed convolution
    of ``out_grad`` with the kernel (equivalently: correlation with the
    180-degree-rotated kernel)."""
    if x.ndim != 4 or out_grad.ndim != 4:
        raise ShapeError(
            f"conv backward wants 4-d tensors, got input {x.shape}, out_grad {out_grad.shape}"
        )
    _check_conv_shapes(x[0], kernel, None, pad)
    b, cin, h, w = x.shape
    cout, _, fh, fw = kernel.shape
    h2, w2 = conv_output_hw(h, w, fh, fw, pad)
    if out_grad.shape != (b, cout, h2, w2):
        raise ShapeError(f"out_grad shape {out_grad.shape} != {(b, cout, h2, w2)}")
    dtype = np.result_type(x, kernel, out_grad)
    kmat = kernel.reshape(cout, cin * fh * fw)

    bias_grad = out_grad.sum(axis=(0, 2, 3))
    kernel_grad = np.zeros((cout, cin * fh * fw), dtype=dtype) if need_kernel else None
    dxp = None
    if need_input:
        dxp = np.zeros((b, cin, h + 2 * pad, w + 2 * pad), dtype=dtype)

    # x itself only feeds the kernel gradient; skip the padded copy (and
    # accept broadcast views for x) when only input gradients are wanted.
    xp = None
    if need_kernel:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    step = _conv_chunk(b, kmat.shape[1], h2, w2)
    for s in range(0, b, step):
        e = min(s + step, b)
        n = e - s
        gmat = out_grad[s:e].transpose(0, 2, 3, 1).reshape(n * h2 * w2, cout)
        if need_kernel:
            cols = _im2col(xp[s:e], fh, fw, h2, w2)
            kernel_grad += gmat.T @ cols
        if need_input:
            dcols = gmat @ kmat  # (n*H2*W2, Cin*F*F)
            d6 = dcols.reshape(n, h2, w2, cin, fh, fw)
            for fi in range(fh):
                for fj in range(fw):
                    dxp[s:e, :, fi : fi + h2, fj : fj + w2] += d6[:, :, :, :, fi, fj].transpose(
                        0, 3, 1, 2
                    )

    input_grad = None
    if need_input:
        input_grad = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
        input_grad = np.ascontiguousarray(input_grad)
    return ConvGrads(
        input_grad=input_grad,
        kernel_grad=kernel_grad.reshape(kernel.shape) if need_kernel else None,
        bias_grad=bias_grad,
    )


def conv2d_backward(x: np.ndarray, kernel: np.ndarray, out_grad: np.ndarray, pad: int = 0) -> ConvGrads:
    """Single-image convenience wrapper around the batched backward."""
    g = conv2d_backward_batch(x[None], kernel, out_grad[None], pad)
    return ConvGrads(
        input_grad=g.input_grad[0],
        kernel_grad=g.kernel_grad,
        bias_grad=g.bias_grad,
    )


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, out_grad: np.ndarray) -> np.ndarray:
    """Subgradient 0 at exactly 0."""
    if x.shape != out_grad.shape:
        raise ShapeError(f"relu backward shapes differ: {x.shape} vs {out_grad.shape}")
    return out_grad * (x > 0)


def gap_forward(a: np.ndarray) -> np.ndarray:
    """Global average pool (C, H, W) -> (C,)."""
    if a.ndim != 3:
        raise ShapeError(f"gap input must be (C, H, W), got {a.shape}")
    return a.mean(axis=(1, 2))


def gap_backward(out_grad: np.ndarray, h: int, w: int) -> np.ndarray:
    """Distribute each channel's gradient uniformly: every spatial cell
    of channel c receives out_grad[c] / (H*W)."""
    if out_grad.ndim != 1:
        raise ShapeError(f"gap backward wants (C,), got {out_grad.shape}")
    per_cell = out_grad / out_grad.dtype.type(h * w)
    out = np.empty((out_grad.shape[0], h, w), dtype=out_grad.dtype)
    out[:] = per_cell[:, None, None]
    return out


def gap_forward_batch(a: np.ndarray) -> np.ndarray:
    if a.ndim != 4:
        raise ShapeError(f"batched gap input must be (B, C, H, W), got {a.shape}")
    return a.mean(axis=(2, 3))


def gap_backward_batch(out_grad: np.ndarray, h: int, w: int) -> np.ndarray:
    per_cell = out_grad / out_grad.dtype.type(h * w)
    b, c = out_grad.shape
    out = np.empty((b, c, h, w), dtype=out_grad.dtype)
    out[:] = per_cell[:, :, None, None]
    return out


def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """(Din,) @ (Dout, Din)^T + (Dout,) -> (Dout,)."""
    if weight.ndim != 2 or x.shape != (weight.shape[1],):
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    return weight @ x + bias


def dense_backward(x: np.ndarray, weight: np.ndarray, out_grad: np.ndarray):
    dx = weight.T @ out_grad
    dw = np.outer(out_grad, x)
    return dx, dw, out_grad.copy()


def dense_forward_batch(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense batch: input {x.shape} incompatible with weight {weight.shape}")
    return x @ weight.T + bias


def dense_backward_batch(x: np.ndarray, weight: np.ndarray, out_grad: np.ndarray):
    dx = out_grad @ weight
    dw = out_grad.T @ x
    db = out_grad.sum(axis=0)
    return dx, dw, db


def softmax_cross_entropy(logits: np.ndarray, target: int):
    """Numerically stable softmax + cross-entropy for one sample.

    Returns (loss, grad) where grad = softmax(logits) - onehot(target).
    The log-sum-exp shift makes the loss exact for large logits; it is
    ln(num_classes) when all logits are equal, and always >= 0.
    """
    if logits.ndim != 1:
        raise ShapeError(f"logits must be 1-d, got {logits.shape}")
    n = logits.shape[0]
    if not 0 <= target < n:
        raise ShapeError(f"target {target} out of range for {n} classes")
    m = logits.max()
    z = logits - m
    ez = np.exp(z)
    s = ez.sum()
    loss = float(np.log(s) - z[target])
    grad = ez / s
    grad[target] -= grad.dtype.type(1)
    return loss, grad


def softmax_cross_entropy_batch(logits: np.ndarray, targets: np.ndarray):
    """Vectorized per-sample losses and unscaled gradients.

    Returns (losses float64 (B,), grads (B, n)); the caller applies any
    1/B factor so batch reductions stay explicit.
    """
    if logits.ndim != 2:
        raise ShapeError(f"batched logits must be (B, n), got {logits.shape}")
    b, n = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (b,):
        raise ShapeError(f"targets shape {targets.shape} != ({b},)")
    if targets.min() < 0 or targets.max() >= n:
        raise ShapeError(f"target out of range for {n} classes")
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    ez = np.exp(z)
    s = ez.sum(axis=1, keepdims=True)
    rows = np.arange(b)
    losses = (np.log(s[:, 0]) - z[rows, targets]).astype(np.float64)
    grads = ez / s
    grads[rows, targets] -= grads.dtype.type(1)
    return losses, grads
