"""Differentiable tensor operations for the change-detection architecture.

Convolutions are lowered to BLAS matmuls through im2col; their backward
passes reuse the same lowering (input gradients are correlations with the
flipped kernel) so all heavy math stays inside dgemm. Everything runs in
float64 and is deterministic for fixed inputs.
"""

from __future__ import annotations

import numpy as np

from .tensor import ContractViolation, Tensor, register_op


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return register_op("add", (a, b), out, bwd)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return register_op("sub", (a, b), out, bwd)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return register_op("mul", (a, b), out, bwd)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    # Sum the axes numpy broadcast over, restoring the original shape.
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())

    def bwd(g):
        return (np.broadcast_to(g, x.shape),)

    return register_op("sum", (x,), out, bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.sum() / n)

    def bwd(g):
        return (np.broadcast_to(g / n, x.shape),)

    return register_op("mean", (x,), out, bwd)


def channel_sum(x: Tensor) -> Tensor:
    """Sum (N,C,H,W) over C, keeping the channel axis with size 1."""
    out = x.data.sum(axis=1, keepdims=True)

    def bwd(g):
        return (np.broadcast_to(g, x.shape),)

    return register_op("channel_sum", (x,), out, bwd)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def bwd(g):
        return (g * (0.5 / out),)

    return register_op("sqrt", (x,), out, bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def bwd(g):
        # Subgradient 0 at exactly 0.
        return (g * (x.data > 0.0),)

    return register_op("relu", (x,), out, bwd)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over the channel axis of (N,C,H,W), max-subtracted for stability."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return register_op("softmax_channels", (x,), out, bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ContractViolation(
            f"concat_channels spatial/batch mismatch: {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)
    ca = a.shape[1]

    def bwd(g):
        return g[:, :ca], g[:, ca:]

    return register_op("concat_channels", (a, b), out, bwd)


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Lower (N,C,H,W) to a (N*OH*OW, C*kh*kw) patch matrix."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]          # (N,C,OH,OW,kh,kw)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols), oh, ow


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of (N,Cin,H,W) with (Cout,Cin,kh,kw)."""
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if cin != kcin:
        raise ContractViolation(
            f"conv2d channel mismatch: input Cin={cin}, kernel Cin={kcin}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ContractViolation(f"conv2d input {h}x{w} smaller than kernel")

    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    wmat = kernel.data.reshape(cout, cin * kh * kw)
    out = cols @ wmat.T                                   # (N*OH*OW, Cout)
    if bias is not None:
        out += bias.data
    out = out.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, cout)
        # Patches are cheap to rebuild from the saved input, so they are
        # recomputed instead of held across the whole forward pass.
        cols_b, _, _ = _im2col(x.data, kh, kw, stride, padding)
        gw = (g2.T @ cols_b).reshape(kernel.shape)
        gx = _conv2d_input_grad(g, kernel.data, (n, cin, h, w), stride, padding)
        gb = None if bias is None else g.sum(axis=(0, 2, 3))
        if bias is None:
            return gx, gw
        return gx, gw, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return register_op("conv2d", inputs, out, bwd)


def _conv2d_input_grad(g, kernel, x_shape, stride, padding):
    """d(conv)/d(input): correlate the (dilated) output grad with the
    spatially flipped kernel, channels swapped."""
    n, cin, h, w = x_shape
    cout, _, kh, kw = kernel.shape
    if stride > 1:
        oh, ow = g.shape[2], g.shape[3]
        dil = np.zeros((n, cout, (oh - 1) * stride + 1, (ow - 1) * stride + 1))
        dil[:, :, ::stride, ::stride] = g
        g = dil
    flipped = kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (Cin,Cout,kh,kw)
    pad = kh - 1 - padding
    cols, oh2, ow2 = _im2col(g, kh, kw, 1, pad)
    wmat = np.ascontiguousarray(flipped.reshape(cin, cout * kh * kw))
    gx = cols @ wmat.T
    gx = gx.reshape(n, oh2, ow2, cin).transpose(0, 3, 1, 2)
    # Dilated grads can overshoot the input extent by (input+2p-k) % stride.
    return np.ascontiguousarray(gx[:, :, :h, :w])


def conv_transpose2d(x: Tensor, kernel: Tensor, stride: int = 2) -> Tensor:
    """Transposed conv with kernel size == stride, so blocks never overlap.

    Input (N,Cin,H,W) and kernel (Cin,Cout,k,k) give (N,Cout,k*H,k*W):
    each input pixel paints one k x k output block with value * kernel.
    """
    n, cin, h, w = x.shape
    kcin, cout, kh, kw = kernel.shape
    if cin != kcin:
        raise ContractViolation(
            f"conv_transpose2d channel mismatch: input Cin={cin}, kernel Cin={kcin}")
    if kh != stride or kw != stride:
        raise ContractViolation("conv_transpose2d requires kernel size == stride")
    if n <= 0 or h <= 0 or w <= 0:
        raise ContractViolation(f"conv_transpose2d non-positive dims: {x.shape}")

    blocks = np.tensordot(x.data, kernel.data, axes=([1], [0]))  # (N,H,W,Cout,k,k)
    out = blocks.transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, h * kh, w * kw)
    out = np.ascontiguousarray(out)

    def bwd(g):
        gb = np.ascontiguousarray(
            g.reshape(n, cout, h, kh, w, kw).transpose(0, 2, 4, 1, 3, 5))
        gx = np.tensordot(gb, kernel.data, axes=([3, 4, 5], [1, 2, 3]))
        gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
        gk = np.tensordot(x.data, gb, axes=([0, 2, 3], [0, 1, 2]))
        return gx, gk

    return register_op("conv_transpose2d", (x, kernel), out, bwd)


def maxpool2d(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """2x2/stride-2 max pool; returns (pooled, window argmax codes 0..3).

    Ties go to the first element in row-major window order, so the
    backward routing is deterministic.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ContractViolation(f"maxpool2d needs even H,W, got {h}x{w}")
    wind = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    wind = wind.reshape(n, c, h // 2, w // 2, 4)
    idx = wind.argmax(axis=-1)                 # first max wins ties
    out = np.take_along_axis(wind, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        scat = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(scat, idx[..., None], g[..., None], axis=-1)
        gx = scat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (np.ascontiguousarray(gx.reshape(n, c, h, w)),)

    return register_op("maxpool2d", (x,), np.ascontiguousarray(out), bwd), idx


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, eps: float = 1e-5,
                momentum: float = 0.1) -> Tensor:
    """Per-channel batch norm over (N,H,W).

    Train mode normalizes with biased batch variance and updates the
    running stats in place (running variance stored unbiased). Eval mode
    normalizes with the running stats.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ContractViolation(
            f"batchnorm2d expects gamma/beta of shape ({c},)")

    if training:
        axes = (0, 2, 3)
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)          # biased
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def bwd(g):
            gg = (g * xhat).sum(axis=axes)
            gb = g.sum(axis=axes)
            # Standard batchnorm input gradient for biased variance.
            gx = (gamma.data * inv)[None, :, None, None] * (
                g
                - (gb / m)[None, :, None, None]
                - xhat * (gg / m)[None, :, None, None]
            )
            return gx, gg, gb

        return register_op("batchnorm2d", (x, gamma, beta), out, bwd)

    inv = 1.0 / np.sqrt(running_var + eps)
    scale = gamma.data * inv
    shift = beta.data - running_mean * scale
    out = x.data * scale[None, :, None, None] + shift[None, :, None, None]

    def bwd_eval(g):
        gx = g * scale[None, :, None, None]
        xhat = (x.data - running_mean[None, :, None, None]) * inv[None, :, None, None]
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        return gx, gg, gb

    return register_op("batchnorm2d_eval", (x, gamma, beta), out, bwd_eval)
