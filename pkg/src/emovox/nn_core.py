"""Dense-tensor kernels with exact analytic gradients.

Tensors are plain numpy arrays (float32 for training, float64 wherever a
test wants tight tolerances).  All kernels are deterministic: the sample
loop of each convolution is independent per sample, so a clip's numbers
do not change when it is batched with others.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import blas as _blas

from .errors import EmptyValidRegion, ShapeMismatch


class Rng:
    """Deterministic 64-bit-seeded generator (PCG64 underneath)."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def derive(self, salt: int) -> "Rng":
        """Independent child stream; same (seed, salt) gives same child."""
        return Rng(self.seed ^ (0x9E3779B97F4A7C15 * (salt + 1) & 0xFFFFFFFFFFFFFFFF))


def _gemm_acc(a_t, b_t, c_t):
    """c_t += a_t @ b_t on Fortran-order views (in-place BLAS accumulate)."""
    gemm = _blas.get_blas_funcs("gemm", (a_t, b_t))
    gemm(1.0, a_t, b_t, beta=1.0, c=c_t, overwrite_c=True)


def _check_conv_shapes(x, w, b=None):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d wants 4-D input/weights, got {x.shape} / {w.shape}")
    kh, kw, cin, cout = w.shape
    if x.shape[3] != cin:
        raise ShapeMismatch(f"input channels {x.shape[3]} != kernel channels {cin}")
    if b is not None and b.shape != (cout,):
        raise ShapeMismatch(f"bias shape {b.shape} != ({cout},)")
    if x.shape[1] < kh or x.shape[2] < kw:
        raise ShapeMismatch(f"input {x.shape[1:3]} smaller than kernel ({kh},{kw})")


def _im2col_single_channel(x2d, kh, kw):
    # x2d (H, W) -> (Ho*Wo, kh*kw); used when Cin == 1
    h, w = x2d.shape
    ho, wo = h - kh + 1, w - kw + 1
    s0, s1 = x2d.strides
    win = np.lib.stride_tricks.as_strided(x2d, (ho, wo, kh, kw), (s0, s1, s0, s1))
    return win.reshape(ho * wo, kh * kw)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Valid-padding stride-1 correlation.

    out[n,i,j,o] = b[o] + sum_{a,b,c} x[n,i+a,j+b,c] * w[a,b,c,o]
    """
    _check_conv_shapes(x, w, b)
    x = np.ascontiguousarray(x)
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ho, wo = h - kh + 1, wd - kw + 1

    if cin == 1:
        wmat = w.reshape(kh * kw, cout)
        out = np.empty((n, ho, wo, cout), dtype=x.dtype)
        for s in range(n):
            cols = _im2col_single_channel(x[s, :, :, 0], kh, kw)
            out[s] = (cols @ wmat).reshape(ho, wo, cout)
        return out + b

    # shift-and-accumulate on the flattened (n*h*wd, cin) view: for each
    # kernel tap, one BLAS GEMM accumulates into a contiguous slice, and
    # rows that straddle image edges land outside the cropped region.
    xf = x.reshape(n * h * wd, cin)
    full = np.zeros((n * h * wd, cout), dtype=x.dtype)
    total = xf.shape[0]
    for a in range(kh):
        for bb in range(kw):
            off = a * wd + bb
            rows = total - off
            _gemm_acc(np.ascontiguousarray(w[a, bb]).T, xf[off:].T, full[:rows].T)
    return full.reshape(n, h, wd, cout)[:, :ho, :wo, :] + b


def conv2d_backward(upstream: np.ndarray, x: np.ndarray, w: np.ndarray,
                    need_input_grad: bool = True):
    """Gradients of conv2d_forward; returns (grad_x, grad_w, grad_b).

    grad_x is None when need_input_grad is False (first layer).
    """
    _check_conv_shapes(x, w)
    x = np.ascontiguousarray(x)
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ho, wo = h - kh + 1, wd - kw + 1
    if upstream.shape != (n, ho, wo, cout):
        raise ShapeMismatch(f"upstream shape {upstream.shape} != {(n, ho, wo, cout)}")

    grad_b = upstream.sum(axis=(0, 1, 2))
    grad_w = np.empty_like(w)

    # zero-extended upstream: wrapped rows then contribute exactly zero
    up_pad = np.zeros((n, h, wd, cout), dtype=upstream.dtype)
    up_pad[:, :ho, :wo, :] = upstream
    uf = up_pad.reshape(n * h * wd, cout)
    total = uf.shape[0]

    if cin == 1:
        for s in range(n):
            cols = _im2col_single_channel(x[s, :, :, 0], kh, kw)
            g = cols.T @ upstream[s].reshape(ho * wo, cout)
            if s == 0:
                gw_flat = g
            else:
                gw_flat += g
        grad_w[:] = gw_flat.reshape(kh, kw, cin, cout)
    else:
        xf = x.reshape(n * h * wd, cin)
        for a in range(kh):
            for bb in range(kw):
                off = a * wd + bb
                rows = total - off
                grad_w[a, bb] = xf[off:].T @ uf[:rows]

    grad_x = None
    if need_input_grad:
        gx = np.zeros((n * h * wd, cin), dtype=x.dtype)
        for a in range(kh):
            for bb in range(kw):
                off = a * wd + bb
                rows = total - off
                # gx[off:] += uf[:rows] @ w[a,bb].T
                _gemm_acc(np.ascontiguousarray(w[a, bb]), uf[:rows].T, gx[off:].T)
        grad_x = gx.reshape(n, h, wd, cin)
    return grad_x, grad_w, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(upstream: np.ndarray, x: np.ndarray) -> np.ndarray:
    # derivative at exactly 0 is defined as 0
    return np.where(x > 0, upstream, 0)


def dropout(x: np.ndarray, rate: float, rng: Rng | None, training: bool):
    """Inverted dropout: scales survivors by 1/(1-rate) at training time.

    Returns (output, mask); mask is None in inference mode.
    """
    if not 0 <= rate < 1:
        raise ValueError("dropout rate must be in [0, 1)")
    if not training:
        return x, None
    if rate == 0.0:
        return x.copy(), np.ones_like(x)
    keep = (rng.uniform(0.0, 1.0, x.shape) >= rate).astype(x.dtype)
    keep /= x.dtype.type(1.0 - rate)
    return x * keep, keep


def dropout_backward(upstream: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return upstream
    return upstream * mask


def global_average_pool(x: np.ndarray, valid_extents=None) -> np.ndarray:
    """Per-channel spatial mean; with extents, the mean only covers each
    sample's top-left (h_n, w_n) region so zero padding never leaks in."""
    n, h, w, c = x.shape
    if valid_extents is None:
        out = np.empty((n, c), dtype=x.dtype)
        for s in range(n):
            out[s] = x[s].mean(axis=(0, 1))
        return out
    out = np.empty((n, c), dtype=x.dtype)
    for s in range(n):
        hn, wn = valid_extents[s]
        if not (1 <= hn <= h and 1 <= wn <= w):
            raise EmptyValidRegion(f"extent {(hn, wn)} invalid for {(h, w)}")
        region = np.ascontiguousarray(x[s, :hn, :wn, :])
        out[s] = region.mean(axis=(0, 1))
    return out


def global_average_pool_backward(upstream: np.ndarray, x_shape, valid_extents=None) -> np.ndarray:
    n, h, w, c = x_shape
    gx = np.zeros(x_shape, dtype=upstream.dtype)
    for s in range(n):
        hn, wn = (h, w) if valid_extents is None else valid_extents[s]
        gx[s, :hn, :wn, :] = upstream[s] / upstream.dtype.type(hn * wn)
    return gx


def softmax_cross_entropy(logits: np.ndarray, onehot: np.ndarray):
    """Mean cross-entropy over the batch via max-shifted log-softmax.

    Returns (loss, probs, grad_logits) with grad = (probs - onehot) / N.
    """
    if logits.shape != onehot.shape or logits.ndim != 2:
        raise ShapeMismatch(f"logits {logits.shape} vs onehot {onehot.shape}")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    probs = np.exp(logp)
    loss = float(-(onehot * logp).sum() / logits.shape[0])
    grad = (probs - onehot) / logits.dtype.type(logits.shape[0])
    return loss, probs, grad


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def fresh(param: np.ndarray, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return AdamState(m=np.zeros_like(param), v=np.zeros_like(param),
                         t=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState):
    """One bias-corrected Adam update; returns (new_param, new_state)."""
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ShapeMismatch("param/grad/state shapes disagree")
    t = state.t + 1
    dt = param.dtype.type
    m = state.beta1 * state.m + dt(1 - state.beta1) * grad
    v = state.beta2 * state.v + dt(1 - state.beta2) * (grad * grad)
    mhat = m / dt(1 - state.beta1 ** t)
    vhat = v / dt(1 - state.beta2 ** t)
    new_param = param - dt(state.lr) * mhat / (np.sqrt(vhat) + dt(state.eps))
    return new_param, replace(state, m=m, v=v, t=t)


def glorot_uniform_init(shape, fan_in: int, fan_out: int, rng: Rng,
                        dtype=np.float32) -> np.ndarray:
    """I.i.d. uniform on [-L, L] with L = sqrt(6 / (fan_in + fan_out))."""
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError("fans must be positive")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape).astype(dtype)
