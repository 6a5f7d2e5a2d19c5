"""Small neural-net building blocks shared by the field and the CNN heads.

Everything is plain float64 numpy with hand-written backward passes; the
architectures in this package are tiny and fixed, so no autodiff framework
is pulled in.
"""

import numpy as np


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(x):
    return np.maximum(x, 0.0)


def he_init(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class AdamState:
    """Adaptive-moment optimizer over a dict of named parameter arrays."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            params[k] = params[k] - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def exp_decay_lr(step, total_steps, lr_init, lr_final):
    """Exponential schedule hitting lr_final exactly on the last step."""
    if total_steps <= 1:
        return lr_init
    frac = step / (total_steps - 1)
    return lr_init * (lr_final / lr_init) ** frac


def conv2d_forward(x, w, b, stride=1):
    """3x3 same-padded convolution.

    x: (n, c_in, h, w); w: (c_out, c_in, 3, 3); b: (c_out,).
    Returns (out (n, c_out, h', w'), cache).
    """
    n, c_in, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (n, c_in, h', w', 3, 3)
    out = np.einsum("nchwij,kcij->nkhw", windows, w, optimize=True) + b[None, :, None, None]
    return out, (x.shape, windows, w, stride)


def conv2d_backward(dout, cache):
    x_shape, windows, w, stride = cache
    n, c_in, h, wd = x_shape
    dw = np.einsum("nkhw,nchwij->kcij", dout, windows, optimize=True)
    db = dout.sum(axis=(0, 2, 3))
    dxp = np.zeros((n, c_in, h + 2, wd + 2))
    hp, wp = dout.shape[2], dout.shape[3]
    for di in range(3):
        for dj in range(3):
            patch = np.einsum("nkhw,kc->nchw", dout, w[:, :, di, dj], optimize=True)
            dxp[:, :, di:di + stride * hp:stride, dj:dj + stride * wp:stride] += patch
    return dxp[:, :, 1:-1, 1:-1], dw, db


def bilinear_matrix(n_out, n_in):
    """Dense 1-D bilinear interpolation operator (n_out, n_in), edges clamped."""
    a = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        lo_c = min(max(lo, 0), n_in - 1)
        hi_c = min(max(lo + 1, 0), n_in - 1)
        a[i, lo_c] += 1.0 - frac
        a[i, hi_c] += frac
    return a
