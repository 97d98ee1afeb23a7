"""Pure numpy kernels, used when the compiled extension is unavailable.

Signatures mirror ``_ckernels``. Inputs are assumed already validated by
``leantta.tensor``; no shape checking happens here.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_f32(x, w, b, stride, padding):
    win = _windows(x.astype(np.float64), w.shape[2], w.shape[3], stride, padding)
    # (N, H', W', O)
    acc = np.tensordot(win, w.astype(np.float64), axes=([1, 4, 5], [1, 2, 3]))
    acc += b.astype(np.float64)
    return np.ascontiguousarray(acc.transpose(0, 3, 1, 2), dtype=np.float32)


def linear_f32(x, w, b):
    acc = x.astype(np.float64) @ w.astype(np.float64).T
    acc += b.astype(np.float64)
    return acc.astype(np.float32)


def conv2d_q(xq, x_zp, wq, bias_q, stride, padding):
    xi = xq.astype(np.int64) - int(x_zp)
    win = _windows(xi, wq.shape[2], wq.shape[3], stride, padding)
    acc = np.tensordot(win, wq.astype(np.int64), axes=([1, 4, 5], [1, 2, 3]))
    acc += bias_q.astype(np.int64)
    return np.ascontiguousarray(acc.transpose(0, 3, 1, 2), dtype=np.int64)


def linear_q(xq, x_zp, wq, bias_q):
    xi = xq.astype(np.int64) - int(x_zp)
    acc = xi @ wq.astype(np.int64).T
    acc += bias_q.astype(np.int64)
    return acc
