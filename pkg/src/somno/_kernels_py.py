"""Pure-numpy fallback for the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def fir_decimate(padded, taps, factor, n_out):
    """Polyphase form of ``y[c, m] = sum_k taps[k] * padded[c, m*factor + k]``."""
    padded = np.ascontiguousarray(padded, dtype=np.float64)
    taps = np.ascontiguousarray(taps, dtype=np.float64)
    n_taps = taps.shape[0]
    if n_taps % 2 != 1:
        raise ValueError("taps must have odd length")
    if n_out > 0 and (n_out - 1) * factor + n_taps > padded.shape[1]:
        raise ValueError("padded input too short for requested output length")
    out = np.zeros((padded.shape[0], n_out), dtype=np.float64)
    if n_out == 0:
        return out
    for phase in range(min(factor, n_taps)):
        sub_taps = taps[phase::factor]
        span = n_out + sub_taps.shape[0] - 1
        sub = padded[:, phase::factor][:, :span]
        for c in range(padded.shape[0]):
            out[c] += np.correlate(sub[c], sub_taps, mode="valid")
    return out


def onepole_lowpass(x, a, block=256):
    """Blockwise-vectorized ``y[i] = a*y[i-1] + (1-a)*x[i]`` along the last axis.

    Within a block the recursion is a lower-triangular matrix product; only the
    carried state crosses block boundaries.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    n_ch, n = x.shape
    n_blocks = -(-n // block)
    padded = np.zeros((n_ch, n_blocks * block))
    padded[:, :n] = x
    lag = np.arange(block)[:, None] - np.arange(block)[None, :]
    kernel = np.where(lag >= 0, a ** np.maximum(lag, 0), 0.0) * (1.0 - a)
    z = padded.reshape(n_ch, n_blocks, block) @ kernel.T
    carry_gain = a ** np.arange(1, block + 1)
    state = np.zeros(n_ch)
    for j in range(n_blocks):
        z[:, j, :] += state[:, None] * carry_gain
        state = z[:, j, -1].copy()
    return z.reshape(n_ch, -1)[:, :n]
