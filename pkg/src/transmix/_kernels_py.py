"""Pure numpy versions of the compiled kernels (same summation order)."""
import numpy as np

BACKEND = "numpy"


def stencil_apply(Y, src, w, diag, out=None):
    # src == -1 picks the trailing zero sentinel
    Yx = np.append(Y, 0.0)
    acc = diag * Y
    for s in range(src.shape[0]):
        acc = acc + w[s] * Yx[src[s]]
    if out is None:
        return acc
    out[:] = acc
    return out


def dirichlet_sum(Y, dst, w, p):
    Yx = np.append(Y, 0.0)
    total = 0.0
    for s in range(dst.shape[0]):
        live = w[s] != 0.0
        a = Y[live]
        b = Yx[dst[s][live]]
        if p == 2.0:
            term = (b - a) * (b - a)
        else:
            term = (b ** (p - 1.0) - a ** (p - 1.0)) * (b - a)
        total += float(np.sum(w[s][live] * term))
    return total


def noise_apply(full, src, coef, dW, out=None):
    acc = np.zeros((full.shape[0], src.shape[1]), dtype=np.complex128)
    for ch in range(src.shape[0]):
        acc = acc + (coef[ch] * full[:, src[ch]]) * dW[:, ch, None]
    if out is None:
        return acc
    out[:] = acc
    return out
