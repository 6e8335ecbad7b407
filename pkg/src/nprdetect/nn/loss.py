import numpy as np


def bce_loss(logits, labels):
    """Mean binary cross-entropy on raw logits.

    Uses ``max(z, 0) - z*y + log1p(exp(-|z|))`` so large logits never
    overflow. Returns ``(loss, dloss/dlogits)``; the gradient is
    ``(sigmoid(z) - y) / batch`` in the dtype of ``logits``.
    """
    z = np.asarray(logits)
    y = np.asarray(labels)
    if z.shape != y.shape:
        raise ValueError(f"logits {z.shape} and labels {y.shape} differ in shape")
    if z.size == 0:
        raise ValueError("empty batch")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    z64 = z.astype(np.float64)
    y64 = y.astype(np.float64)
    per_sample = np.maximum(z64, 0) - z64 * y64 + np.log1p(np.exp(-np.abs(z64)))
    loss = float(per_sample.mean())
    grad = (sigmoid(z64) - y64) / z.size
    out_dtype = z.dtype if np.issubdtype(z.dtype, np.floating) else np.float64
    return loss, grad.astype(out_dtype)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
