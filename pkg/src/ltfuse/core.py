"""Dense numeric primitives with hand-written backward passes.

Everything here works on float64 numpy arrays. Layers take an optional
leading batch axis so the fusion module can push a whole mini-batch through
in one call; the per-sample case is simply a batch of one.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionError, InvalidInputError

CE_FLOOR = 1e-12


def _as_finite(x, name="input"):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def softmax(v, axis=-1):
    v = _as_finite(v, "logits")
    if v.size == 0:
        raise InvalidInputError("softmax of an empty vector")
    z = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def sigmoid(x):
    """Logistic function, stable for large |x|. Works on scalars and arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def balanced_class_weights(counts):
    """Per-class loss weights proportional to 1/n_y, rescaled to mean 1.

    Classes with no training samples get weight 0 and are left out of the mean.
    """
    n = np.asarray(counts, dtype=np.float64)
    w = np.zeros_like(n)
    pos = n > 0
    if not np.any(pos):
        raise InvalidInputError("balanced weights need at least one nonempty class")
    w[pos] = 1.0 / n[pos]
    w[pos] /= w[pos].mean()
    return w


def cross_entropy(scores, label, class_weights=None, floor=CE_FLOOR):
    """``-w[label] * log(scores[label] + floor)`` for one probability vector."""
    scores = _as_finite(scores, "scores")
    k = scores.shape[-1]
    label = int(label)
    if not 0 <= label < k:
        raise IndexError(f"label {label} out of range for {k} classes")
    weight = 1.0
    if class_weights is not None:
        class_weights = np.asarray(class_weights, dtype=np.float64)
        if class_weights.shape != (k,):
            raise DimensionError("class_weights must have one entry per class")
        weight = float(class_weights[label])
    return -weight * float(np.log(scores[label] + floor))


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2: float = 0.0

    @classmethod
    def zeros(cls, size, **hyper):
        return cls(m=np.zeros(size), v=np.zeros(size), **hyper)


def adam_step(params, grads, state):
    """One bias-corrected ADAM update. Returns ``(new_params, new_state)``.

    The L2 term ``l2 * params`` is added to the gradient before the moment
    updates (coupled weight decay). Inputs are not modified.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise DimensionError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    g = grads + state.l2 * params if state.l2 > 0 else grads
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, t=t)


def finite_diff_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if eps <= 0:
        raise InvalidInputError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x))
        flat[i] = orig - eps
        lo = float(f(x))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise InvalidInputError(f"non-finite function value at coordinate {i}")
        g[i] = (hi - lo) / (2.0 * eps)
    return grad


# -- layers -----------------------------------------------------------------


def dense_forward(x, weights, bias):
    """Affine map ``x @ W.T + b``; ``W`` has shape (n_out, n_in)."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if x.shape[-1] != weights.shape[1] or weights.shape[0] != np.shape(bias)[0]:
        raise DimensionError(
            f"dense: input {x.shape}, weights {weights.shape}, bias {np.shape(bias)}"
        )
    return x @ weights.T + bias


def dense_backward(x, weights, grad_out):
    """Gradients of the affine map w.r.t. input, weights and bias.

    ``x`` and ``grad_out`` may carry a leading batch axis; weight and bias
    gradients are summed over it.
    """
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    dx = grad_out @ weights
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    dw = g2.T @ x2
    db = g2.sum(axis=0)
    return dx, dw, db


def conv2x2_forward(x, filters, bias):
    """Valid convolution of a (k, C) score matrix with F filters of shape (2, C).

    The filter slides along the class axis with stride 1 and covers every
    column at once, so the output is (k-1, F). C is 2 for the stacked
    two-expert input and 1 for the single-expert variant.
    """
    x = np.asarray(x, dtype=np.float64)
    filters = np.asarray(filters, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2] < 2:
        raise InvalidInputError("conv2x2 needs at least two rows (classes)")
    if filters.ndim != 3 or filters.shape[1] != 2 or filters.shape[2] != x.shape[-1]:
        raise DimensionError(f"filters {filters.shape} do not fit input {x.shape}")
    top = x[..., :-1, :]
    bottom = x[..., 1:, :]
    return top @ filters[:, 0, :].T + bottom @ filters[:, 1, :].T + bias


def conv2x2_backward(x, filters, grad_out):
    """Returns ``(dx, dfilters, dbias)`` for :func:`conv2x2_forward`."""
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    dx = np.zeros_like(x)
    dx[..., :-1, :] += grad_out @ filters[:, 0, :]
    dx[..., 1:, :] += grad_out @ filters[:, 1, :]
    c = x.shape[-1]
    top = x[..., :-1, :].reshape(-1, c)
    bottom = x[..., 1:, :].reshape(-1, c)
    g = grad_out.reshape(-1, grad_out.shape[-1])
    dfilters = np.stack([g.T @ top, g.T @ bottom], axis=1)
    dbias = g.sum(axis=0)
    return dx, dfilters, dbias


def avg_pool_filters_forward(z):
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0 or z.shape[-1] < 1:
        raise InvalidInputError("average pooling over an empty filter axis")
    return z.mean(axis=-1)


def avg_pool_filters_backward(grad_h, n_filters):
    grad_h = np.asarray(grad_h, dtype=np.float64)
    return np.repeat(grad_h[..., None] / n_filters, n_filters, axis=-1)
