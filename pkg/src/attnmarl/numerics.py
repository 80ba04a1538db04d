"""Dense float64 kernels, a splittable counter-based RNG, and an Adam optimizer.

Everything in here is a pure function of its inputs so that training runs are
bit-reproducible and safe to call from parallel rollout workers.
"""

import hashlib
from dataclasses import dataclass, replace

import numpy as np


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two 2-D float64 arrays with explicit shape checking."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D arrays, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the entries of ``scores`` where ``mask`` is True.

    Masked entries come out exactly 0.0 and never participate in the max-shift
    or the normalizing sum, so their score values are irrelevant bit-for-bit.
    """
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if scores.shape != mask.shape:
        raise ValueError("scores and mask must have the same shape")
    if not mask.any():
        raise ValueError("masked_softmax: all entries masked (nothing to attend to)")
    shifted = scores - scores[mask].max()
    expd = np.where(mask, np.exp(np.where(mask, shifted, 0.0)), 0.0)
    return expd / expd.sum()


def masked_softmax_rows(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise masked softmax over the last axis.

    Rows whose mask is all-False yield an all-zero row (used for pad rows,
    which by contract attend to nothing).
    """
    mask = np.asarray(mask, dtype=bool)
    any_valid = mask.any(axis=-1, keepdims=True)
    neg = np.finfo(np.float64).min
    shifted = scores - np.max(np.where(mask, scores, neg), axis=-1, keepdims=True)
    expd = np.where(mask, np.exp(np.where(mask, shifted, 0.0)), 0.0)
    denom = expd.sum(axis=-1, keepdims=True)
    return np.where(any_valid, expd / np.where(denom == 0.0, 1.0, denom), 0.0)


def layer_norm_fwd(x, gain, offset, eps: float = 1e-5):
    """Layer normalization over the last axis with learned scale and location.

    Accepts a vector or any stack of vectors. Returns the normalized output and
    a cache for the backward pass.
    """
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    offset = np.asarray(offset, dtype=np.float64)
    if x.shape[-1] != gain.shape[-1] or gain.shape != offset.shape:
        raise ValueError("layer_norm_fwd: shape mismatch between x, gain and offset")
    if eps <= 0:
        raise ValueError("layer_norm_fwd: eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    xhat = x - mu
    var = np.mean(xhat * xhat, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    np.multiply(xhat, inv, out=xhat)
    y = xhat * gain
    y += offset
    cache = (xhat, inv, gain)
    return y, cache


def layer_norm_bwd(cache, dy):
    """Gradients of layer_norm_fwd: returns (dx, dgain, doffset)."""
    xhat, inv, gain = cache
    dy = np.asarray(dy, dtype=np.float64)
    lead = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=lead)
    doffset = dy.sum(axis=lead)
    dxhat = dy * gain
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = dxhat
    dx -= m1
    dx -= xhat * m2
    dx *= inv
    return dx, dgain, doffset


class Rng:
    """Counter-based random stream that supports reproducible splitting.

    A child stream obtained via ``split(label)`` is keyed purely by the root
    seed and the path of labels, never by how much the parent has drawn, so
    call order cannot perturb downstream streams. Identical (seed, path) pairs
    always yield bit-identical streams.
    """

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed)
        self.path = _path
        digest = hashlib.sha256(
            b"attnmarl/" + self.seed.to_bytes(8, "little", signed=False)
            + b"/" + "/".join(_path).encode()
        ).digest()
        key = int.from_bytes(digest[:16], "little")
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def split(self, label: str) -> "Rng":
        return Rng(self.seed, self.path + (str(label),))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def standard_normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={'/'.join(self.path) or '<root>'})"


@dataclass(frozen=True)
class AdamState:
    """Optimizer state for one flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(n_params: int, lr: float = 3e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(
        m=np.zeros(n_params), v=np.zeros(n_params), step=0,
        lr=lr, beta1=beta1, beta2=beta2, eps=eps,
    )


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState):
    """One bias-corrected adaptive-moment update. Returns (params', state')."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("adam_step: parameter/gradient/state length mismatch")
    finite = np.isfinite(grads)
    if not finite.all():
        idx = int(np.argmin(finite))
        raise FloatingPointError(f"non-finite gradient at parameter index {idx}")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    mhat = m / (1.0 - state.beta1 ** step)
    vhat = v / (1.0 - state.beta2 ** step)
    new_params = params - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return new_params, replace(state, m=m, v=v, step=step)
