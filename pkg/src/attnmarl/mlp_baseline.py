"""Fully-centralized MLP reference controller.

A fixed-capacity network over the concatenated global observation vector,
zero-padded or truncated to N agent slots. Two 64-unit tanh hidden layers; the
policy head emits (mean, log-variance) for every slot, the value head a scalar.
Slots beyond the live agent count are discarded downstream, and agents beyond
capacity stay under simulated human control.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .attn_net import HIDDEN_UNITS, LOG_VAR_MAX, LOG_VAR_MIN
from .graph import ObservationBatch
from .numerics import Rng

MLP_TENSOR_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")


@dataclass(frozen=True)
class MlpParams:
    """Parameters of the padded/truncated centralized MLP."""

    kind: str       # "policy" | "value"
    capacity: int   # N, fixed number of agent slots
    n: int          # per-agent observation width
    action_dim: int
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    def tensors(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "w3": self.w3, "b3": self.b3}

    def flatten(self) -> np.ndarray:
        t = self.tensors()
        return np.concatenate([t[name].ravel() for name in MLP_TENSOR_NAMES])

    def unflatten(self, vec: np.ndarray) -> "MlpParams":
        vec = np.asarray(vec, dtype=np.float64)
        out, i = {}, 0
        for name in MLP_TENSOR_NAMES:
            ref = self.tensors()[name]
            out[name] = vec[i:i + ref.size].reshape(ref.shape).copy()
            i += ref.size
        if i != vec.size:
            raise ValueError(f"flat vector length {vec.size}, expected {i}")
        return replace(self, **out)

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.tensors().values())


def init_mlp_params(rng: Rng, capacity: int, n: int, action_dim: int,
                    kind: str) -> MlpParams:
    if kind not in ("policy", "value"):
        raise ValueError(f"unknown network kind {kind!r}")
    in_dim = capacity * n
    out_dim = 2 * capacity * action_dim if kind == "policy" else 1

    def u(shape, fan_in):
        s = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-s, s, size=shape)

    return MlpParams(
        kind=kind, capacity=capacity, n=n, action_dim=action_dim,
        w1=u((in_dim, HIDDEN_UNITS), in_dim), b1=np.zeros(HIDDEN_UNITS),
        w2=u((HIDDEN_UNITS, HIDDEN_UNITS), HIDDEN_UNITS), b2=np.zeros(HIDDEN_UNITS),
        w3=u((HIDDEN_UNITS, out_dim), HIDDEN_UNITS), b3=np.zeros(out_dim),
    )


def pack_global_obs(obs: ObservationBatch, capacity: int) -> np.ndarray:
    """Concatenate the first min(|I_t|, N) agents' observations in position
    order; remaining slots stay zero, agents beyond N are truncated away."""
    return pack_rows(obs.obs[None], capacity)[0]


def pack_rows(rows: np.ndarray, capacity: int) -> np.ndarray:
    """(B, P, n) padded observation rows -> (B, N*n) packed global vectors."""
    B, P, n = rows.shape
    if P >= capacity:
        packed = rows[:, :capacity, :]
    else:
        packed = np.concatenate([rows, np.zeros((B, capacity - P, n))], axis=1)
    return packed.reshape(B, capacity * n)


def mlp_fwd_batch(packed: np.ndarray, params: MlpParams):
    """Shared tanh trunk. Returns (raw head output, cache)."""
    if packed.shape[-1] != params.capacity * params.n:
        raise ValueError(f"packed width {packed.shape[-1]} != N*n = {params.capacity * params.n}")
    h1 = np.tanh(packed @ params.w1 + params.b1)
    h2 = np.tanh(h1 @ params.w2 + params.b2)
    raw = h2 @ params.w3 + params.b3
    cache = {"params": params, "packed": packed, "h1": h1, "h2": h2, "raw": raw}
    return raw, cache


def mlp_bwd_batch(cache, d_raw):
    params: MlpParams = cache["params"]
    h1, h2, packed = cache["h1"], cache["h2"], cache["packed"]
    dw3 = h2.T @ d_raw
    db3 = d_raw.sum(axis=0)
    dh2 = (d_raw @ params.w3.T) * (1.0 - h2 * h2)
    dw2 = h1.T @ dh2
    db2 = dh2.sum(axis=0)
    dh1 = (dh2 @ params.w2.T) * (1.0 - h1 * h1)
    dw1 = packed.T @ dh1
    db1 = dh1.sum(axis=0)
    d_packed = dh1 @ params.w1.T
    grads = replace(params, w1=dw1, b1=db1, w2=dw2, b2=db2, w3=dw3, b3=db3)
    return grads, d_packed


def mlp_policy_fwd_batch(packed: np.ndarray, params: MlpParams):
    """Returns (means, log_vars, cache), each (B, N, d). Which slots are live
    is the caller's business; dead slots' outputs are discarded."""
    if params.kind != "policy":
        raise ValueError("mlp_policy_fwd_batch needs a policy MlpParams")
    raw, cache = mlp_fwd_batch(packed, params)
    B = packed.shape[0]
    half = params.capacity * params.action_dim
    means = raw[:, :half].reshape(B, params.capacity, params.action_dim)
    raw_lv = raw[:, half:].reshape(B, params.capacity, params.action_dim)
    log_vars = np.clip(raw_lv, LOG_VAR_MIN, LOG_VAR_MAX)
    cache["raw_log_vars"] = raw_lv
    return means, log_vars, cache


def mlp_policy_bwd_batch(cache, d_means, d_log_vars):
    params: MlpParams = cache["params"]
    B = d_means.shape[0]
    half = params.capacity * params.action_dim
    pass_through = ((cache["raw_log_vars"] > LOG_VAR_MIN)
                    & (cache["raw_log_vars"] < LOG_VAR_MAX))
    d_raw = np.concatenate([d_means.reshape(B, half),
                            (d_log_vars * pass_through).reshape(B, half)], axis=1)
    return mlp_bwd_batch(cache, d_raw)


def mlp_value_fwd_batch(packed: np.ndarray, params: MlpParams):
    if params.kind != "value":
        raise ValueError("mlp_value_fwd_batch needs a value MlpParams")
    raw, cache = mlp_fwd_batch(packed, params)
    return raw[:, 0], cache


def mlp_value_bwd_batch(cache, d_values):
    return mlp_bwd_batch(cache, d_values[:, None])


def mlp_policy_fwd(packed_vec: np.ndarray, params: MlpParams):
    means, log_vars, cache = mlp_policy_fwd_batch(packed_vec[None], params)
    return means[0], log_vars[0], cache


def mlp_grad_check(params: MlpParams, packed_vec: np.ndarray, rng: Rng,
                   tol: float = 1e-4, h: float = 1e-5):
    """Finite-difference check of the MLP backward pass (both kinds)."""
    from .attn_net import finite_diff_report
    packed = packed_vec[None]
    if params.kind == "policy":
        means, log_vars, cache = mlp_policy_fwd_batch(packed, params)
        w_mean = rng.normal(size=means.shape)
        w_lv = rng.normal(size=log_vars.shape)

        def loss(ps):
            m, lv, _ = mlp_policy_fwd_batch(packed, ps)
            return float((w_mean * m).sum() + (w_lv * lv).sum())

        grads, _ = mlp_policy_bwd_batch(cache, w_mean, w_lv)
    else:
        _, cache = mlp_value_fwd_batch(packed, params)

        def loss(ps):
            v, _ = mlp_value_fwd_batch(packed, ps)
            return float(v[0])

        grads, _ = mlp_value_bwd_batch(cache, np.ones(1))
    return finite_diff_report(params, grads, loss, tol=tol, h=h)


def mlp_params_to_dict(params: MlpParams) -> dict:
    return {
        "kind": params.kind,
        "hyper": {"capacity": params.capacity, "n": params.n,
                  "action_dim": params.action_dim, "hidden": HIDDEN_UNITS},
        "tensors": {name: t.tolist() for name, t in params.tensors().items()},
    }


def mlp_params_from_dict(doc: dict) -> MlpParams:
    hyper = doc["hyper"]
    ref = init_mlp_params(Rng(0), capacity=hyper["capacity"], n=hyper["n"],
                          action_dim=hyper["action_dim"], kind=doc["kind"])
    tensors = {}
    for name in MLP_TENSOR_NAMES:
        arr = np.asarray(doc["tensors"][name], dtype=np.float64)
        want = ref.tensors()[name].shape
        if arr.shape != want:
            raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, expected {want}")
        tensors[name] = arr
    return replace(ref, **tensors)
