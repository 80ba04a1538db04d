"""Attentional policy and value networks over classed agent graphs.

One multi-head attention layer with per-edge-class key/value bias vectors,
followed by a shared fully-connected trunk; both sublayers use ReLU then layer
normalization. The policy head emits a per-agent Gaussian (mean, log-variance);
the value head max-pools over agents and maps to a scalar.

Forward passes run batched over padded timesteps; all gradients are derived by
hand and validated against central finite differences.
"""

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .graph import AgentGraph, ObservationBatch
from .numerics import Rng, layer_norm_bwd, layer_norm_fwd, masked_softmax_rows

HIDDEN_UNITS = 64
LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 2.0
_LOG_2PI = math.log(2.0 * math.pi)

# flatten/unflatten and grad reports all follow this tensor order
TENSOR_NAMES = ("wq", "wk", "wv", "ak", "av", "ln1_gain", "ln1_offset",
                "trunk_w", "trunk_b", "ln2_gain", "ln2_offset", "head_w", "head_b")


@dataclass(frozen=True)
class AttnLayerParams:
    """Per-head projections plus per-(head, class) key/value bias vectors."""

    wq: np.ndarray  # (H, n, m)
    wk: np.ndarray  # (H, n, m)
    wv: np.ndarray  # (H, n, m)
    ak: np.ndarray  # (H, C, m)
    av: np.ndarray  # (H, C, m)


@dataclass(frozen=True)
class ParamSet:
    """All learned tensors of one network (policy or value instance)."""

    kind: str  # "policy" | "value"
    n: int
    m: int
    heads: int
    num_classes: int
    action_dim: int
    attn: AttnLayerParams
    ln1_gain: np.ndarray
    ln1_offset: np.ndarray
    trunk_w: np.ndarray
    trunk_b: np.ndarray
    ln2_gain: np.ndarray
    ln2_offset: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray

    def tensors(self):
        a = self.attn
        return {"wq": a.wq, "wk": a.wk, "wv": a.wv, "ak": a.ak, "av": a.av,
                "ln1_gain": self.ln1_gain, "ln1_offset": self.ln1_offset,
                "trunk_w": self.trunk_w, "trunk_b": self.trunk_b,
                "ln2_gain": self.ln2_gain, "ln2_offset": self.ln2_offset,
                "head_w": self.head_w, "head_b": self.head_b}

    def flatten(self) -> np.ndarray:
        t = self.tensors()
        return np.concatenate([t[name].ravel() for name in TENSOR_NAMES])

    def unflatten(self, vec: np.ndarray) -> "ParamSet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected flat vector of length {self.n_params}, got {vec.shape}")
        out, i = {}, 0
        for name in TENSOR_NAMES:
            ref = self.tensors()[name]
            out[name] = vec[i:i + ref.size].reshape(ref.shape).copy()
            i += ref.size
        attn = AttnLayerParams(wq=out["wq"], wk=out["wk"], wv=out["wv"],
                               ak=out["ak"], av=out["av"])
        return replace(self, attn=attn,
                       ln1_gain=out["ln1_gain"], ln1_offset=out["ln1_offset"],
                       trunk_w=out["trunk_w"], trunk_b=out["trunk_b"],
                       ln2_gain=out["ln2_gain"], ln2_offset=out["ln2_offset"],
                       head_w=out["head_w"], head_b=out["head_b"])

    @property
    def n_params(self) -> int:
        return param_count(self.n, self.m, self.heads, self.num_classes,
                           self.action_dim, self.kind)

    def zeros_like(self) -> "ParamSet":
        return self.unflatten(np.zeros(self.n_params))


@dataclass(frozen=True)
class GaussianPolicyOut:
    """Per-agent diagonal-Gaussian action distribution parameters."""

    means: np.ndarray      # (rows, d)
    log_vars: np.ndarray   # (rows, d), clamped to [LOG_VAR_MIN, LOG_VAR_MAX]
    valid_mask: np.ndarray  # (rows,) pad rows are ignored by every statistic


def param_count(n, m, heads, num_classes, action_dim, kind) -> int:
    out_dim = 2 * action_dim if kind == "policy" else 1
    hm = heads * m
    return (3 * heads * n * m + 2 * heads * num_classes * m
            + 2 * hm
            + hm * HIDDEN_UNITS + HIDDEN_UNITS
            + 2 * HIDDEN_UNITS
            + HIDDEN_UNITS * out_dim + out_dim)


def init_params(rng: Rng, n: int, num_classes: int, action_dim: int,
                kind: str, m: int = 16, heads: int = 4) -> ParamSet:
    """Fan-in-scaled uniform weights; class biases start at zero so training
    begins class-agnostic; layer norms start as identity."""
    if kind not in ("policy", "value"):
        raise ValueError(f"unknown network kind {kind!r}")
    out_dim = 2 * action_dim if kind == "policy" else 1

    def u(shape, fan_in):
        s = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-s, s, size=shape)

    hm = heads * m
    attn = AttnLayerParams(
        wq=u((heads, n, m), n), wk=u((heads, n, m), n), wv=u((heads, n, m), n),
        ak=np.zeros((heads, num_classes, m)), av=np.zeros((heads, num_classes, m)),
    )
    return ParamSet(
        kind=kind, n=n, m=m, heads=heads, num_classes=num_classes, action_dim=action_dim,
        attn=attn,
        ln1_gain=np.ones(hm), ln1_offset=np.zeros(hm),
        trunk_w=u((hm, HIDDEN_UNITS), hm), trunk_b=np.zeros(HIDDEN_UNITS),
        ln2_gain=np.ones(HIDDEN_UNITS), ln2_offset=np.zeros(HIDDEN_UNITS),
        head_w=u((HIDDEN_UNITS, out_dim), HIDDEN_UNITS), head_b=np.zeros(out_dim),
    )


def one_hot_classes(cls: np.ndarray, num_classes: int) -> np.ndarray:
    """(…, P, P) class-index array (-1 = no edge) -> (…, P, P, C) float indicator."""
    out = np.zeros(cls.shape + (num_classes,))
    valid = cls >= 0
    idx = np.where(valid, cls, 0)
    np.put_along_axis(out, idx[..., None], valid[..., None].astype(np.float64), axis=-1)
    return out


# ---------------------------------------------------------------------------
# batched forward / backward cores (B timesteps, P padded agent slots)
# ---------------------------------------------------------------------------

def attention_fwd_batch(x, cls, valid, p: AttnLayerParams, onehot=None):
    """Multi-head classed attention over a padded batch.

    x: (B, P, n) observations, zero in pad rows.
    cls: (B, P, P) edge classes minus one, -1 where there is no edge.
    valid: (B, P) row validity.
    Returns (out: (B, P, H*m), cache). Raises if any valid agent has no
    out-edge: an agent must at least attend to itself.
    """
    heads, n, m = p.wq.shape
    num_classes = p.ak.shape[1]
    if cls.size and cls.max() >= num_classes:
        raise ValueError(f"edge class index {int(cls.max())} out of range "
                         f"for {num_classes} classes")
    edge_mask = cls >= 0
    no_edges = valid & ~edge_mask.any(axis=-1)
    if no_edges.any():
        b, i = np.argwhere(no_edges)[0]
        raise ValueError(f"agent {i} of timestep {b} has zero out-edges")
    if onehot is None:
        onehot = one_hot_classes(cls, num_classes)
    scale = 1.0 / math.sqrt(m)
    B, P, _ = x.shape
    flat = x.reshape(B * P, n)

    def project(w):  # all heads in one GEMM: (B*P,n)@(n,H*m) -> (B,H,P,m)
        return (flat @ w.transpose(1, 0, 2).reshape(n, heads * m)) \
            .reshape(B, P, heads, m).transpose(0, 2, 1, 3)

    q, k, v = project(p.wq), project(p.wk), project(p.wv)
    # e_ij = q_i . (k_j + ak[c(i,j)]) / sqrt(m); the bias part only needs q
    # projected onto the C class vectors, never a (B,H,P,P,m) tensor
    content = np.matmul(q, k.transpose(0, 1, 3, 2))            # (B,H,P,P)
    qa = np.matmul(q, p.ak.transpose(0, 2, 1)[None])           # (B,H,P,C)
    e = (content + np.einsum("bhpc,bpqc->bhpq", qa, onehot)) * scale
    alpha = masked_softmax_rows(e, edge_mask[:, None])
    alpha_c = np.einsum("bhpq,bpqc->bhpc", alpha, onehot)
    out = np.matmul(alpha, v) + np.matmul(alpha_c, p.av[None])  # (B,H,P,m)
    out = out.transpose(0, 2, 1, 3).reshape(B, P, heads * m)
    cache = {"x": x, "onehot": onehot, "params": p, "scale": scale,
             "q": q, "k": k, "v": v, "alpha": alpha, "alpha_c": alpha_c}
    return out, cache


def attention_bwd_batch(cache, d_out):
    """Gradients of attention_fwd_batch w.r.t. parameters and inputs."""
    p: AttnLayerParams = cache["params"]
    x, onehot, scale = cache["x"], cache["onehot"], cache["scale"]
    q, k, v = cache["q"], cache["k"], cache["v"]
    alpha, alpha_c = cache["alpha"], cache["alpha_c"]
    heads, n, m = p.wq.shape
    B, P, _ = x.shape
    flat = x.reshape(B * P, n)
    g = d_out.reshape(B, P, heads, m).transpose(0, 2, 1, 3)    # (B,H,P,m)
    # out = alpha @ v + alpha_c @ av
    dalpha = np.matmul(g, v.transpose(0, 1, 3, 2))
    dalpha += np.einsum("bhpc,bpqc->bhpq", np.matmul(g, p.av.transpose(0, 2, 1)[None]),
                        onehot)
    dv = np.matmul(alpha.transpose(0, 1, 3, 2), g)
    dav = np.einsum("bhpc,bhpm->hcm", alpha_c, g)
    # softmax rows: de = alpha * (dalpha - sum_j alpha dalpha)
    de = alpha * (dalpha - (alpha * dalpha).sum(axis=-1, keepdims=True))
    de *= scale
    dq = np.matmul(de, k)
    dk = np.matmul(de.transpose(0, 1, 3, 2), q)
    dec = np.einsum("bhpq,bpqc->bhpc", de, onehot)
    dq += np.matmul(dec, p.ak[None])
    dak = np.einsum("bhpc,bhpm->hcm", dec, q)
    dx = np.zeros_like(x)
    dws = []
    for proj, w in ((dq, p.wq), (dk, p.wk), (dv, p.wv)):
        proj2 = proj.transpose(0, 2, 1, 3).reshape(B * P, heads * m)
        dw = (flat.T @ proj2).reshape(n, heads, m).transpose(1, 0, 2)
        dws.append(dw)
        dx += (proj2 @ w.transpose(1, 0, 2).reshape(n, heads * m).T).reshape(B, P, n)
    grads = AttnLayerParams(wq=dws[0], wk=dws[1], wv=dws[2], ak=dak, av=dav)
    return grads, dx


def _trunk_fwd_batch(x, cls, valid, params: ParamSet, onehot=None):
    attn_out, attn_cache = attention_fwd_batch(x, cls, valid, params.attn, onehot)
    z1 = np.maximum(attn_out, 0.0)
    l1, ln1_cache = layer_norm_fwd(z1, params.ln1_gain, params.ln1_offset)
    B, P, hm = l1.shape
    t = (l1.reshape(B * P, hm) @ params.trunk_w).reshape(B, P, HIDDEN_UNITS) + params.trunk_b
    z2 = np.maximum(t, 0.0)
    l2, ln2_cache = layer_norm_fwd(z2, params.ln2_gain, params.ln2_offset)
    cache = {"params": params, "attn_cache": attn_cache, "attn_out": attn_out,
             "ln1_cache": ln1_cache, "l1": l1, "t": t, "ln2_cache": ln2_cache,
             "l2": l2, "valid": valid}
    return l2, cache


def _trunk_bwd_batch(cache, d_l2):
    params: ParamSet = cache["params"]
    B, P, hm = cache["l1"].shape
    dz2, dln2_gain, dln2_offset = layer_norm_bwd(cache["ln2_cache"], d_l2)
    dt = dz2 * (cache["t"] > 0.0)
    dtrunk_w = cache["l1"].reshape(B * P, hm).T @ dt.reshape(B * P, HIDDEN_UNITS)
    dtrunk_b = dt.sum(axis=(0, 1))
    dl1 = np.matmul(dt, params.trunk_w.T)
    dz1, dln1_gain, dln1_offset = layer_norm_bwd(cache["ln1_cache"], dl1)
    d_attn_out = dz1 * (cache["attn_out"] > 0.0)
    attn_grads, dx = attention_bwd_batch(cache["attn_cache"], d_attn_out)
    partial = {"attn": attn_grads, "ln1_gain": dln1_gain, "ln1_offset": dln1_offset,
               "trunk_w": dtrunk_w, "trunk_b": dtrunk_b,
               "ln2_gain": dln2_gain, "ln2_offset": dln2_offset}
    return partial, dx


def _grads_paramset(params: ParamSet, partial, dhead_w, dhead_b) -> ParamSet:
    return replace(params, attn=partial["attn"],
                   ln1_gain=partial["ln1_gain"], ln1_offset=partial["ln1_offset"],
                   trunk_w=partial["trunk_w"], trunk_b=partial["trunk_b"],
                   ln2_gain=partial["ln2_gain"], ln2_offset=partial["ln2_offset"],
                   head_w=dhead_w, head_b=dhead_b)


def policy_fwd_batch(x, cls, valid, params: ParamSet, onehot=None):
    """Padded-batch policy forward. Returns (means, log_vars, cache), each
    (B, P, d); pad rows carry junk and are ignored by contract."""
    if params.kind != "policy":
        raise ValueError("policy_fwd_batch needs a policy ParamSet")
    l2, cache = _trunk_fwd_batch(x, cls, valid, params, onehot)
    B, P, _ = l2.shape
    raw = (l2.reshape(B * P, HIDDEN_UNITS) @ params.head_w).reshape(B, P, -1) + params.head_b
    d = params.action_dim
    means = raw[..., :d]
    log_vars = np.clip(raw[..., d:], LOG_VAR_MIN, LOG_VAR_MAX)
    cache["raw_log_vars"] = raw[..., d:]
    return means, log_vars, cache


def policy_bwd_batch(cache, d_means, d_log_vars):
    """Backward through policy_fwd_batch. Upstream grads must be zero on pad
    rows. Returns (ParamSet gradients, d_obs)."""
    params: ParamSet = cache["params"]
    d = params.action_dim
    pass_through = ((cache["raw_log_vars"] > LOG_VAR_MIN)
                    & (cache["raw_log_vars"] < LOG_VAR_MAX))
    draw = np.concatenate([d_means, d_log_vars * pass_through], axis=-1)
    l2 = cache["l2"]
    B, P, _ = l2.shape
    dhead_w = l2.reshape(B * P, HIDDEN_UNITS).T @ draw.reshape(B * P, 2 * d)
    dhead_b = draw.sum(axis=(0, 1))
    d_l2 = np.matmul(draw, params.head_w.T)
    partial, dx = _trunk_bwd_batch(cache, d_l2)
    return _grads_paramset(params, partial, dhead_w, dhead_b), dx


def value_fwd_batch(x, cls, valid, params: ParamSet, onehot=None):
    """Padded-batch value forward: agent-wise max pool over valid rows, then a
    linear head. Returns (values: (B,), cache)."""
    if params.kind != "value":
        raise ValueError("value_fwd_batch needs a value ParamSet")
    if not valid.any(axis=-1).all():
        raise ValueError("value_fwd_batch: a timestep has zero valid agents")
    l2, cache = _trunk_fwd_batch(x, cls, valid, params, onehot)
    masked = np.where(valid[..., None], l2, -np.inf)
    arg = masked.argmax(axis=1)                      # (B, HIDDEN)
    pooled = np.take_along_axis(l2, arg[:, None, :], axis=1)[:, 0, :]
    values = pooled @ params.head_w[:, 0] + params.head_b[0]
    cache["pool_arg"] = arg
    cache["pooled"] = pooled
    return values, cache


def value_bwd_batch(cache, d_values):
    """Backward through value_fwd_batch. Returns (ParamSet gradients, d_obs)."""
    params: ParamSet = cache["params"]
    pooled, arg = cache["pooled"], cache["pool_arg"]
    B = pooled.shape[0]
    dhead_w = (pooled.T @ d_values)[:, None]
    dhead_b = np.array([d_values.sum()])
    dpooled = d_values[:, None] * params.head_w[:, 0]
    d_l2 = np.zeros_like(cache["l2"])
    # (b, arg[b, k], k) triples are unique, so assignment is a valid scatter-add
    d_l2[np.arange(B)[:, None], arg, np.arange(HIDDEN_UNITS)[None, :]] = dpooled
    partial, dx = _trunk_bwd_batch(cache, d_l2)
    return _grads_paramset(params, partial, dhead_w, dhead_b), dx


# ---------------------------------------------------------------------------
# single-timestep interface over (ObservationBatch, AgentGraph)
# ---------------------------------------------------------------------------

def _instance_arrays(obs: ObservationBatch, g: AgentGraph):
    """Embed one timestep as a B=1 padded batch.

    The graph covers the valid rows, which must come first; trailing rows are
    padding with no edges at all.
    """
    rows = obs.obs.shape[0]
    nv = obs.n_valid
    if g.n_agents != nv:
        raise ValueError(f"graph has {g.n_agents} agents but obs has {nv} valid rows")
    if not obs.valid_mask[:nv].all():
        raise ValueError("valid rows must precede pad rows")
    cls = np.full((1, rows, rows), -1, dtype=np.int64)
    cls[0, :nv, :nv] = g.cls_matrix
    return obs.obs[None], cls, obs.valid_mask[None]


def attention_fwd(obs: ObservationBatch, g: AgentGraph, p: AttnLayerParams):
    x, cls, valid = _instance_arrays(obs, g)
    out, cache = attention_fwd_batch(x, cls, valid, p)
    return out[0], cache


def policy_fwd(obs: ObservationBatch, g: AgentGraph, params: ParamSet):
    x, cls, valid = _instance_arrays(obs, g)
    means, log_vars, cache = policy_fwd_batch(x, cls, valid, params)
    out = GaussianPolicyOut(means=means[0], log_vars=log_vars[0],
                            valid_mask=obs.valid_mask.copy())
    return out, cache


def value_fwd(obs: ObservationBatch, g: AgentGraph, params: ParamSet):
    x, cls, valid = _instance_arrays(obs, g)
    values, cache = value_fwd_batch(x, cls, valid, params)
    return float(values[0]), cache


def policy_backward(cache, d_means, d_log_vars):
    grads, dx = policy_bwd_batch(cache, d_means[None], d_log_vars[None])
    return grads, dx[0]


def value_backward(cache, d_value):
    grads, dx = value_bwd_batch(cache, np.array([d_value], dtype=np.float64))
    return grads, dx[0]


def sample_actions(out: GaussianPolicyOut, rng: Rng) -> np.ndarray:
    """Draw one action per valid agent; pad rows get zeros. The draw count
    depends only on the number of valid rows, keeping streams reproducible."""
    actions = np.zeros_like(out.means)
    nv = int(out.valid_mask.sum())
    if nv:
        std = np.exp(0.5 * out.log_vars[:nv])
        actions[:nv] = out.means[:nv] + std * rng.standard_normal((nv, out.means.shape[1]))
    return actions


# ---------------------------------------------------------------------------
# Gaussian statistics (joint over agents at one timestep, masked batched forms)
# ---------------------------------------------------------------------------

def gaussian_log_prob_batch(means, log_vars, actions, mask):
    """Joint log-density per timestep: sum over valid agents and action dims.

    The joint factorizes over agents, so this equals the sum of per-agent
    log-probabilities by construction.
    """
    z = (actions - means) ** 2 * np.exp(-log_vars)
    per = -0.5 * (_LOG_2PI + log_vars + z)
    return (per * mask[..., None]).sum(axis=(-2, -1))


def gaussian_log_prob_grads_batch(means, log_vars, actions, mask):
    """d log_prob / d(means, log_vars), zero on masked rows."""
    inv_var = np.exp(-log_vars)
    diff = actions - means
    d_means = diff * inv_var * mask[..., None]
    d_log_vars = 0.5 * (diff * diff * inv_var - 1.0) * mask[..., None]
    return d_means, d_log_vars

def gaussian_entropy_batch(log_vars, mask):
    per = 0.5 * (_LOG_2PI + 1.0 + log_vars)
    return (per * mask[..., None]).sum(axis=(-2, -1))


def gaussian_entropy_grads_batch(log_vars, mask):
    return np.full_like(log_vars, 0.5) * mask[..., None]


def gaussian_kl_batch(means_old, log_vars_old, means_new, log_vars_new, mask):
    """KL(old || new) per timestep, summed over valid agents and dims."""
    inv_new = np.exp(-log_vars_new)
    diff = means_new - means_old
    per = 0.5 * (np.exp(log_vars_old - log_vars_new) + diff * diff * inv_new
                 - 1.0 + log_vars_new - log_vars_old)
    return (per * mask[..., None]).sum(axis=(-2, -1))


def gaussian_kl_grads_batch(means_old, log_vars_old, means_new, log_vars_new, mask):
    """d KL(old || new) / d(means_new, log_vars_new), zero on masked rows."""
    inv_new = np.exp(-log_vars_new)
    diff = means_new - means_old
    d_means = diff * inv_new * mask[..., None]
    d_log_vars = 0.5 * (1.0 - np.exp(log_vars_old - log_vars_new)
                        - diff * diff * inv_new) * mask[..., None]
    return d_means, d_log_vars


def log_prob(out: GaussianPolicyOut, actions: np.ndarray) -> float:
    if actions.shape != out.means.shape:
        raise ValueError("actions shape must match policy output")
    return float(gaussian_log_prob_batch(out.means[None], out.log_vars[None],
                                         actions[None], out.valid_mask[None])[0])


def entropy(out: GaussianPolicyOut) -> float:
    return float(gaussian_entropy_batch(out.log_vars[None], out.valid_mask[None])[0])


def kl(old: GaussianPolicyOut, new: GaussianPolicyOut) -> float:
    if old.means.shape != new.means.shape:
        raise ValueError("distributions must share shapes")
    return float(gaussian_kl_batch(old.means[None], old.log_vars[None],
                                   new.means[None], new.log_vars[None],
                                   old.valid_mask[None])[0])


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

def _rel_err(a, b):
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def grad_check(params: ParamSet, obs: ObservationBatch, g: AgentGraph,
               rng: Rng, tol: float = 1e-4, h: float = 1e-5):
    """Check the analytic backward pass of every tensor against central
    finite differences of a random linear readout of the network output.

    Returns {tensor name: max relative error}; raises AssertionError above
    ``tol``. Error metric: |a - n| / max(1, |a|, |n|) per coordinate.
    """
    if params.kind == "policy":
        out, cache = policy_fwd(obs, g, params)
        w_mean = rng.normal(size=out.means.shape) * out.valid_mask[:, None]
        w_lv = rng.normal(size=out.log_vars.shape) * out.valid_mask[:, None]

        def loss(ps):
            o, _ = policy_fwd(obs, g, ps)
            return float((w_mean * o.means).sum() + (w_lv * o.log_vars).sum())

        grads, _ = policy_backward(cache, w_mean, w_lv)
    else:
        _, cache = value_fwd(obs, g, params)

        def loss(ps):
            v, _ = value_fwd(obs, g, ps)
            return v

        grads, _ = value_backward(cache, 1.0)
    return finite_diff_report(params, grads, loss, tol=tol, h=h)


def finite_diff_report(params, grads, loss, tol: float = 1e-4, h: float = 1e-5):
    """Shared central-difference sweep over a flat parameter vector.

    ``params``/``grads`` must expose flatten/unflatten and tensors(); works for
    both the attentional ParamSet and the MLP baseline's parameter set.
    """
    flat = params.flatten()
    analytic = grads.flatten()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        bump = flat.copy()
        bump[i] = flat[i] + h
        hi = loss(params.unflatten(bump))
        bump[i] = flat[i] - h
        lo = loss(params.unflatten(bump))
        numeric[i] = (hi - lo) / (2.0 * h)
    report, i = {}, 0
    worst = 0.0
    for name, ref in params.tensors().items():
        err = _rel_err(analytic[i:i + ref.size], numeric[i:i + ref.size])
        report[name] = float(err.max()) if err.size else 0.0
        worst = max(worst, report[name])
        i += ref.size
    if worst > tol:
        bad = {k: v for k, v in report.items() if v > tol}
        raise AssertionError(f"gradient check failed above tol={tol}: {bad}")
    return report


# ---------------------------------------------------------------------------
# checkpoint (de)serialization
# ---------------------------------------------------------------------------

def params_to_dict(params: ParamSet) -> dict:
    return {
        "kind": params.kind,
        "hyper": {"n": params.n, "m": params.m, "heads": params.heads,
                  "num_classes": params.num_classes, "action_dim": params.action_dim,
                  "hidden": HIDDEN_UNITS},
        "tensors": {name: t.tolist() for name, t in params.tensors().items()},
    }


def params_from_dict(doc: dict) -> ParamSet:
    hyper = doc["hyper"]
    if hyper.get("hidden", HIDDEN_UNITS) != HIDDEN_UNITS:
        raise ValueError(f"unsupported hidden width {hyper.get('hidden')}")
    ref = init_params(Rng(0), n=hyper["n"], num_classes=hyper["num_classes"],
                      action_dim=hyper["action_dim"], kind=doc["kind"],
                      m=hyper["m"], heads=hyper["heads"])
    tensors = {}
    for name in TENSOR_NAMES:
        arr = np.asarray(doc["tensors"][name], dtype=np.float64)
        want = ref.tensors()[name].shape
        if arr.shape != want:
            raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, expected {want}")
        tensors[name] = arr
    flat = np.concatenate([tensors[name].ravel() for name in TENSOR_NAMES])
    return ref.unflatten(flat)


def save_params(params: ParamSet, path) -> None:
    with open(path, "w") as fh:
        json.dump(params_to_dict(params), fh)


def load_params(path) -> ParamSet:
    with open(path) as fh:
        return params_from_dict(json.load(fh))
