"""Policy/value model wrappers sharing one training-facing protocol.

Both architectures expose the same surface to the rollout collector and the
PPO loss: batched distribution/value forwards with hand-derived backwards over
one flat parameter vector (policy tensors first, value tensors second).
"""

import numpy as np

from . import attn_net, mlp_baseline
from .attn_net import ParamSet, init_params
from .graph import AgentGraph, ObservationBatch
from .mlp_baseline import MlpParams, init_mlp_params, pack_rows
from .numerics import Rng


class AttentionModel:
    """Cross-context attentional policy + value pair."""

    kind = "attentional"

    def __init__(self, policy: ParamSet, value: ParamSet):
        if policy.kind != "policy" or value.kind != "value":
            raise ValueError("AttentionModel needs (policy, value) parameter sets")
        self.policy = policy
        self.value = value

    @classmethod
    def init(cls, rng: Rng, n: int, num_classes: int, action_dim: int,
             m: int = 16, heads: int = 4):
        return cls(
            policy=init_params(rng.split("policy"), n=n, num_classes=num_classes,
                               action_dim=action_dim, kind="policy", m=m, heads=heads),
            value=init_params(rng.split("value"), n=n, num_classes=num_classes,
                              action_dim=action_dim, kind="value", m=m, heads=heads),
        )

    @property
    def action_dim(self):
        return self.policy.action_dim

    @property
    def obs_dim(self):
        return self.policy.n

    def n_act_rows(self, n_valid: int) -> int:
        return n_valid

    def flat(self) -> np.ndarray:
        return np.concatenate([self.policy.flatten(), self.value.flatten()])

    def with_flat(self, vec: np.ndarray) -> "AttentionModel":
        np_ = self.policy.n_params
        return AttentionModel(self.policy.unflatten(vec[:np_]),
                              self.value.unflatten(vec[np_:]))

    # -- single-timestep path used while stepping an environment ------------
    def act_stats(self, obs: ObservationBatch, g: AgentGraph):
        out, _ = attn_net.policy_fwd(obs, g, self.policy)
        nv = obs.n_valid
        return out.means[:nv], out.log_vars[:nv]

    def state_value(self, obs: ObservationBatch, g: AgentGraph) -> float:
        if obs.n_valid == 0:
            # no agents to pool over; the critic has no information here
            return 0.0
        v, _ = attn_net.value_fwd(obs, g, self.value)
        return v

    # -- padded-batch path used by the PPO loss -----------------------------
    def policy_batch(self, obs, cls, valid):
        return attn_net.policy_fwd_batch(obs, cls, valid, self.policy)

    def policy_batch_bwd(self, cache, d_means, d_log_vars):
        grads, _ = attn_net.policy_bwd_batch(cache, d_means, d_log_vars)
        return grads.flatten()

    def value_batch(self, obs, cls, valid):
        return attn_net.value_fwd_batch(obs, cls, valid, self.value)

    def value_batch_bwd(self, cache, d_values):
        grads, _ = attn_net.value_bwd_batch(cache, d_values)
        return grads.flatten()

    def checkpoint_dict(self) -> dict:
        return {"arch": self.kind,
                "policy": attn_net.params_to_dict(self.policy),
                "value": attn_net.params_to_dict(self.value)}


class MlpModel:
    """Fixed-capacity centralized MLP policy + value pair."""

    kind = "mlp"

    def __init__(self, policy: MlpParams, value: MlpParams):
        if policy.kind != "policy" or value.kind != "value":
            raise ValueError("MlpModel needs (policy, value) parameter sets")
        self.policy = policy
        self.value = value

    @classmethod
    def init(cls, rng: Rng, capacity: int, n: int, action_dim: int):
        return cls(
            policy=init_mlp_params(rng.split("policy"), capacity=capacity, n=n,
                                   action_dim=action_dim, kind="policy"),
            value=init_mlp_params(rng.split("value"), capacity=capacity, n=n,
                                  action_dim=action_dim, kind="value"),
        )

    @property
    def action_dim(self):
        return self.policy.action_dim

    @property
    def obs_dim(self):
        return self.policy.n

    @property
    def capacity(self):
        return self.policy.capacity

    def n_act_rows(self, n_valid: int) -> int:
        return min(n_valid, self.capacity)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.policy.flatten(), self.value.flatten()])

    def with_flat(self, vec: np.ndarray) -> "MlpModel":
        np_ = self.policy.n_params
        return MlpModel(self.policy.unflatten(vec[:np_]),
                        self.value.unflatten(vec[np_:]))

    def act_stats(self, obs: ObservationBatch, g: AgentGraph):
        packed = pack_rows(obs.obs[None], self.capacity)
        means, log_vars, _ = mlp_baseline.mlp_policy_fwd_batch(packed, self.policy)
        k = self.n_act_rows(obs.n_valid)
        return means[0, :k], log_vars[0, :k]

    def state_value(self, obs: ObservationBatch, g: AgentGraph) -> float:
        packed = pack_rows(obs.obs[None], self.capacity)
        v, _ = mlp_baseline.mlp_value_fwd_batch(packed, self.value)
        return float(v[0])

    def policy_batch(self, obs, cls, valid):
        B, P, _ = obs.shape
        packed = pack_rows(obs, self.capacity)
        means, log_vars, cache = mlp_baseline.mlp_policy_fwd_batch(packed, self.policy)
        cache["pad_rows"] = P
        # re-embed the N slots into the padded agent layout; slots beyond P
        # cannot correspond to live agents and are dropped
        d = self.action_dim
        out_m = np.zeros((B, P, d))
        out_lv = np.zeros((B, P, d))
        k = min(P, self.capacity)
        out_m[:, :k] = means[:, :k]
        out_lv[:, :k] = log_vars[:, :k]
        return out_m, out_lv, cache

    def policy_batch_bwd(self, cache, d_means, d_log_vars):
        B, P, d = d_means.shape
        N = self.capacity
        k = min(P, N)
        dm = np.zeros((B, N, d))
        dlv = np.zeros((B, N, d))
        dm[:, :k] = d_means[:, :k]
        dlv[:, :k] = d_log_vars[:, :k]
        grads, _ = mlp_baseline.mlp_policy_bwd_batch(cache, dm, dlv)
        return grads.flatten()

    def value_batch(self, obs, cls, valid):
        packed = pack_rows(obs, self.capacity)
        return mlp_baseline.mlp_value_fwd_batch(packed, self.value)

    def value_batch_bwd(self, cache, d_values):
        grads, _ = mlp_baseline.mlp_value_bwd_batch(cache, d_values)
        return grads.flatten()

    def checkpoint_dict(self) -> dict:
        return {"arch": self.kind,
                "policy": mlp_baseline.mlp_params_to_dict(self.policy),
                "value": mlp_baseline.mlp_params_to_dict(self.value)}


def model_from_checkpoint_dict(doc: dict):
    arch = doc.get("arch")
    if arch == "attentional":
        return AttentionModel(attn_net.params_from_dict(doc["policy"]),
                              attn_net.params_from_dict(doc["value"]))
    if arch == "mlp":
        return MlpModel(mlp_baseline.mlp_params_from_dict(doc["policy"]),
                        mlp_baseline.mlp_params_from_dict(doc["value"]))
    raise ValueError(f"unknown architecture kind {arch!r}")
