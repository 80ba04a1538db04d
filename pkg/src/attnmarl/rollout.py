"""Trajectory collection and generalized advantage estimation.

An environment exposes ``reset(rng) -> (ObservationBatch, AgentGraph)`` and
``step(actions) -> (obs, graph, reward, done)`` with one global scalar reward
per timestep. Agent counts may change freely between steps; every record
carries its own graph.
"""

from dataclasses import dataclass, field

import numpy as np

from .attn_net import gaussian_log_prob_batch
from .graph import AgentGraph, ObservationBatch
from .numerics import Rng


@dataclass
class StepRecord:
    """One timestep: the state the policy saw, what it did, what happened.

    ``actions`` holds the raw pre-clip samples; the frozen means/log_vars are
    the statistics of the policy that produced them, so log_prob_old is always
    recomputable bit-exactly.
    """

    obs: ObservationBatch
    graph: AgentGraph
    actions: np.ndarray       # (act_rows, d)
    reward: float
    log_prob_old: float
    value_old: float
    means_old: np.ndarray     # (act_rows, d)
    log_vars_old: np.ndarray  # (act_rows, d)
    done: bool

    @property
    def act_rows(self) -> int:
        return self.actions.shape[0]


@dataclass
class Trajectory:
    steps: list
    bootstrap_value: float = 0.0
    advantages: np.ndarray = field(default=None)
    returns: np.ndarray = field(default=None)

    @property
    def total_reward(self) -> float:
        return float(sum(s.reward for s in self.steps))

    def __len__(self):
        return len(self.steps)


def collect(env, model, horizon: int, rng: Rng) -> Trajectory:
    """Roll the policy through one episode of at most ``horizon`` steps.

    Actions are sampled from the per-agent Gaussians; frozen distribution
    statistics and the joint log-probability are stored per step. Values are
    filled afterwards in one batched critic pass.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    obs, g = env.reset(rng.split("reset"))
    act_rng = rng.split("actions")
    steps = []
    done = False
    d = model.action_dim
    for _ in range(horizon):
        k = model.n_act_rows(obs.n_valid)
        if k:
            means, log_vars = model.act_stats(obs, g)
            noise = act_rng.standard_normal((k, d))
            actions = means + np.exp(0.5 * log_vars) * noise
            logp = float(gaussian_log_prob_batch(
                means[None], log_vars[None], actions[None],
                np.ones((1, k), dtype=bool))[0])
        else:
            means = np.zeros((0, d))
            log_vars = np.zeros((0, d))
            actions = np.zeros((0, d))
            logp = 0.0
        next_obs, next_g, reward, done = env.step(actions)
        steps.append(StepRecord(obs=obs, graph=g, actions=actions,
                                reward=float(reward), log_prob_old=logp,
                                value_old=0.0, means_old=means,
                                log_vars_old=log_vars, done=bool(done)))
        obs, g = next_obs, next_g
        if done:
            break
    bootstrap = 0.0 if done else float(model.state_value(obs, g))
    traj = Trajectory(steps=steps, bootstrap_value=bootstrap)
    _fill_values(traj, model)
    return traj


def _fill_values(traj: Trajectory, model) -> None:
    """Populate value_old for every step with one padded critic batch."""
    live = [i for i, s in enumerate(traj.steps) if s.obs.n_valid > 0]
    for i, s in enumerate(traj.steps):
        if i not in set(live):
            s.value_old = float(model.state_value(s.obs, s.graph))
    if not live:
        return
    obs, cls, valid = stack_obs_graphs([traj.steps[i] for i in live])
    values, _ = model.value_batch(obs, cls, valid)
    for i, v in zip(live, values):
        traj.steps[i].value_old = float(v)


def stack_obs_graphs(steps, pad_size: int | None = None):
    """Stack per-step observations/graphs into padded dense arrays.

    Returns (obs: (B,P,n), cls: (B,P,P), valid: (B,P)). Pad rows are zero and
    carry no edges. Raises if a step exceeds ``pad_size``.
    """
    rows = [s.obs.obs.shape[0] for s in steps]
    P = max(rows, default=0) if pad_size is None else pad_size
    over = [r for r in rows if r > P]
    if over:
        raise ValueError(f"pad size {P} exceeded by a timestep with {max(over)} rows")
    n = steps[0].obs.obs.shape[1]
    B = len(steps)
    obs = np.zeros((B, P, n))
    cls = np.full((B, P, P), -1, dtype=np.int64)
    valid = np.zeros((B, P), dtype=bool)
    for b, s in enumerate(steps):
        r = s.obs.obs.shape[0]
        obs[b, :r] = s.obs.obs
        valid[b, :r] = s.obs.valid_mask
        nv = s.obs.n_valid
        cls[b, :nv, :nv] = s.graph.cls_matrix
    return obs, cls, valid


def compute_gae(rewards, values, bootstrap_value: float, gamma: float, lam: float):
    """Exponentially-weighted advantage estimates plus value targets.

    Backward recursion over TD residuals; ``bootstrap_value`` stands in for
    the value past the final step (zero when the episode actually ended).
    Returns (advantages, returns) with returns = advantages + values.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape or rewards.ndim != 1:
        raise ValueError("rewards and values must be equal-length vectors")
    if not (0.0 < gamma <= 1.0):
        raise ValueError("gamma must lie in (0, 1]")
    if not (0.0 <= lam <= 1.0):
        raise ValueError("lambda must lie in [0, 1]")
    T = rewards.size
    advantages = np.zeros(T)
    gae = 0.0
    next_value = float(bootstrap_value)
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        gae = delta + gamma * lam * gae
        advantages[t] = gae
        next_value = values[t]
    return advantages, advantages + values


def finish_trajectory(traj: Trajectory, gamma: float, lam: float) -> Trajectory:
    """Fill advantages/returns in place; bootstrap is zero iff the episode
    terminated on its own."""
    rewards = np.array([s.reward for s in traj.steps])
    values = np.array([s.value_old for s in traj.steps])
    bootstrap = 0.0 if (traj.steps and traj.steps[-1].done) else traj.bootstrap_value
    traj.advantages, traj.returns = compute_gae(rewards, values, bootstrap, gamma, lam)
    return traj


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    """Shift/scale a batch of advantages to zero mean and unit variance.

    A zero-variance batch passes through unscaled (there is no signal to
    normalize, and dividing by ~0 would manufacture one).
    """
    advantages = np.asarray(advantages, dtype=np.float64)
    if advantages.size < 2:
        raise ValueError("need at least 2 advantages to normalize")
    std = advantages.std()
    if std < 1e-12:
        return advantages.copy()
    return (advantages - advantages.mean()) / std
