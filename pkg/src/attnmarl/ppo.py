"""PPO with a clipped surrogate and an adaptive KL penalty, adapted to the
factorized multi-agent policy.

Every objective term is a per-timestep scalar statistic of the joint policy
(the likelihood ratio uses the joint log-probability, which factorizes over
agents), reduced across agents before averaging over timesteps. Timesteps with
different agent counts are batched by padding; pad rows are inert in every sum.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .attn_net import (gaussian_entropy_batch, gaussian_entropy_grads_batch,
                       gaussian_kl_batch, gaussian_kl_grads_batch,
                       gaussian_log_prob_batch, gaussian_log_prob_grads_batch)
from .numerics import AdamState, Rng, adam_init, adam_step
from .rollout import collect, finish_trajectory, normalize_advantages, stack_obs_graphs

BETA_MIN = 1e-6
BETA_MAX = 1e2


@dataclass(frozen=True)
class PpoConfig:
    """Training hyperparameters. The paper-period defaults it inherits from
    elsewhere are unstated, so everything here is a labeled convention."""

    clip_eps: float = 0.3
    c1: float = 0.5              # value-loss weight
    c2: float = 0.0              # entropy bonus weight
    beta0: float = 1.0           # initial adaptive-KL coefficient
    target_kl: float = 0.01
    epochs: int = 10
    minibatch: int = 64          # timesteps per gradient step
    rollouts_per_iter: int = 20
    lr: float = 3e-4
    gamma: float = 0.99
    lam: float = 0.95
    grad_clip: float = 0.5
    pad_size: int | None = None  # cap on concurrent agents when batching

    def __post_init__(self):
        if self.clip_eps <= 0.0 and self.beta0 <= 0.0:
            raise ValueError("need at least one trust-region mechanism: clip_eps or beta0")
        for name in ("c1", "c2", "beta0", "target_kl"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")
        if self.epochs < 1 or self.minibatch < 1 or self.rollouts_per_iter < 1:
            raise ValueError("epochs, minibatch and rollouts_per_iter must be >= 1")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must lie in (0, 1]")
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError("lambda must lie in [0, 1]")


@dataclass
class PaddedBatch:
    """Dense, mask-carrying stack of timesteps with varying agent counts."""

    obs: np.ndarray           # (B, P, n)
    cls: np.ndarray           # (B, P, P) class-1 indices, -1 = no edge
    valid: np.ndarray         # (B, P) live agent rows
    act_mask: np.ndarray      # (B, P) rows whose actions the policy chose
    actions: np.ndarray       # (B, P, d) zero beyond act rows
    means_old: np.ndarray     # (B, P, d) frozen policy statistics
    log_vars_old: np.ndarray  # (B, P, d)
    logp_old: np.ndarray      # (B,)
    advantages: np.ndarray    # (B,)
    returns: np.ndarray       # (B,)

    def __len__(self):
        return self.obs.shape[0]

    def take(self, idx) -> "PaddedBatch":
        return PaddedBatch(obs=self.obs[idx], cls=self.cls[idx], valid=self.valid[idx],
                           act_mask=self.act_mask[idx], actions=self.actions[idx],
                           means_old=self.means_old[idx],
                           log_vars_old=self.log_vars_old[idx],
                           logp_old=self.logp_old[idx],
                           advantages=self.advantages[idx], returns=self.returns[idx])


def pad_batch(steps, advantages, returns, model, pad_size: int | None = None) -> PaddedBatch:
    """Stack timesteps into one padded batch and freeze the old-policy
    statistics by recomputing them through the exact batched layout the
    optimizer will use.

    Recomputation matters: BLAS kernels are not bit-stable across matrix
    shapes, and the on-policy identity (every ratio exactly 1 at theta_old)
    only holds when old and new log-probabilities run through identical
    shapes. Row-slicing a batch is shape-stable, so minibatches inherit it.
    """
    steps = list(steps)
    if not steps:
        raise ValueError("pad_batch needs at least one timestep")
    if any(s.act_rows == 0 for s in steps):
        raise ValueError("agentless timesteps carry no gradient; filter them out first")
    obs, cls, valid = stack_obs_graphs(steps, pad_size)
    B, P, _ = obs.shape
    d = steps[0].actions.shape[1]
    act_mask = np.zeros((B, P), dtype=bool)
    actions = np.zeros((B, P, d))
    for b, s in enumerate(steps):
        act_mask[b, :s.act_rows] = True
        actions[b, :s.act_rows] = s.actions
    means_old, log_vars_old, _ = model.policy_batch(obs, cls, valid)
    means_old = means_old * act_mask[..., None]
    log_vars_old = log_vars_old * act_mask[..., None]
    logp_old = gaussian_log_prob_batch(means_old, log_vars_old, actions, act_mask)
    return PaddedBatch(obs=obs, cls=cls, valid=valid, act_mask=act_mask,
                       actions=actions, means_old=means_old,
                       log_vars_old=log_vars_old, logp_old=logp_old,
                       advantages=np.asarray(advantages, dtype=np.float64),
                       returns=np.asarray(returns, dtype=np.float64))


def clipped_surrogate(ratio: float, advantage: float, clip_eps: float) -> float:
    """min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)."""
    if ratio <= 0.0:
        raise ValueError("likelihood ratio must be positive")
    clipped = min(max(ratio, 1.0 - clip_eps), 1.0 + clip_eps)
    return min(ratio * advantage, clipped * advantage)


def update_beta(measured_kl: float, target_kl: float, beta: float) -> float:
    """Double/halve the KL penalty when the measured KL strays a factor of
    1.5 from target, clamped so it can never run away."""
    if beta < 0.0:
        raise ValueError("beta must be non-negative")
    if measured_kl > 1.5 * target_kl:
        beta = beta * 2.0
    elif measured_kl < target_kl / 1.5:
        beta = beta / 2.0
    return float(min(max(beta, BETA_MIN), BETA_MAX))


def ppo_loss(batch: PaddedBatch, model, config: PpoConfig, beta: float):
    """Evaluate the combined objective and its exact gradient on one batch.

    Returns (loss, flat gradient, stats dict). The loss is the negated
    per-timestep objective mean, so minimizing it improves the objective.
    """
    B = len(batch)
    means, log_vars, pcache = model.policy_batch(batch.obs, batch.cls, batch.valid)
    logp_new = gaussian_log_prob_batch(means, log_vars, batch.actions, batch.act_mask)
    ratio = np.exp(logp_new - batch.logp_old)
    adv = batch.advantages
    clipped = np.clip(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps)
    surr_unclipped = ratio * adv
    surr_clipped = clipped * adv
    surr = np.minimum(surr_unclipped, surr_clipped)
    ent = gaussian_entropy_batch(log_vars, batch.act_mask)
    klv = gaussian_kl_batch(batch.means_old, batch.log_vars_old, means, log_vars,
                            batch.act_mask)
    values, vcache = model.value_batch(batch.obs, batch.cls, batch.valid)
    verr = values - batch.returns
    vloss = verr * verr
    objective = surr - config.c1 * vloss + config.c2 * ent - beta * klv
    finite = np.isfinite(objective)
    if not finite.all():
        raise FloatingPointError(f"non-finite loss at timestep {int(np.argmin(finite))}")
    loss = -float(objective.mean())

    # backward: d loss / d objective_t = -1/B
    dobj = -1.0 / B
    use_unclipped = surr_unclipped <= surr_clipped
    dlogp = dobj * np.where(use_unclipped, surr_unclipped, 0.0)   # via dratio/dlogp = ratio
    gm, glv = gaussian_log_prob_grads_batch(means, log_vars, batch.actions, batch.act_mask)
    d_means = gm * dlogp[:, None, None]
    d_log_vars = glv * dlogp[:, None, None]
    if config.c2 != 0.0:
        d_log_vars += (dobj * config.c2) * gaussian_entropy_grads_batch(log_vars, batch.act_mask)
    if beta != 0.0:
        # objective has -beta*KL, so the minimized loss gets +beta*KL / B
        km, klv_g = gaussian_kl_grads_batch(batch.means_old, batch.log_vars_old,
                                            means, log_vars, batch.act_mask)
        d_means += (-dobj * beta) * km
        d_log_vars += (-dobj * beta) * klv_g
    policy_grads = model.policy_batch_bwd(pcache, d_means, d_log_vars)
    d_values = (-dobj) * config.c1 * 2.0 * verr
    value_grads = model.value_batch_bwd(vcache, d_values)
    grads = np.concatenate([policy_grads, value_grads])
    stats = {"surrogate": float(surr.mean()), "value_loss": float(vloss.mean()),
             "entropy": float(ent.mean()), "kl": float(klv.mean()),
             "mean_ratio": float(ratio.mean())}
    return loss, grads, stats


@dataclass
class IterationStats:
    """One row of training telemetry per PPO iteration."""

    mean_episode_reward: float
    surrogate: float
    value_loss: float
    entropy: float
    kl: float
    beta: float
    grad_norm: float
    n_timesteps: int


@dataclass
class TrainState:
    model: object
    adam: AdamState
    beta: float
    iteration: int = 0


def init_train_state(model, config: PpoConfig) -> TrainState:
    return TrainState(model=model, adam=adam_init(model.flat().size, lr=config.lr),
                      beta=config.beta0, iteration=0)


def train_iteration(env_factory, state: TrainState, config: PpoConfig, rng: Rng,
                    n_threads: int = 1):
    """One PPO iteration: collect rollouts, fit GAE targets, run minibatched
    Adam epochs, and adapt the KL penalty from the final measured KL.

    ``env_factory`` must build a fresh environment per call; rollouts run on
    independent env instances and labeled rng splits, so the result is
    bit-identical regardless of thread scheduling.
    """
    it_rng = rng.split(f"iter{state.iteration}")
    model = state.model

    def one_rollout(k: int):
        env = env_factory()
        return collect(env, model, env.horizon, it_rng.split(f"rollout{k}"))

    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            trajs = list(pool.map(one_rollout, range(config.rollouts_per_iter)))
    else:
        trajs = [one_rollout(k) for k in range(config.rollouts_per_iter)]

    for traj in trajs:
        finish_trajectory(traj, config.gamma, config.lam)
    steps = [s for traj in trajs for s in traj.steps]
    advantages = np.concatenate([t.advantages for t in trajs])
    returns = np.concatenate([t.returns for t in trajs])
    if advantages.size >= 2:
        advantages = normalize_advantages(advantages)
    mean_episode_reward = float(np.mean([t.total_reward for t in trajs]))

    keep = [i for i, s in enumerate(steps) if s.act_rows > 0]
    if not keep:
        stats = IterationStats(mean_episode_reward=mean_episode_reward, surrogate=0.0,
                               value_loss=0.0, entropy=0.0, kl=0.0, beta=state.beta,
                               grad_norm=0.0, n_timesteps=0)
        return replace(state, iteration=state.iteration + 1), stats
    batch = pad_batch([steps[i] for i in keep], advantages[keep], returns[keep],
                      model, config.pad_size)

    flat = model.flat()
    adam = state.adam
    opt_rng = it_rng.split("opt")
    B = len(batch)
    grad_norms = []
    last = {}
    for _ in range(config.epochs):
        order = opt_rng.permutation(B)
        for start in range(0, B, config.minibatch):
            idx = order[start:start + config.minibatch]
            sub = batch.take(idx)
            _, grads, last = ppo_loss(sub, model, config, state.beta)
            gnorm = float(np.linalg.norm(grads))
            grad_norms.append(gnorm)
            if config.grad_clip and gnorm > config.grad_clip:
                grads = grads * (config.grad_clip / gnorm)
            flat, adam = adam_step(flat, grads, adam)
            model = model.with_flat(flat)

    means, log_vars, _ = model.policy_batch(batch.obs, batch.cls, batch.valid)
    measured_kl = float(gaussian_kl_batch(batch.means_old, batch.log_vars_old,
                                          means, log_vars, batch.act_mask).mean())
    new_beta = update_beta(measured_kl, config.target_kl, state.beta)
    stats = IterationStats(mean_episode_reward=mean_episode_reward,
                           surrogate=last.get("surrogate", 0.0),
                           value_loss=last.get("value_loss", 0.0),
                           entropy=last.get("entropy", 0.0),
                           kl=measured_kl, beta=new_beta,
                           grad_norm=float(np.mean(grad_norms)) if grad_norms else 0.0,
                           n_timesteps=len(batch))
    new_state = TrainState(model=model, adam=adam, beta=new_beta,
                           iteration=state.iteration + 1)
    return new_state, stats
