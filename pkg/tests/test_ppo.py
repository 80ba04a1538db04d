import numpy as np
import pytest

from attnmarl.bandit import QuadraticBanditEnv
from attnmarl.graph import AgentGraph, ObservationBatch, complete_graph
from attnmarl.models import AttentionModel, MlpModel
from attnmarl.numerics import Rng
from attnmarl.ppo import (PpoConfig, clipped_surrogate, init_train_state,
                          pad_batch, ppo_loss, train_iteration, update_beta)
from attnmarl.rollout import collect, finish_trajectory


from support_env import MultiAgentQuadraticEnv


def small_model(seed=0, n=2, num_classes=2):
    return AttentionModel.init(Rng(seed), n=n, num_classes=num_classes,
                               action_dim=1, m=4, heads=1)


def batch_from_env(model, env, n_rollouts=2, seed=0, config=None):
    config = config or PpoConfig()
    root = Rng(seed)
    trajs = [collect(env, model, env.horizon, root.split(f"r{k}"))
             for k in range(n_rollouts)]
    for t in trajs:
        finish_trajectory(t, config.gamma, config.lam)
    steps = [s for t in trajs for s in t.steps]
    adv = np.concatenate([t.advantages for t in trajs])
    ret = np.concatenate([t.returns for t in trajs])
    return pad_batch(steps, adv, ret, model)


class TestClippedSurrogate:
    def test_on_policy_point(self):
        assert clipped_surrogate(1.0, 2.0, 0.2) == 2.0

    def test_clipped_above(self):
        assert abs(clipped_surrogate(2.0, 1.0, 0.2) - 1.2) < 1e-15

    def test_negative_advantage_takes_min(self):
        assert abs(clipped_surrogate(0.5, -1.0, 0.2) - (-0.8)) < 1e-15

    def test_inactive_inside_band(self):
        for ratio in (0.85, 1.0, 1.15):
            assert clipped_surrogate(ratio, 3.0, 0.2) == ratio * 3.0

    def test_ratio_must_be_positive(self):
        with pytest.raises(ValueError):
            clipped_surrogate(0.0, 1.0, 0.2)


class TestUpdateBeta:
    def test_on_target_unchanged(self):
        assert update_beta(0.01, 0.01, 1.0) == 1.0

    def test_high_kl_doubles(self):
        assert update_beta(0.1, 0.01, 1.0) == 2.0

    def test_low_kl_halves(self):
        assert update_beta(0.001, 0.01, 1.0) == 0.5

    def test_upper_clamp(self):
        beta = 1.0
        for _ in range(20):
            beta = update_beta(1.0, 0.01, beta)
        assert beta == 1e2

    def test_lower_clamp(self):
        beta = 1.0
        for _ in range(40):
            beta = update_beta(0.0, 0.01, beta)
        assert beta == 1e-6


class TestPpoConfig:
    def test_needs_a_trust_region(self):
        with pytest.raises(ValueError):
            PpoConfig(clip_eps=0.0, beta0=0.0)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            PpoConfig(c1=-0.1)

    def test_gamma_range(self):
        with pytest.raises(ValueError):
            PpoConfig(gamma=0.0)


class TestPpoLoss:
    def test_on_policy_identity(self):
        model = small_model(1)
        env = MultiAgentQuadraticEnv()
        batch = batch_from_env(model, env, seed=3)
        config = PpoConfig()
        loss, grads, stats = ppo_loss(batch, model, config, beta=1.0)
        assert stats["mean_ratio"] == 1.0
        assert stats["kl"] == 0.0
        assert abs(stats["surrogate"] - batch.advantages.mean()) < 1e-12

    def test_clip_kills_surrogate_gradient(self):
        model = small_model(2)
        env = MultiAgentQuadraticEnv()
        batch = batch_from_env(model, env, seed=4)
        # force every ratio above 1+eps with positive advantages
        batch.logp_old = batch.logp_old - 1.0
        batch.advantages = np.ones(len(batch))
        config = PpoConfig(c1=0.0, c2=0.0, clip_eps=0.2)
        loss, grads, stats = ppo_loss(batch, model, config, beta=0.0)
        assert np.all(grads[:model.policy.n_params] == 0.0)

    def test_nonfinite_loss_reports_timestep(self):
        model = small_model(3)
        env = MultiAgentQuadraticEnv()
        batch = batch_from_env(model, env, seed=5)
        batch.advantages = batch.advantages.copy()
        batch.advantages[2] = np.inf
        with pytest.raises(FloatingPointError, match="timestep 2"):
            ppo_loss(batch, model, PpoConfig(), beta=0.0)

    def test_full_gradient_matches_finite_differences(self):
        model = small_model(6)
        env = MultiAgentQuadraticEnv()
        config = PpoConfig(c1=0.5, c2=0.01, clip_eps=0.3)
        batch = batch_from_env(model, env, n_rollouts=2, seed=6, config=config)
        batch.advantages = np.random.default_rng(0).normal(size=len(batch))
        beta = 0.7
        _, grads, _ = ppo_loss(batch, model, config, beta)
        flat = model.flat()
        h = 1e-5
        rng = np.random.default_rng(1)
        probe = rng.choice(flat.size, size=250, replace=False)
        for i in probe:
            up = flat.copy(); up[i] += h
            dn = flat.copy(); dn[i] -= h
            hi, _, _ = ppo_loss(batch, model.with_flat(up), config, beta)
            lo, _, _ = ppo_loss(batch, model.with_flat(dn), config, beta)
            num = (hi - lo) / (2 * h)
            rel = abs(grads[i] - num) / max(1.0, abs(grads[i]), abs(num))
            assert rel < 1e-4, f"param {i}: analytic {grads[i]}, numeric {num}"

    def test_padding_neutrality(self):
        model = small_model(7)
        env = MultiAgentQuadraticEnv()
        config = PpoConfig()
        root = Rng(12)
        trajs = [collect(env, model, env.horizon, root.split(f"r{k}")) for k in range(2)]
        for t in trajs:
            finish_trajectory(t, config.gamma, config.lam)
        steps = [s for t in trajs for s in t.steps]
        adv = np.concatenate([t.advantages for t in trajs])
        ret = np.concatenate([t.returns for t in trajs])
        snug = pad_batch(steps, adv, ret, model)
        wide = pad_batch(steps, adv, ret, model, pad_size=env.k + 4)
        loss_snug, _, _ = ppo_loss(snug, model, config, beta=0.3)
        loss_wide, _, _ = ppo_loss(wide, model, config, beta=0.3)
        assert abs(loss_snug - loss_wide) < 1e-12
        # padded batch equals the mean of unpadded per-timestep evaluations
        per_step = []
        for i, s in enumerate(steps):
            one = pad_batch([s], adv[i:i + 1], ret[i:i + 1], model)
            l, _, _ = ppo_loss(one, model, config, beta=0.3)
            per_step.append(l)
        assert abs(loss_snug - np.mean(per_step)) < 1e-12

    def test_agentless_timestep_rejected(self):
        model = small_model(8)
        env = MultiAgentQuadraticEnv()
        traj = collect(env, model, env.horizon, Rng(0))
        step = traj.steps[0]
        step.actions = np.zeros((0, 1))
        step.means_old = np.zeros((0, 1))
        step.log_vars_old = np.zeros((0, 1))
        with pytest.raises(ValueError, match="agentless"):
            pad_batch([step], np.zeros(1), np.zeros(1), model)


class TestTrainIteration:
    def test_lr_zero_leaves_params(self):
        model = small_model(9, n=1, num_classes=1)
        config = PpoConfig(lr=0.0, rollouts_per_iter=4, epochs=2, minibatch=8)
        state = init_train_state(model, config)
        before = state.model.flat().copy()
        state2, stats = train_iteration(QuadraticBanditEnv, state, config, Rng(5))
        assert np.array_equal(state2.model.flat(), before)
        assert np.isfinite(stats.mean_episode_reward)
        assert stats.n_timesteps == 4

    def test_fixed_seed_bit_identical(self):
        def run():
            model = small_model(10, n=1, num_classes=1)
            config = PpoConfig(rollouts_per_iter=5, epochs=2, minibatch=4)
            state = init_train_state(model, config)
            rows = []
            for _ in range(2):
                state, stats = train_iteration(QuadraticBanditEnv, state, config, Rng(77))
                rows.append((stats.mean_episode_reward, stats.surrogate,
                             stats.value_loss, stats.kl, stats.beta, stats.grad_norm))
            return rows, state.model.flat()

        rows1, flat1 = run()
        rows2, flat2 = run()
        assert rows1 == rows2
        assert np.array_equal(flat1, flat2)

    def test_threaded_collection_matches_sequential(self):
        def run(n_threads):
            model = small_model(11, n=2, num_classes=2)
            config = PpoConfig(rollouts_per_iter=6, epochs=1, minibatch=16)
            state = init_train_state(model, config)
            state, stats = train_iteration(MultiAgentQuadraticEnv, state, config,
                                           Rng(9), n_threads=n_threads)
            return stats.mean_episode_reward, state.model.flat()

        r1, f1 = run(1)
        r2, f2 = run(2)
        assert r1 == r2
        assert np.array_equal(f1, f2)

    def test_bandit_median_reward_improves_over_50_iters(self):
        # median-of-5-seeds learning curve must improve over the first 50
        # iterations on the quadratic bandit
        config = PpoConfig(rollouts_per_iter=8, epochs=4, minibatch=16, lr=3e-3)
        curves = []
        for seed in range(5):
            model = small_model(100 + seed, n=1, num_classes=1)
            state = init_train_state(model, config)
            rng = Rng(seed).split("train")
            rewards = []
            for _ in range(50):
                state, stats = train_iteration(QuadraticBanditEnv, state, config, rng)
                rewards.append(stats.mean_episode_reward)
            curves.append(rewards)
        med = np.median(np.array(curves), axis=0)
        assert np.mean(med[-10:]) > np.mean(med[:10])
        assert med[-1] > med[0]

    def test_mlp_model_runs_same_machinery(self):
        model = MlpModel.init(Rng(13), capacity=3, n=2, action_dim=1)
        config = PpoConfig(rollouts_per_iter=4, epochs=2, minibatch=8)
        state = init_train_state(model, config)
        state2, stats = train_iteration(MultiAgentQuadraticEnv, state, config, Rng(1))
        assert stats.n_timesteps == 8
        assert not np.array_equal(state2.model.flat(), model.flat())
