import math

import numpy as np
import pytest

from attnmarl import attn_net
from attnmarl.attn_net import (GaussianPolicyOut, LOG_VAR_MAX, LOG_VAR_MIN,
                               attention_fwd, entropy, finite_diff_report,
                               grad_check, init_params, kl, log_prob,
                               param_count, params_from_dict, params_to_dict,
                               policy_backward, policy_fwd, sample_actions,
                               value_backward, value_fwd)
from attnmarl.graph import AgentGraph, ObservationBatch, complete_graph, neighbors
from attnmarl.numerics import Rng


# independent brute-force oracles live in oracles.py, shared with acceptance
from oracles import (attention_oracle, policy_oracle, random_instance,
                     value_oracle)


class TestAttentionForward:
    def test_single_agent_self_edge(self):
        obs, g, params, rows = random_instance(0, nv=1, num_classes=2)
        p = params.attn
        out, _ = attention_fwd(obs, g, p)
        c = neighbors(g, 0)[0][1]
        for h in range(p.wq.shape[0]):
            expect = rows[0] @ p.wv[h] + p.av[h][c - 1]
            assert np.max(np.abs(out[0, h * 4:(h + 1) * 4] - expect)) < 1e-12

    def test_zero_query_uniform_attention(self):
        obs, g, params, rows = random_instance(1, nv=4, num_classes=1, edge_p=1.0)
        p = params.attn
        attn = attn_net.AttnLayerParams(wq=np.zeros_like(p.wq), wk=p.wk, wv=p.wv,
                                        ak=np.zeros_like(p.ak), av=p.av)
        out, _ = attention_fwd(obs, g, attn)
        for h in range(attn.wq.shape[0]):
            mean_v = np.mean([rows[j] @ attn.wv[h] + attn.av[h][0] for j in range(4)], axis=0)
            for i in range(4):
                assert np.max(np.abs(out[i, h * 4:(h + 1) * 4] - mean_v)) < 1e-12

    def test_matches_loop_oracle(self):
        for seed in range(20):
            np_rng = np.random.default_rng(100 + seed)
            nv = int(np_rng.integers(1, 9))
            num_classes = int(np_rng.integers(1, 8))
            heads = int(np_rng.integers(1, 5))
            obs, g, params, rows = random_instance(100 + seed, nv=nv,
                                                   num_classes=num_classes, heads=heads)
            out, _ = attention_fwd(obs, g, params.attn)
            expect = attention_oracle(rows, g, params.attn)
            assert np.max(np.abs(out - expect)) < 1e-10

    def test_agent_without_edges_raises(self):
        g = AgentGraph.__new__(AgentGraph)  # bypass self-edge validation
        object.__setattr__(g, "agent_ids", (0, 1))
        object.__setattr__(g, "edges", ((0, 0, 1),))
        object.__setattr__(g, "num_classes", 1)
        mat = np.full((2, 2), -1, dtype=np.int64)
        mat[0, 0] = 0
        object.__setattr__(g, "cls_matrix", mat)
        obs = ObservationBatch(obs=np.ones((2, 3)), valid_mask=np.array([True, True]))
        params = init_params(Rng(0), n=3, num_classes=1, action_dim=1, kind="policy")
        with pytest.raises(ValueError, match="zero out-edges"):
            attention_fwd(obs, g, params.attn)

    def test_attention_rows_normalize(self):
        obs, g, params, _ = random_instance(7, nv=6, num_classes=4, heads=3)
        x, cls, valid = attn_net._instance_arrays(obs, g)
        _, cache = attn_net.attention_fwd_batch(x, cls, valid, params.attn)
        sums = cache["alpha"][0].sum(axis=-1)   # (H, P)
        assert np.max(np.abs(sums - 1.0)) < 1e-12


class TestPolicyValueForward:
    def test_policy_matches_oracle(self):
        for seed in range(10):
            obs, g, params, rows = random_instance(200 + seed, nv=4, num_classes=3)
            out, _ = policy_fwd(obs, g, params)
            mref, lvref = policy_oracle(rows, g, params)
            assert np.max(np.abs(out.means - mref)) < 1e-10
            assert np.max(np.abs(out.log_vars - lvref)) < 1e-10

    def test_value_matches_oracle(self):
        for seed in range(10):
            obs, g, params, rows = random_instance(300 + seed, nv=4, num_classes=3,
                                                   kind="value")
            v, _ = value_fwd(obs, g, params)
            assert abs(v - value_oracle(rows, g, params)) < 1e-10

    def test_identical_agents_identical_rows(self):
        np_rng = np.random.default_rng(5)
        row = np_rng.normal(size=5)
        obs = ObservationBatch(obs=np.vstack([row, row]),
                               valid_mask=np.array([True, True]))
        g = complete_graph(range(2))
        params = init_params(Rng(5), n=5, num_classes=1, action_dim=2, kind="policy")
        out, _ = policy_fwd(obs, g, params)
        assert np.max(np.abs(out.means[0] - out.means[1])) < 1e-12

    def test_single_agent_value_pool_is_identity(self):
        obs, g, params, rows = random_instance(6, nv=1, kind="value")
        v, cache = value_fwd(obs, g, params)
        assert np.array_equal(cache["pooled"][0], cache["l2"][0, 0])

    def test_value_rejects_no_valid_agents(self):
        params = init_params(Rng(1), n=3, num_classes=1, action_dim=1, kind="value")
        with pytest.raises(ValueError):
            attn_net.value_fwd_batch(np.zeros((1, 2, 3)),
                                     np.full((1, 2, 2), -1, dtype=np.int64),
                                     np.zeros((1, 2), dtype=bool), params)

    def test_kind_mismatch_rejected(self):
        obs, g, params, _ = random_instance(8, nv=2, kind="policy")
        with pytest.raises(ValueError):
            value_fwd(obs, g, params)

    def test_cache_replay_bit_exact(self):
        obs, g, params, _ = random_instance(9, nv=3)
        out1, cache1 = policy_fwd(obs, g, params)
        out2, cache2 = policy_fwd(obs, g, params)
        assert np.array_equal(out1.means, out2.means)
        assert np.array_equal(cache1["l2"], cache2["l2"])


class TestSymmetries:
    def permute_instance(self, rows, g, perm):
        inv = {old: new for new, old in enumerate(perm)}
        edges = tuple((inv[i], inv[j], c) for (i, j, c) in g.edges)
        g2 = AgentGraph(agent_ids=tuple(g.agent_ids[p] for p in perm), edges=edges,
                        num_classes=g.num_classes)
        return rows[perm], g2

    def test_policy_permutation_equivariance(self):
        for seed in range(5):
            obs, g, params, rows = random_instance(400 + seed, nv=5, num_classes=3)
            np_rng = np.random.default_rng(seed)
            perm = np_rng.permutation(5)
            rows2, g2 = self.permute_instance(rows, g, perm)
            obs2 = ObservationBatch(obs=rows2, valid_mask=np.ones(5, dtype=bool))
            out, _ = policy_fwd(obs, g, params)
            out2, _ = policy_fwd(obs2, g2, params)
            assert np.max(np.abs(out2.means - out.means[perm])) < 1e-12
            assert np.max(np.abs(out2.log_vars - out.log_vars[perm])) < 1e-12

    def test_value_permutation_invariance(self):
        for seed in range(5):
            obs, g, params, rows = random_instance(500 + seed, nv=5, num_classes=3,
                                                   kind="value")
            np_rng = np.random.default_rng(seed)
            perm = np_rng.permutation(5)
            rows2, g2 = self.permute_instance(rows, g, perm)
            obs2 = ObservationBatch(obs=rows2, valid_mask=np.ones(5, dtype=bool))
            v, _ = value_fwd(obs, g, params)
            v2, _ = value_fwd(obs2, g2, params)
            assert abs(v - v2) < 1e-12

    def test_padding_invariance_bit_exact(self):
        obs, g, params, rows = random_instance(600, nv=4, num_classes=3)
        padded = ObservationBatch(obs=np.vstack([rows, np.zeros((3, 5))]),
                                  valid_mask=np.array([True] * 4 + [False] * 3))
        out, _ = policy_fwd(obs, g, params)
        outp, _ = policy_fwd(padded, g, params)
        assert np.array_equal(out.means, outp.means[:4])
        assert np.array_equal(out.log_vars, outp.log_vars[:4])

    def test_padding_invariance_value(self):
        obs, g, params, rows = random_instance(601, nv=4, num_classes=3, kind="value")
        padded = ObservationBatch(obs=np.vstack([rows, np.zeros((2, 5))]),
                                  valid_mask=np.array([True] * 4 + [False] * 2))
        v, _ = value_fwd(obs, g, params)
        vp, _ = value_fwd(padded, g, params)
        assert v == vp

    def test_single_class_invariant_to_relabeling(self):
        # with C=1 every edge shares the same bias; relabeling classes in the
        # graph is impossible, so instead check C=2 with identical bias rows
        obs, g, params, rows = random_instance(602, nv=4, num_classes=2)
        attn = params.attn
        ak = attn.ak.copy(); ak[:, 1] = ak[:, 0]
        av = attn.av.copy(); av[:, 1] = av[:, 0]
        tied = attn_net.AttnLayerParams(wq=attn.wq, wk=attn.wk, wv=attn.wv, ak=ak, av=av)
        flipped_edges = tuple((i, j, 3 - c) for (i, j, c) in g.edges)
        g2 = AgentGraph(agent_ids=g.agent_ids, edges=flipped_edges, num_classes=2)
        out1, _ = attention_fwd(obs, g, tied)
        out2, _ = attention_fwd(obs, g2, tied)
        assert np.max(np.abs(out1 - out2)) < 1e-12


class TestLemmaFactorization:
    def test_joint_equals_sum_of_per_agent(self):
        for seed in range(20):
            obs, g, params, rows = random_instance(700 + seed, nv=4, num_classes=2)
            out, _ = policy_fwd(obs, g, params)
            np_rng = np.random.default_rng(seed)
            actions = np_rng.normal(size=out.means.shape)
            joint = log_prob(out, actions)
            total = 0.0
            for i in range(4):
                single = GaussianPolicyOut(means=out.means[i:i + 1],
                                           log_vars=out.log_vars[i:i + 1],
                                           valid_mask=np.array([True]))
                total += log_prob(single, actions[i:i + 1])
            assert abs(joint - total) < 1e-12

    def test_conditional_independence_bit_exact(self):
        hits = 0
        for seed in range(40):
            obs, g, params, rows = random_instance(800 + seed, nv=5, num_classes=3,
                                                   edge_p=0.4)
            absent = [(i, j) for i in range(5) for j in range(5)
                      if i != j and g.cls_matrix[i, j] < 0]
            if not absent:
                continue
            hits += 1
            i, j = absent[0]
            out, _ = policy_fwd(obs, g, params)
            rows2 = rows.copy()
            rows2[j] += 10.0
            obs2 = ObservationBatch(obs=rows2, valid_mask=np.ones(5, dtype=bool))
            out2, _ = policy_fwd(obs2, g, params)
            assert np.array_equal(out.means[i], out2.means[i])
            assert np.array_equal(out.log_vars[i], out2.log_vars[i])
        assert hits > 20


class TestDistributionStats:
    def single(self, mean, log_var):
        return GaussianPolicyOut(means=np.array([[mean]]), log_vars=np.array([[log_var]]),
                                 valid_mask=np.array([True]))

    def test_log_prob_closed_form(self):
        out = self.single(0.7, 0.0)
        got = log_prob(out, np.array([[0.7]]))
        assert abs(got - (-0.5 * math.log(2 * math.pi))) < 1e-12

    def test_log_prob_direct_formula(self):
        np_rng = np.random.default_rng(17)
        means = np_rng.normal(size=(3, 2))
        log_vars = np_rng.normal(size=(3, 2)).clip(-2, 1)
        actions = np_rng.normal(size=(3, 2))
        out = GaussianPolicyOut(means=means, log_vars=log_vars,
                                valid_mask=np.ones(3, dtype=bool))
        expect = 0.0
        for i in range(3):
            for k in range(2):
                var = math.exp(log_vars[i, k])
                expect += (-0.5 * math.log(2 * math.pi * var)
                           - (actions[i, k] - means[i, k]) ** 2 / (2 * var))
        assert abs(log_prob(out, actions) - expect) < 1e-12

    def test_entropy_closed_form(self):
        out = self.single(3.0, 0.0)
        assert abs(entropy(out) - 0.5 * (math.log(2 * math.pi) + 1)) < 1e-12

    def test_entropy_additive(self):
        means = np.zeros((2, 1))
        lv = np.full((2, 1), 0.3)
        out2 = GaussianPolicyOut(means=means, log_vars=lv, valid_mask=np.ones(2, dtype=bool))
        assert abs(entropy(out2) - 2 * entropy(self.single(0.0, 0.3))) < 1e-12

    def test_entropy_monte_carlo(self):
        np_rng = np.random.default_rng(23)
        out = self.single(1.3, -0.4)
        std = math.exp(-0.2)
        n = 200000
        x = np_rng.normal(1.3, std, size=n)
        logp = -0.5 * (math.log(2 * math.pi) + (-0.4) + (x - 1.3) ** 2 / std ** 2)
        est = -logp.mean()
        se = logp.std() / math.sqrt(n)
        assert abs(entropy(out) - est) < 3 * se

    def test_kl_zero_for_equal(self):
        out = self.single(0.3, -0.7)
        assert kl(out, out) == 0.0

    def test_kl_unit_variance_closed_form(self):
        a = self.single(1.0, 0.0)
        b = self.single(3.5, 0.0)
        assert abs(kl(a, b) - 0.5 * (3.5 - 1.0) ** 2) < 1e-12

    def test_kl_monte_carlo(self):
        np_rng = np.random.default_rng(29)
        old = self.single(0.2, 0.3)
        new = self.single(-0.5, -0.2)
        n = 300000
        x = np_rng.normal(0.2, math.exp(0.15), size=n)

        def logp(mu, lv):
            return -0.5 * (math.log(2 * math.pi) + lv + (x - mu) ** 2 * math.exp(-lv))

        diff = logp(0.2, 0.3) - logp(-0.5, -0.2)
        est, se = diff.mean(), diff.std() / math.sqrt(n)
        assert abs(kl(old, new) - est) < 3 * se

    def test_kl_nonnegative_random(self):
        np_rng = np.random.default_rng(31)
        for _ in range(50):
            a = self.single(np_rng.normal(), float(np.clip(np_rng.normal(), -3, 2)))
            b = self.single(np_rng.normal(), float(np.clip(np_rng.normal(), -3, 2)))
            assert kl(a, b) >= -1e-12

    def test_sample_actions_mean(self):
        means = np.array([[0.5, -1.0]])
        out = GaussianPolicyOut(means=means, log_vars=np.zeros((1, 2)),
                                valid_mask=np.array([True]))
        rng = Rng(77)
        n = 100000
        draws = np.array([sample_actions(out, rng) for _ in range(n)])
        se = 1.0 / math.sqrt(n)
        assert np.max(np.abs(draws.mean(axis=0) - means)) < 3 * se

    def test_sample_actions_pads_zero(self):
        out = GaussianPolicyOut(means=np.ones((3, 1)), log_vars=np.zeros((3, 1)),
                                valid_mask=np.array([True, True, False]))
        a = sample_actions(out, Rng(1))
        assert a[2, 0] == 0.0


class TestBackward:
    def test_zero_upstream_zero_grads(self):
        obs, g, params, _ = random_instance(900, nv=3)
        out, cache = policy_fwd(obs, g, params)
        grads, dobs = policy_backward(cache, np.zeros_like(out.means),
                                      np.zeros_like(out.log_vars))
        assert np.all(grads.flatten() == 0.0)
        assert np.all(dobs == 0.0)

    def test_value_path_gradient_localizes_to_wv(self):
        # identical rows + zero class biases make every attended value vector
        # equal, so the softmax jacobian vanishes and only the value path and
        # downstream layers receive gradient
        np_rng = np.random.default_rng(41)
        row = np_rng.normal(size=5)
        obs = ObservationBatch(obs=np.vstack([row, row, row]),
                               valid_mask=np.ones(3, dtype=bool))
        g = complete_graph(range(3))
        params = init_params(Rng(41), n=5, num_classes=1, action_dim=1, kind="policy")
        out, cache = policy_fwd(obs, g, params)
        grads, _ = policy_backward(cache, np.ones_like(out.means),
                                   np.ones_like(out.log_vars))
        # softmax rows sum to 1 only within roundoff, so the dead paths carry
        # O(1e-16) noise rather than exact zeros
        assert np.max(np.abs(grads.attn.wq)) < 1e-12
        assert np.max(np.abs(grads.attn.wk)) < 1e-12
        assert np.max(np.abs(grads.attn.ak)) < 1e-12
        assert np.max(np.abs(grads.attn.wv)) > 1e-3
        assert np.max(np.abs(grads.attn.av)) > 1e-3
        assert np.max(np.abs(grads.trunk_w)) > 1e-6

    def test_policy_gradients_match_finite_differences(self):
        obs, g, params, _ = random_instance(901, nv=3, n=4, num_classes=2,
                                            heads=2, m=4, d=1)
        report = grad_check(params, obs, g, Rng(901), tol=1e-4)
        assert max(report.values()) < 1e-4

    def test_value_gradients_match_finite_differences(self):
        obs, g, params, _ = random_instance(902, nv=3, n=4, num_classes=2,
                                            heads=2, m=4, d=1, kind="value")
        report = grad_check(params, obs, g, Rng(902), tol=1e-4)
        assert max(report.values()) < 1e-4

    def test_linear_head_path_is_exact(self):
        obs, g, params, _ = random_instance(903, nv=2, n=4, num_classes=1,
                                            heads=1, m=4, d=1)
        report = grad_check(params, obs, g, Rng(903), tol=1e-4)
        assert report["head_w"] < 1e-8
        assert report["head_b"] < 1e-8

    def test_corrupted_gradient_detected(self):
        obs, g, params, _ = random_instance(904, nv=2, n=4, num_classes=1,
                                            heads=1, m=4, d=1)
        out, cache = policy_fwd(obs, g, params)
        rng = Rng(904)
        w_mean = rng.normal(size=out.means.shape)
        w_lv = rng.normal(size=out.log_vars.shape)
        grads, _ = policy_backward(cache, w_mean, w_lv)
        bad = grads.flatten()
        bad[10] += 0.5
        corrupted = grads.unflatten(bad)

        def loss(ps):
            o, _ = policy_fwd(obs, g, ps)
            return float((w_mean * o.means).sum() + (w_lv * o.log_vars).sum())

        with pytest.raises(AssertionError, match="gradient check failed"):
            finite_diff_report(params, corrupted, loss, tol=1e-4)

    def test_obs_gradient_matches_finite_differences(self):
        obs, g, params, rows = random_instance(905, nv=3, n=4, num_classes=2,
                                               heads=2, m=4, d=1)
        out, cache = policy_fwd(obs, g, params)
        rng = Rng(905)
        w_mean = rng.normal(size=out.means.shape)
        w_lv = rng.normal(size=out.log_vars.shape)
        _, dobs = policy_backward(cache, w_mean, w_lv)
        h = 1e-5
        for i in range(3):
            for k in range(4):
                for sgn in (1,):
                    pass
                r2 = rows.copy(); r2[i, k] += h
                o_hi, _ = policy_fwd(ObservationBatch(obs=r2, valid_mask=obs.valid_mask), g, params)
                r2[i, k] -= 2 * h
                o_lo, _ = policy_fwd(ObservationBatch(obs=r2, valid_mask=obs.valid_mask), g, params)
                hi = (w_mean * o_hi.means).sum() + (w_lv * o_hi.log_vars).sum()
                lo = (w_mean * o_lo.means).sum() + (w_lv * o_lo.log_vars).sum()
                num = (hi - lo) / (2 * h)
                assert abs(dobs[i, k] - num) / max(1.0, abs(num)) < 1e-5


class TestParamPlumbing:
    def test_flatten_round_trip(self):
        params = init_params(Rng(3), n=5, num_classes=7, action_dim=1, kind="policy")
        flat = params.flatten()
        again = params.unflatten(flat)
        assert np.array_equal(again.flatten(), flat)

    def test_param_count_matches(self):
        for kind in ("policy", "value"):
            params = init_params(Rng(4), n=5, num_classes=3, action_dim=2, kind=kind)
            assert params.flatten().size == param_count(5, 16, 4, 3, 2, kind)

    def test_checkpoint_round_trip(self):
        params = init_params(Rng(5), n=4, num_classes=2, action_dim=1, kind="value")
        doc = params_to_dict(params)
        again = params_from_dict(doc)
        assert np.array_equal(params.flatten(), again.flatten())

    def test_checkpoint_shape_mismatch_rejected(self):
        params = init_params(Rng(6), n=4, num_classes=2, action_dim=1, kind="policy")
        doc = params_to_dict(params)
        doc["tensors"]["trunk_w"] = [[0.0]]
        with pytest.raises(ValueError, match="trunk_w"):
            params_from_dict(doc)

    def test_log_var_clamped_range(self):
        obs, g, params, _ = random_instance(57, nv=3)
        big = params.unflatten(params.flatten() * 50.0)
        out, _ = policy_fwd(obs, g, big)
        assert out.log_vars.max() <= LOG_VAR_MAX
        assert out.log_vars.min() >= LOG_VAR_MIN
