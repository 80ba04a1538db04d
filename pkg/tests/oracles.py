"""Independent reference implementations shared by unit and acceptance tests.

Everything here is a direct per-agent loop transcription, deliberately kept
separate from the vectorized library code it checks.
"""

import math

import numpy as np

from attnmarl.graph import AgentGraph, ObservationBatch
from attnmarl.graph import neighbors as graph_neighbors


def attention_oracle(obs_rows, g, p):
    heads, n, m = p.wq.shape
    nv = g.n_agents
    out = np.zeros((nv, heads * m))
    for h in range(heads):
        for i in range(nv):
            neigh = graph_neighbors(g, i)
            es = []
            for (j, c) in neigh:
                q = obs_rows[i] @ p.wq[h]
                k = obs_rows[j] @ p.wk[h] + p.ak[h][c - 1]
                es.append(float(q @ k) / math.sqrt(m))
            es = np.array(es)
            al = np.exp(es - es.max())
            al = al / al.sum()
            acc = np.zeros(m)
            for (j, c), a in zip(neigh, al):
                acc += a * (obs_rows[j] @ p.wv[h] + p.av[h][c - 1])
            out[i, h * m:(h + 1) * m] = acc
    return out


def ln_oracle(v, gain, off, eps=1e-5):
    mu = v.mean()
    var = ((v - mu) ** 2).mean()
    return gain * (v - mu) / math.sqrt(var + eps) + off


def trunk_oracle(obs_rows, g, params):
    att = attention_oracle(obs_rows, g, params.attn)
    rows = []
    for i in range(att.shape[0]):
        z1 = np.maximum(att[i], 0.0)
        l1 = ln_oracle(z1, params.ln1_gain, params.ln1_offset)
        t = l1 @ params.trunk_w + params.trunk_b
        z2 = np.maximum(t, 0.0)
        rows.append(ln_oracle(z2, params.ln2_gain, params.ln2_offset))
    return np.array(rows)


def policy_oracle(obs_rows, g, params):
    from attnmarl.attn_net import LOG_VAR_MAX, LOG_VAR_MIN

    l2 = trunk_oracle(obs_rows, g, params)
    raw = l2 @ params.head_w + params.head_b
    d = params.action_dim
    return raw[:, :d], np.clip(raw[:, d:], LOG_VAR_MIN, LOG_VAR_MAX)


def value_oracle(obs_rows, g, params):
    l2 = trunk_oracle(obs_rows, g, params)
    pooled = l2.max(axis=0)
    return float(pooled @ params.head_w[:, 0] + params.head_b[0])


def gae_oracle(rewards, values, bootstrap, gamma, lam):
    T = len(rewards)
    vnext = np.append(values[1:], bootstrap)
    delta = rewards + gamma * vnext - values
    adv = np.zeros(T)
    for t in range(T):
        for l in range(T - t):
            adv[t] += (gamma * lam) ** l * delta[t + l]
    return adv


def random_graph(np_rng, nv, num_classes, edge_p=0.6):
    adj = np_rng.random((nv, nv)) < edge_p
    np.fill_diagonal(adj, True)
    cls = np_rng.integers(1, num_classes + 1, size=(nv, nv))
    edges = tuple((i, j, int(cls[i, j])) for i in range(nv) for j in range(nv)
                  if adj[i, j])
    return AgentGraph(agent_ids=tuple(range(nv)), edges=edges, num_classes=num_classes)


def random_instance(seed, nv=3, n=5, num_classes=3, heads=2, m=4, d=2,
                    kind="policy", pad=0, edge_p=0.6, nonzero_bias=True):
    from attnmarl.attn_net import init_params
    from attnmarl.numerics import Rng

    np_rng = np.random.default_rng(seed)
    g = random_graph(np_rng, nv, num_classes, edge_p)
    params = init_params(Rng(seed), n=n, num_classes=num_classes, action_dim=d,
                         kind=kind, m=m, heads=heads)
    if nonzero_bias:
        flat = params.flatten()
        params = params.unflatten(np_rng.normal(scale=0.3, size=flat.shape))
    rows = np_rng.normal(size=(nv, n))
    obs = ObservationBatch(obs=np.vstack([rows, np.zeros((pad, n))]),
                           valid_mask=np.array([True] * nv + [False] * pad))
    return obs, g, params, rows
