"""One-agent quadratic bandit: reward -a^2, one step per episode.

The analytic optimum is an action of exactly zero, which makes this the
standard smoke test for the whole PPO stack: if the machinery is wired
correctly the policy mean must collapse onto zero.
"""

import numpy as np

from .graph import AgentGraph, ObservationBatch


class QuadraticBanditEnv:
    obs_dim = 1
    action_dim = 1
    num_classes = 1
    horizon = 1
    action_low = -10.0
    action_high = 10.0

    def __init__(self):
        self._obs = ObservationBatch(obs=np.array([[1.0]]),
                                     valid_mask=np.array([True]))
        self._graph = AgentGraph(agent_ids=(0,), edges=((0, 0, 1),), num_classes=1)

    def reset(self, rng):
        return self._obs, self._graph

    def step(self, actions):
        a = float(np.clip(actions[0, 0], self.action_low, self.action_high))
        return self._obs, self._graph, -a * a, True
