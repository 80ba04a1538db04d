"""Time-varying agent sets and the directed, classed edge structure they attend over."""

from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng


@dataclass(frozen=True)
class AgentGraph:
    """Directed graph over the current agent set with classed edges.

    ``edges`` holds (i, j, cls) triples where i and j index into ``agent_ids``
    and cls is in {1..num_classes}. Edge (i, j) means agent i reads agent j's
    observation. Every agent carries a self-edge: it can always see itself.
    """

    agent_ids: tuple
    edges: tuple
    num_classes: int
    # dense (i, j) -> class-1 lookup, -1 where there is no edge
    cls_matrix: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.agent_ids)
        seen = set()
        mat = np.full((n, n), -1, dtype=np.int64)
        for (i, j, c) in self.edges:
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"edge ({i},{j}) out of range for {n} agents")
            if not (1 <= c <= self.num_classes):
                raise ValueError(f"edge class {c} outside 1..{self.num_classes}")
            if (i, j) in seen:
                raise ValueError(f"duplicate edge ({i},{j})")
            seen.add((i, j))
            mat[i, j] = c - 1
        for i in range(n):
            if (i, i) not in seen:
                raise ValueError(f"agent {i} is missing its self-edge")
        mat.setflags(write=False)
        object.__setattr__(self, "cls_matrix", mat)

    @property
    def n_agents(self) -> int:
        return len(self.agent_ids)


@dataclass(frozen=True)
class ObservationBatch:
    """Stacked per-agent observations with a validity mask for padding.

    Pad rows are all-zero and masked False; by contract they contribute to no
    attention sum and no loss term.
    """

    obs: np.ndarray          # (rows, n) float64
    valid_mask: np.ndarray   # (rows,) bool

    def __post_init__(self):
        obs = np.asarray(self.obs, dtype=np.float64)
        mask = np.asarray(self.valid_mask, dtype=bool)
        if obs.ndim != 2 or mask.shape != (obs.shape[0],):
            raise ValueError("ObservationBatch: obs must be (rows, n) with one mask bit per row")
        if obs[~mask].size and np.any(obs[~mask] != 0.0):
            raise ValueError("ObservationBatch: pad rows must be all-zero")
        object.__setattr__(self, "obs", obs)
        object.__setattr__(self, "valid_mask", mask)

    @property
    def n_valid(self) -> int:
        return int(self.valid_mask.sum())


def neighbors(g: AgentGraph, i: int):
    """Out-edges of agent i as a list of (j, cls), ascending in j."""
    if not (0 <= i < g.n_agents):
        raise IndexError(f"agent index {i} out of range for {g.n_agents} agents")
    row = g.cls_matrix[i]
    return [(int(j), int(row[j]) + 1) for j in np.nonzero(row >= 0)[0]]


def apply_edge_dropout(g: AgentGraph, rate: float, rng: Rng) -> AgentGraph:
    """Independently delete each non-self edge with probability ``rate``.

    Self-edges always survive; an agent never loses sight of itself. The
    result is deterministic for a given rng stream.
    """
    if not (0.0 <= rate <= 1.0):
        raise ValueError(f"dropout rate {rate} outside [0, 1]")
    if rate == 0.0:
        return g
    kept = []
    # fixed iteration order makes the draw sequence reproducible
    for (i, j, c) in sorted(g.edges):
        if i == j or rng.uniform() >= rate:
            kept.append((i, j, c))
    return AgentGraph(agent_ids=g.agent_ids, edges=tuple(kept), num_classes=g.num_classes)


def complete_graph(agent_ids, num_classes: int = 1, self_class: int = 1) -> AgentGraph:
    """All-to-all graph (including self-edges) with a single edge class."""
    n = len(agent_ids)
    edges = tuple((i, j, self_class) for i in range(n) for j in range(n))
    return AgentGraph(agent_ids=tuple(agent_ids), edges=edges, num_classes=num_classes)
