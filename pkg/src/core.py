from dataclasses import dataclass, field
from typing import TypeAlias

import numpy as np
from numpy.typing import NDArray
from loguru import logger

from schemas import InputError, NodeConfig


# probability vector over a node's centroids
BeliefState: TypeAlias = NDArray[np.float64]


@dataclass
class Centroid:
    """copy of one centroid's statistics"""

    mean: NDArray[np.float64]
    variance: NDArray[np.float64]
    starvation: float


@dataclass(eq=False)
class NodeState:
    """
    Recurrent clustering node.

    Centroids are stored as (K, D) mean and variance matrices plus a length-K
    starvation trace, D = spatial_dim + K. A node is single-writer: never step
    the same node from two threads at once.
    """

    config: NodeConfig
    seed: int = 0
    train_mode: bool = True
    means: NDArray[np.float64] = field(init=False)
    variances: NDArray[np.float64] = field(init=False)
    starvation: NDArray[np.float64] = field(init=False)
    prev_belief: BeliefState = field(init=False)
    init_counter: int = field(init=False, default=0)
    stall_counter: int = field(init=False, default=0)
    rng: np.random.Generator = field(init=False, repr=False)
    sqrt_weights: NDArray[np.float64] | None = field(init=False, repr=False)

    def __post_init__(self):
        K, D = self.config.K, self.config.D
        self.means = np.zeros((K, D))
        self.variances = np.full((K, D), self.config.init_variance)
        self.starvation = np.ones(K)
        self.prev_belief = np.full(K, 1.0 / K)
        self.rng = np.random.default_rng(self.seed)
        self.sqrt_weights = (
            None
            if self.config.dim_weights is None
            else np.sqrt(np.asarray(self.config.dim_weights, dtype=np.float64))
        )

    @property
    def K(self) -> int:
        return self.config.K

    @property
    def D(self) -> int:
        return self.config.D

    @property
    def initialized(self) -> bool:
        return self.init_counter >= self.config.K

    @property
    def centroids(self) -> list[Centroid]:
        return [
            Centroid(self.means[c].copy(), self.variances[c].copy(), float(self.starvation[c]))
            for c in range(self.config.K)
        ]

    def step(self, spatial) -> BeliefState:
        return node_step(self, spatial)

    def reset(self) -> None:
        reset_node(self)

    def __str__(self):
        return (
            f"<NodeState K={self.config.K} D={self.config.D} "
            f"seeded={self.init_counter} train={self.train_mode}>"
        )


def _row_sums(a: NDArray[np.float64]) -> NDArray[np.float64]:
    # strict left-to-right order; np.sum regroups additions
    return np.add.accumulate(a, axis=1)[:, -1]


def augment_input(spatial, prev_belief, config: NodeConfig | None = None) -> NDArray[np.float64]:
    """spatial observation followed by the previous belief"""
    spatial = np.asarray(spatial, dtype=np.float64)
    prev_belief = np.asarray(prev_belief, dtype=np.float64)
    if config is not None:
        if spatial.shape != (config.spatial_dim,):
            raise InputError(
                "augment_input",
                f"spatial has shape {spatial.shape}, expected ({config.spatial_dim},)",
            )
        if prev_belief.shape != (config.K,):
            raise InputError(
                "augment_input",
                f"belief has shape {prev_belief.shape}, expected ({config.K},)",
            )
    return np.concatenate((spatial, prev_belief))


def select_winner(obs: NDArray[np.float64], node: NodeState) -> int:
    """argmin_c psi_c * ||(obs - mu_c) * sqrt(w)||, lowest index on ties"""
    diff = obs - node.means
    if node.sqrt_weights is not None:
        diff = diff * node.sqrt_weights
    dist = np.sqrt(_row_sums(diff * diff))
    return int(np.argmin(node.starvation * dist))


def update_centroid(node: NodeState, winner: int, obs: NDArray[np.float64]) -> Centroid:
    if not node.train_mode:
        raise InputError("update_centroid", "node is in inference mode")
    if not np.all(np.isfinite(obs)):
        raise InputError("update_centroid", "observation has non-finite entries")
    cfg = node.config
    mean = node.means[winner]
    if cfg.mean_update_mode == "convex":
        mean = cfg.alpha * mean + (1.0 - cfg.alpha) * obs
    else:
        mean = cfg.alpha * mean + (1.0 - cfg.alpha) * (obs - mean)

    var = node.variances[winner]
    sq = (obs - mean) ** 2
    if cfg.variance_update_mode == "literal":
        var = cfg.beta * var + (1.0 - cfg.beta) * np.abs(sq - var)
    else:
        var = cfg.beta * var + (1.0 - cfg.beta) * sq
    var = np.maximum(var, cfg.variance_floor)

    node.means[winner] = mean
    node.variances[winner] = var
    return Centroid(mean.copy(), var.copy(), float(node.starvation[winner]))


def update_starvation(node: NodeState, winner: int) -> NDArray[np.float64]:
    """psi_c <- gamma * psi_c + (1 - gamma) * [c == winner]"""
    if not node.train_mode:
        raise InputError("update_starvation", "node is in inference mode")
    gamma = node.config.gamma
    node.starvation *= gamma
    node.starvation[winner] += 1.0 - gamma
    return node.starvation


def compute_belief(obs: NDArray[np.float64], node: NodeState) -> BeliefState:
    """inverse variance-normalized squared distances, normalized to sum to 1"""
    diff = obs - node.means
    n = _row_sums(diff * diff / node.variances)
    n = np.maximum(n, node.config.belief_epsilon)
    inv = 1.0 / n
    return inv / np.add.accumulate(inv)[-1]


def _seed_centroid(node: NodeState, obs: NDArray[np.float64]) -> None:
    """
    First K distinct augmented observations become the means. After
    `seed_patience` duplicates in a row the current observation is used with
    uniform jitter so low-entropy streams still finish seeding.
    """
    cfg = node.config
    seeded = node.means[: node.init_counter]
    if any(np.array_equal(row, obs) for row in seeded):
        node.stall_counter += 1
        if node.stall_counter < cfg.seed_patience:
            return
        obs = obs + node.rng.uniform(-cfg.seed_jitter, cfg.seed_jitter, size=obs.shape)
        logger.debug(f"Seeding centroid {node.init_counter} with jitter after stall")
    c = node.init_counter
    node.means[c] = obs
    node.variances[c] = cfg.init_variance
    node.starvation[c] = 1.0
    node.init_counter += 1
    node.stall_counter = 0


def node_step(node: NodeState, spatial) -> BeliefState:
    cfg = node.config
    spatial = np.asarray(spatial, dtype=np.float64)
    if spatial.shape != (cfg.spatial_dim,):
        raise InputError(
            "node_step", f"spatial has shape {spatial.shape}, expected ({cfg.spatial_dim},)"
        )
    if not np.all(np.isfinite(spatial)):
        raise InputError("node_step", "spatial input has non-finite entries")
    obs = np.concatenate((spatial, node.prev_belief))

    if node.init_counter < cfg.K:
        if node.train_mode:
            _seed_centroid(node, obs)
        return node.prev_belief

    if node.train_mode:
        winner = select_winner(obs, node)
        update_centroid(node, winner, obs)
        update_starvation(node, winner)

    belief = compute_belief(obs, node)
    node.prev_belief = belief
    return belief


def reset_node(node: NodeState) -> None:
    node.prev_belief = np.full(node.config.K, 1.0 / node.config.K)


def belief_entropy(belief) -> float:
    b = np.asarray(belief, dtype=np.float64)
    b = b[b > 0]
    return float(-np.sum(b * np.log(b)))
