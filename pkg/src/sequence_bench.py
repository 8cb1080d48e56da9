from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Literal

import numpy as np
import pandas as pd
from numpy.typing import NDArray
from loguru import logger

from classifier import init_mlp, mlp_forward, mlp_train
from core import NodeState, node_step, reset_node
from reports import summarize_bench
from schemas import ConfigError, MlpSpec, NodeConfig, NodeDefaults, SeqBenchSection
from utils import derive_seed


@dataclass
class SequenceTask:
    """target sequence and its distractor, which differs only in element 0"""

    target: NDArray[np.int64]
    distractor: NDArray[np.int64]
    presentation_prob: float = 0.5

    @property
    def length(self) -> int:
        return len(self.target)

    @classmethod
    def from_target(cls, target, presentation_prob: float = 0.5) -> "SequenceTask":
        target = np.asarray(target, dtype=np.int64)
        if target.ndim != 1 or len(target) < 1:
            raise ConfigError("seqbench.L_values", "sequence length must be at least 1")
        distractor = target.copy()
        distractor[0] = 1 - distractor[0]
        return cls(target=target, distractor=distractor, presentation_prob=presentation_prob)


@dataclass
class BenchResult:
    runs: pd.DataFrame
    summary: pd.DataFrame


def _as_rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def generate_task(L: int, rng=None, presentation_prob: float = 0.5) -> SequenceTask:
    if L < 1:
        raise ConfigError("seqbench.L_values", f"sequence length must be at least 1, got {L}")
    target = _as_rng(rng).integers(0, 2, size=L)
    return SequenceTask.from_target(target, presentation_prob)


def present(node: NodeState, sequence, train: bool) -> NDArray[np.float64]:
    """feed one presentation from a reset belief; returns the final belief"""
    reset_node(node)
    node.train_mode = train
    belief = node.prev_belief
    for symbol in sequence:
        belief = node_step(node, [float(symbol)])
    return np.array(belief, copy=True)


def run_trial(
    task: SequenceTask,
    node_cfg: NodeConfig,
    n_train: int,
    n_test: int,
    rng=None,
    classifier: MlpSpec | None = None,
    train_features: Literal["online", "frozen"] = "online",
    label_shuffle: bool = False,
) -> float:
    """
    Parameters:
        - task: target/distractor pair; label 1 means the target was shown
        - node_cfg: clustering node with spatial_dim=1
        - train_features: "online" records beliefs while the node trains,
          "frozen" re-presents the training sequences after training
        - label_shuffle: permute training labels against features (control)
    Returns:
        test accuracy of the classifier on n_test fresh frozen presentations
    """
    if node_cfg.spatial_dim != 1:
        raise ConfigError("run_trial", f"node spatial_dim must be 1, got {node_cfg.spatial_dim}")
    rng = _as_rng(rng)
    classifier = classifier or MlpSpec(layer_sizes=[0, 16, 2], learning_rate=0.1)
    node = NodeState(node_cfg, seed=int(rng.integers(2**32)))

    def _sequences(labels):
        return [task.target if lab else task.distractor for lab in labels]

    y_train = (rng.random(n_train) < task.presentation_prob).astype(np.int64)
    train_seqs = _sequences(y_train)
    X_train = np.stack([present(node, s, train=True) for s in train_seqs])
    if train_features == "frozen":
        X_train = np.stack([present(node, s, train=False) for s in train_seqs])

    y_test = (rng.random(n_test) < task.presentation_prob).astype(np.int64)
    X_test = np.stack([present(node, s, train=False) for s in _sequences(y_test)])

    if label_shuffle:
        y_train = rng.permutation(y_train)

    sizes = [node_cfg.K] + list(classifier.layer_sizes[1:-1]) + [2]
    model = init_mlp(sizes, seed=int(rng.integers(2**32)))
    spec = classifier.model_copy(update={"seed": int(rng.integers(2**32))})
    mlp_train(model, X_train, y_train, spec)
    pred = np.argmax(mlp_forward(model, X_test), axis=1)
    return float(np.mean(pred == y_test))


def _run_cell(args: tuple[int, int, int, int, NodeDefaults, SeqBenchSection]) -> dict:
    L, K, rep, seed, node_defaults, section = args
    rng = np.random.default_rng(seed)
    task = generate_task(L, rng, section.presentation_prob)
    acc = run_trial(
        task,
        node_defaults.node_config(K=K, spatial_dim=1),
        section.n_train,
        section.n_test,
        rng,
        classifier=section.classifier,
        train_features=section.train_features,
        label_shuffle=section.label_shuffle,
    )
    return {"L": L, "K": K, "rep": rep, "accuracy": acc}


def run_benchmark(
    section: SeqBenchSection,
    seed: int = 0,
    node_defaults: NodeDefaults | None = None,
    jobs: int = 1,
) -> BenchResult:
    """full (L, K, rep) grid; each cell seeded from (seed, L, K, rep) so order and jobs don't matter"""
    node_defaults = node_defaults or NodeDefaults()
    cells = [
        (L, K, rep, derive_seed(seed, "seqbench", L, K, rep), node_defaults, section)
        for L in section.L_values
        for K in section.K_values
        for rep in range(section.repetitions)
    ]
    logger.info(f"Running {len(cells)} sequence-benchmark cells with {jobs} job(s)")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell, cells))
    else:
        rows = [_run_cell(cell) for cell in cells]
    runs = pd.DataFrame(rows, columns=["L", "K", "rep", "accuracy"])
    runs = runs.sort_values(["L", "K", "rep"], kind="stable").reset_index(drop=True)
    return BenchResult(runs=runs, summary=summarize_bench(runs))


def decay_slope(summary: pd.DataFrame, K: int, floor: float = 1e-6) -> float:
    """least-squares slope of log(mean_accuracy - 0.5) against L for one K"""
    rows = summary[summary["K"] == K].sort_values("L")
    if len(rows) < 2:
        raise ConfigError("decay_slope", f"need at least two L values for K={K}")
    excess = np.clip(rows["mean_accuracy"].to_numpy() - 0.5, floor, None)
    slope, _ = np.polyfit(rows["L"].to_numpy(dtype=np.float64), np.log(excess), 1)
    return float(slope)
