from concurrent.futures import Executor, ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np
from numpy.typing import NDArray
from loguru import logger

from core import NodeState, node_step, reset_node
from schemas import ConfigError, InputError, LayerSpec, NodeDefaults
from utils import derive_seed


@dataclass
class ScanPlan:
    """window positions (top-left row, col) in movement order"""

    positions: list[tuple[int, int]]
    sample_interval: int
    window: tuple[int, int] = (16, 16)

    @property
    def sample_indices(self) -> list[int]:
        return list(range(0, len(self.positions), self.sample_interval))

    def __len__(self) -> int:
        return len(self.positions)


@dataclass(eq=False)
class Layer:
    spec: LayerSpec
    nodes: list[NodeState] = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.spec.centroids_per_node


@dataclass(eq=False)
class Hierarchy:
    """quad-tree lattice of nodes; nodes of a layer are stored row-major"""

    layers: list[Layer]
    patch: tuple[int, int]

    @property
    def window(self) -> tuple[int, int]:
        rows, cols = self.layers[0].spec.grid
        return (rows * self.patch[0], cols * self.patch[1])

    @property
    def node_count(self) -> int:
        return sum(len(layer.nodes) for layer in self.layers)

    @property
    def belief_width(self) -> int:
        """beliefs per movement, i.e. sum over layers of nodes x K"""
        return sum(len(layer.nodes) * layer.K for layer in self.layers)

    def nodes(self) -> Iterable[NodeState]:
        for layer in self.layers:
            yield from layer.nodes

    def set_train_mode(self, train: bool) -> None:
        for node in self.nodes():
            node.train_mode = train

    def reset(self) -> None:
        for node in self.nodes():
            reset_node(node)

    def __str__(self):
        shapes = ", ".join(f"{l.spec.grid[0]}x{l.spec.grid[1]}(K={l.K})" for l in self.layers)
        return f"<Hierarchy [{shapes}] patch={self.patch}>"


def build_hierarchy(
    specs: Sequence[LayerSpec],
    node_defaults: NodeDefaults | None = None,
    patch: tuple[int, int] = (4, 4),
    seed: int = 0,
) -> Hierarchy:
    """
    Parameters:
        - specs: layers bottom to top; each grid is the previous one halved, top is 1x1
        - node_defaults: shared node hyperparameters
        - patch: pixels seen by each bottom node
        - seed: master seed, each node gets its own child seed
    """
    if not specs:
        raise ConfigError("hierarchy.layers", "at least one layer is required")
    node_defaults = node_defaults or NodeDefaults()
    patch = (int(patch[0]), int(patch[1]))
    if patch[0] < 1 or patch[1] < 1:
        raise ConfigError("hierarchy.patch", f"patch must be positive, got {patch}")

    for li, (below, above) in enumerate(zip(specs, specs[1:])):
        expected = (below.grid[0] // 2, below.grid[1] // 2)
        if below.grid[0] % 2 or below.grid[1] % 2 or tuple(above.grid) != expected:
            raise ConfigError(
                "hierarchy.layers",
                f"layer {li + 1} grid {tuple(above.grid)} is not layer {li} grid "
                f"{tuple(below.grid)} halved",
            )
        if above.fan_in != 4:
            raise ConfigError(
                "hierarchy.layers", f"layer {li + 1} fan_in must be 4, got {above.fan_in}"
            )
    if tuple(specs[-1].grid) != (1, 1):
        raise ConfigError("hierarchy.layers", f"top layer must be 1x1, got {specs[-1].grid}")
    if specs[0].fan_in != patch[0] * patch[1]:
        raise ConfigError(
            "hierarchy.layers",
            f"layer 0 fan_in {specs[0].fan_in} must equal patch area {patch[0] * patch[1]}",
        )

    layers: list[Layer] = []
    spatial_dim = patch[0] * patch[1]
    for li, spec in enumerate(specs):
        if li > 0:
            spatial_dim = 4 * specs[li - 1].centroids_per_node
        cfg = node_defaults.node_config(K=spec.centroids_per_node, spatial_dim=spatial_dim)
        n_nodes = spec.grid[0] * spec.grid[1]
        nodes = [
            NodeState(cfg, seed=derive_seed(seed, "node", li, i)) for i in range(n_nodes)
        ]
        layers.append(Layer(spec=spec, nodes=nodes))

    h = Hierarchy(layers=layers, patch=patch)
    logger.info(f"Built {h} with {h.node_count} nodes")
    return h


def _step_layer(
    nodes: list[NodeState], inputs: list[NDArray[np.float64]], executor: Executor | None
) -> NDArray[np.float64]:
    if executor is None:
        beliefs = [node_step(node, x) for node, x in zip(nodes, inputs)]
    else:
        beliefs = list(executor.map(node_step, nodes, inputs))
    return np.stack(beliefs)


def _child_inputs(beliefs: NDArray[np.float64], grid: tuple[int, int]) -> list[NDArray[np.float64]]:
    """children of parent (r, c) concatenated in NW, NE, SW, SE order"""
    rows, cols = grid
    inputs = []
    for r in range(rows // 2):
        for c in range(cols // 2):
            nw = (2 * r) * cols + 2 * c
            sw = (2 * r + 1) * cols + 2 * c
            inputs.append(
                np.concatenate((beliefs[nw], beliefs[nw + 1], beliefs[sw], beliefs[sw + 1]))
            )
    return inputs


def hierarchy_step(
    h: Hierarchy, window_pixels, train: bool, executor: Executor | None = None
) -> list[NDArray[np.float64]]:
    """
    One movement, bottom-up. Returns one (nodes, K) belief matrix per layer.
    Nodes within a layer may run on `executor`; layers are a barrier.
    """
    window = np.asarray(window_pixels, dtype=np.float64)
    if window.shape != h.window:
        raise InputError("hierarchy_step", f"window has shape {window.shape}, expected {h.window}")
    ph, pw = h.patch
    rows, cols = h.layers[0].spec.grid
    patches = window.reshape(rows, ph, cols, pw).transpose(0, 2, 1, 3).reshape(rows * cols, ph * pw)
    inputs: list[NDArray[np.float64]] = list(patches)

    outputs: list[NDArray[np.float64]] = []
    for li, layer in enumerate(h.layers):
        if li > 0:
            inputs = _child_inputs(outputs[-1], h.layers[li - 1].spec.grid)
        for node in layer.nodes:
            node.train_mode = train
        outputs.append(_step_layer(layer.nodes, inputs, executor))
    return outputs


def make_scan_plan(
    image: tuple[int, int],
    window: tuple[int, int],
    stride: int = 1,
    sample_interval: int = 1,
    order: Literal["raster", "zigzag"] = "raster",
) -> ScanPlan:
    H, W = image
    wh, ww = window
    if wh > H or ww > W:
        raise ConfigError("scan.window", f"window {window} does not fit image {image}")
    if stride < 1:
        raise ConfigError("scan.stride", f"stride must be positive, got {stride}")
    if sample_interval < 1:
        raise ConfigError("scan.sample_interval", f"must be positive, got {sample_interval}")

    positions: list[tuple[int, int]] = []
    for i, r in enumerate(range(0, H - wh + 1, stride)):
        cols = list(range(0, W - ww + 1, stride))
        if order == "zigzag" and i % 2 == 1:
            cols.reverse()
        positions.extend((r, c) for c in cols)
    return ScanPlan(positions=positions, sample_interval=sample_interval, window=(wh, ww))


def feature_length(h: Hierarchy, plan: ScanPlan) -> int:
    return len(plan.sample_indices) * h.belief_width


def extract_features(
    h: Hierarchy, image, plan: ScanPlan, executor: Executor | None = None
) -> NDArray[np.float64]:
    """all nodes' beliefs at the sampled movements, in fixed node order; centroids untouched"""
    image = np.asarray(image, dtype=np.float64)
    if tuple(plan.window) != h.window:
        raise InputError("extract_features", f"plan window {plan.window} != hierarchy window {h.window}")
    wh, ww = h.window
    h.set_train_mode(False)
    h.reset()
    sampled = set(plan.sample_indices)
    chunks = []
    for t, (r, c) in enumerate(plan.positions):
        beliefs = hierarchy_step(h, image[r : r + wh, c : c + ww], train=False, executor=executor)
        if t in sampled:
            chunks.append(np.concatenate([b.ravel() for b in beliefs]))
    return np.concatenate(chunks)


def train_hierarchy(
    h: Hierarchy,
    images,
    plan: ScanPlan,
    passes: int = 1,
    seed: int = 0,
    executor: Executor | None = None,
) -> None:
    """online training; image order per pass comes from a seeded shuffle"""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ConfigError("train_hierarchy", "training set is empty")
    if images.max(initial=0.0) > 1.0:
        logger.warning("Training images exceed 1.0; pixels are expected in [0, 1]")
    wh, ww = h.window
    rng = np.random.default_rng(seed)
    for p in range(passes):
        order = rng.permutation(len(images))
        for n, idx in enumerate(order):
            h.reset()
            image = images[idx]
            for r, c in plan.positions:
                hierarchy_step(h, image[r : r + wh, c : c + ww], train=True, executor=executor)
            if (n + 1) % 100 == 0:
                logger.debug(f"Pass {p + 1}/{passes}: trained on {n + 1}/{len(order)} images")
        logger.info(f"Finished training pass {p + 1}/{passes} over {len(order)} images")


_worker_state: dict[str, object] = {}


def _init_worker(h: Hierarchy, plan: ScanPlan) -> None:
    _worker_state["h"] = h
    _worker_state["plan"] = plan


def _featurize_in_worker(image) -> NDArray[np.float64]:
    return extract_features(_worker_state["h"], image, _worker_state["plan"])  # type: ignore


def featurize_images(h: Hierarchy, images, plan: ScanPlan, jobs: int = 1) -> NDArray[np.float64]:
    """
    (N, feature_length) matrix. With jobs > 1 each worker process holds its own
    copy of the frozen hierarchy, so rows match the sequential result exactly.
    """
    images = np.asarray(images, dtype=np.float64)
    width = feature_length(h, plan)
    if len(images) == 0:
        return np.zeros((0, width))
    if jobs <= 1:
        return np.stack([extract_features(h, image, plan) for image in images])
    chunksize = max(1, len(images) // (jobs * 4))
    with ProcessPoolExecutor(
        max_workers=jobs, initializer=_init_worker, initargs=(h, plan)
    ) as pool:
        rows = list(pool.map(_featurize_in_worker, images, chunksize=chunksize))
    return np.stack(rows)
