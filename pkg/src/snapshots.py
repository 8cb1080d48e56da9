"""versioned JSON snapshots of nodes, hierarchies and classifier ensembles"""

from pathlib import Path
from typing import Literal
import json

import numpy as np
from pydantic import BaseModel, ValidationError
from loguru import logger

from core import NodeState
from hierarchy import Hierarchy, Layer
from schemas import EnsembleSpec, LayerSpec, NodeConfig, SnapshotFormatError

SNAPSHOT_FORMAT = "destin-snapshot"
SNAPSHOT_VERSION = 1


class _Snapshot(BaseModel):
    format: Literal["destin-snapshot"] = SNAPSHOT_FORMAT
    version: int = SNAPSHOT_VERSION
    config_hash: str | None = None
    seed: int | None = None


class NodeSnapshot(BaseModel):
    config: NodeConfig
    seed: int
    train_mode: bool
    means: list[list[float]]
    variances: list[list[float]]
    starvation: list[float]
    prev_belief: list[float]
    init_counter: int
    stall_counter: int
    # numpy bit generator state as JSON text; PCG64 state ints exceed 64 bits
    rng_state: str

    @classmethod
    def from_node(cls, node: NodeState) -> "NodeSnapshot":
        return cls(
            config=node.config,
            seed=node.seed,
            train_mode=node.train_mode,
            means=node.means.tolist(),
            variances=node.variances.tolist(),
            starvation=node.starvation.tolist(),
            prev_belief=np.asarray(node.prev_belief).tolist(),
            init_counter=node.init_counter,
            stall_counter=node.stall_counter,
            rng_state=json.dumps(node.rng.bit_generator.state),
        )

    def to_node(self) -> NodeState:
        node = NodeState(self.config, seed=self.seed, train_mode=self.train_mode)
        K, D = self.config.K, self.config.D
        means = np.asarray(self.means, dtype=np.float64)
        variances = np.asarray(self.variances, dtype=np.float64)
        if means.shape != (K, D) or variances.shape != (K, D):
            raise SnapshotFormatError(
                "snapshot", f"centroid matrices have shape {means.shape}, expected {(K, D)}"
            )
        if len(self.starvation) != K or len(self.prev_belief) != K:
            raise SnapshotFormatError("snapshot", f"trace or belief length differs from K={K}")
        node.means = means
        node.variances = variances
        node.starvation = np.asarray(self.starvation, dtype=np.float64)
        node.prev_belief = np.asarray(self.prev_belief, dtype=np.float64)
        node.init_counter = self.init_counter
        node.stall_counter = self.stall_counter
        node.rng.bit_generator.state = json.loads(self.rng_state)
        return node


class NodeFile(_Snapshot):
    kind: Literal["node"] = "node"
    node: NodeSnapshot


class HierarchyFile(_Snapshot):
    kind: Literal["hierarchy"] = "hierarchy"
    patch: tuple[int, int]
    layers: list[LayerSpec]
    nodes: list[list[NodeSnapshot]]

    @classmethod
    def from_hierarchy(
        cls, h: Hierarchy, config_hash: str | None = None, seed: int | None = None
    ) -> "HierarchyFile":
        return cls(
            config_hash=config_hash,
            seed=seed,
            patch=h.patch,
            layers=[layer.spec for layer in h.layers],
            nodes=[[NodeSnapshot.from_node(n) for n in layer.nodes] for layer in h.layers],
        )

    def to_hierarchy(self) -> Hierarchy:
        if len(self.layers) != len(self.nodes):
            raise SnapshotFormatError("snapshot", "layer specs and node lists differ in length")
        layers = []
        for spec, nodes in zip(self.layers, self.nodes):
            if len(nodes) != spec.grid[0] * spec.grid[1]:
                raise SnapshotFormatError(
                    "snapshot", f"layer {spec.grid} has {len(nodes)} nodes stored"
                )
            layers.append(Layer(spec=spec, nodes=[n.to_node() for n in nodes]))
        return Hierarchy(layers=layers, patch=tuple(self.patch))


class MemberWeights(BaseModel):
    weights: list[list[list[float]]]
    biases: list[list[float]]


class EnsembleFile(_Snapshot):
    kind: Literal["ensemble"] = "ensemble"
    spec: EnsembleSpec
    layer_sizes: list[int]
    members: list[MemberWeights]


SnapshotFile = NodeFile | HierarchyFile | EnsembleFile
_KINDS: dict[str, type[_Snapshot]] = {
    "node": NodeFile,
    "hierarchy": HierarchyFile,
    "ensemble": EnsembleFile,
}


def save_snapshot(doc: _Snapshot, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(doc.model_dump_json(), encoding="utf-8")
    tmp.replace(path)
    logger.debug(f"Saved {getattr(doc, 'kind', 'snapshot')} snapshot to {path}")
    return path


def load_snapshot(path: Path, kind: str | None = None) -> SnapshotFile:
    """parse any snapshot file; `kind` restricts what is accepted"""
    path = Path(path)
    if not path.exists():
        raise SnapshotFormatError("snapshot", f"file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise SnapshotFormatError("snapshot", f"{path} is not a readable snapshot ({e})") from e
    if not isinstance(raw, dict) or raw.get("format") != SNAPSHOT_FORMAT:
        raise SnapshotFormatError("snapshot", f"{path} is not a {SNAPSHOT_FORMAT} file")
    if raw.get("version") != SNAPSHOT_VERSION:
        raise SnapshotFormatError(
            "snapshot",
            f"{path} has version {raw.get('version')}, expected {SNAPSHOT_VERSION}",
        )
    found = raw.get("kind")
    if found not in _KINDS or (kind is not None and found != kind):
        raise SnapshotFormatError("snapshot", f"{path} holds kind '{found}', expected '{kind}'")
    try:
        return _KINDS[found].model_validate(raw)  # type: ignore[return-value]
    except ValidationError as e:
        raise SnapshotFormatError("snapshot", f"{path} failed validation: {e}") from e


def save_node(node: NodeState, path: Path) -> Path:
    return save_snapshot(NodeFile(node=NodeSnapshot.from_node(node)), path)


def load_node(path: Path) -> NodeState:
    return load_snapshot(path, kind="node").node.to_node()  # type: ignore[union-attr]


def save_hierarchy(
    h: Hierarchy, path: Path, config_hash: str | None = None, seed: int | None = None
) -> Path:
    return save_snapshot(HierarchyFile.from_hierarchy(h, config_hash, seed), path)


def load_hierarchy(path: Path) -> Hierarchy:
    return load_snapshot(path, kind="hierarchy").to_hierarchy()  # type: ignore[union-attr]
