import json

import numpy as np
import pytest

from conftest import small_hierarchy
from core import NodeState, node_step
from schemas import NodeConfig, SnapshotFormatError
from snapshots import (
    SNAPSHOT_VERSION,
    load_hierarchy,
    load_node,
    load_snapshot,
    save_hierarchy,
    save_node,
)


def _node_with_history(steps=50) -> NodeState:
    node = NodeState(NodeConfig(K=3, spatial_dim=1, seed_patience=2), seed=21)
    for i in range(steps):
        node_step(node, [float(i % 2)])
    return node


def test_node_round_trip_is_lossless(tmp_path):
    node = _node_with_history()
    path = save_node(node, tmp_path / "node.json")
    restored = load_node(path)
    assert np.array_equal(restored.means, node.means)
    assert np.array_equal(restored.variances, node.variances)
    assert np.array_equal(restored.starvation, node.starvation)
    assert np.array_equal(restored.prev_belief, node.prev_belief)
    assert restored.config == node.config
    assert restored.init_counter == node.init_counter


def test_restored_node_continues_identically(tmp_path):
    # unseeded node stalled on a binary stream: continuation draws jitter from the rng
    node = NodeState(NodeConfig(K=4, spatial_dim=1, seed_patience=2), seed=5)
    for _ in range(3):
        node_step(node, [0.0])
    restored = load_node(save_node(node, tmp_path / "n.json"))
    for _ in range(30):
        assert np.array_equal(node_step(node, [0.0]), node_step(restored, [0.0]))
    assert np.array_equal(node.means, restored.means)


def test_hierarchy_round_trip(tmp_path):
    h = small_hierarchy(seed=2)
    save_hierarchy(h, tmp_path / "h.json", config_hash="f00")
    doc = load_snapshot(tmp_path / "h.json", kind="hierarchy")
    assert doc.config_hash == "f00"
    restored = load_hierarchy(tmp_path / "h.json")
    assert restored.node_count == h.node_count
    assert restored.window == h.window
    assert [n.seed for n in restored.nodes()] == [n.seed for n in h.nodes()]


def test_truncated_file(tmp_path):
    path = save_node(_node_with_history(), tmp_path / "node.json")
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(SnapshotFormatError):
        load_node(path)


def test_wrong_kind(tmp_path):
    path = save_node(_node_with_history(), tmp_path / "node.json")
    with pytest.raises(SnapshotFormatError, match="expected 'hierarchy'"):
        load_hierarchy(path)


@pytest.mark.parametrize(
    "patch",
    [{"version": SNAPSHOT_VERSION + 1}, {"format": "something-else"}, {"kind": "unknown"}],
)
def test_header_checks(tmp_path, patch):
    path = save_node(_node_with_history(), tmp_path / "node.json")
    doc = json.loads(path.read_text())
    doc.update(patch)
    path.write_text(json.dumps(doc))
    with pytest.raises(SnapshotFormatError):
        load_snapshot(path)


def test_shape_mismatch(tmp_path):
    path = save_node(_node_with_history(), tmp_path / "node.json")
    doc = json.loads(path.read_text())
    doc["node"]["means"] = doc["node"]["means"][:2]
    path.write_text(json.dumps(doc))
    with pytest.raises(SnapshotFormatError):
        load_node(path)


def test_missing_file(tmp_path):
    with pytest.raises(SnapshotFormatError):
        load_snapshot(tmp_path / "nope.json")
