import math

import numpy as np
import pandas as pd
import pytest

from schemas import ConfigError, MlpSpec, NodeConfig, SeqBenchSection
from sequence_bench import (
    SequenceTask,
    decay_slope,
    generate_task,
    present,
    run_benchmark,
    run_trial,
)
from core import NodeState

TRIAL_CLASSIFIER = MlpSpec(layer_sizes=[0, 16, 2], learning_rate=0.1, epochs=60)


def _tiny_section(**fields) -> SeqBenchSection:
    base = dict(
        L_values=[1, 3],
        K_values=[4],
        repetitions=2,
        n_train=150,
        n_test=60,
        classifier=MlpSpec(layer_sizes=[0, 8, 2], learning_rate=0.1, epochs=5),
    )
    base.update(fields)
    return SeqBenchSection(**base)


class TestTask:
    def test_distractor_inverts_first_element(self):
        assert SequenceTask.from_target([1]).distractor.tolist() == [0]
        assert SequenceTask.from_target([1, 0, 1]).distractor.tolist() == [0, 0, 1]

    def test_hamming_distance_is_one(self):
        for seed in range(50):
            task = generate_task(int(seed % 8) + 1, np.random.default_rng(seed))
            assert int(np.sum(task.target != task.distractor)) == 1
            assert task.target[0] != task.distractor[0]

    def test_zero_length(self):
        with pytest.raises(ConfigError):
            generate_task(0, np.random.default_rng(0))

    def test_seeded(self):
        a = generate_task(6, np.random.default_rng(4))
        b = generate_task(6, np.random.default_rng(4))
        assert a.target.tolist() == b.target.tolist()


class TestTrial:
    def test_present_resets_between_sequences(self):
        node = NodeState(NodeConfig(K=2, spatial_dim=1), seed=0)
        for seq in ([0, 1], [1, 0], [1, 1]):
            present(node, seq, train=True)
        node.train_mode = False
        assert np.array_equal(present(node, [1, 0], train=False), present(node, [1, 0], train=False))

    def test_last_element_visible(self):
        task = SequenceTask.from_target([1])
        acc = run_trial(
            task, NodeConfig(K=4, spatial_dim=1), 600, 300, np.random.default_rng(0), TRIAL_CLASSIFIER
        )
        assert acc >= 0.95

    def test_frozen_features(self):
        task = SequenceTask.from_target([0])
        acc = run_trial(
            task,
            NodeConfig(K=4, spatial_dim=1),
            600,
            300,
            np.random.default_rng(1),
            TRIAL_CLASSIFIER,
            train_features="frozen",
        )
        assert acc >= 0.95

    def test_label_shuffle_destroys_signal(self):
        task = SequenceTask.from_target([1, 0, 1])
        acc = run_trial(
            task,
            NodeConfig(K=4, spatial_dim=1),
            600,
            400,
            np.random.default_rng(2),
            TRIAL_CLASSIFIER,
            label_shuffle=True,
        )
        assert acc < 0.7

    def test_uninformative_beliefs_give_chance(self):
        # one training sequence never seeds K=4 centroids, so every belief stays uniform
        n_test = 1000
        acc = run_trial(
            SequenceTask.from_target([1, 1]),
            NodeConfig(K=4, spatial_dim=1),
            1,
            n_test,
            np.random.default_rng(5),
            MlpSpec(layer_sizes=[0, 16, 2], epochs=0),
        )
        assert abs(acc - 0.5) <= 3 * math.sqrt(0.25 / n_test)

    def test_requires_one_dimensional_node(self):
        with pytest.raises(ConfigError):
            run_trial(SequenceTask.from_target([1]), NodeConfig(K=2, spatial_dim=2), 10, 10)


class TestBenchmark:
    def test_grid_and_determinism(self):
        section = _tiny_section()
        a = run_benchmark(section, seed=3)
        b = run_benchmark(section, seed=3)
        assert list(a.runs.columns) == ["L", "K", "rep", "accuracy"]
        assert len(a.runs) == 4
        pd.testing.assert_frame_equal(a.runs, b.runs)
        pd.testing.assert_frame_equal(a.summary, b.summary)
        assert a.runs["accuracy"].between(0.0, 1.0).all()

    def test_single_repetition_has_zero_std(self):
        result = run_benchmark(_tiny_section(repetitions=1, L_values=[2]), seed=0)
        assert result.summary["std_accuracy"].tolist() == [0.0]
        assert result.summary["repetitions"].tolist() == [1]

    def test_jobs_do_not_change_results(self):
        section = _tiny_section()
        pd.testing.assert_frame_equal(
            run_benchmark(section, seed=8, jobs=1).runs, run_benchmark(section, seed=8, jobs=2).runs
        )


def test_decay_slope():
    L = np.arange(1, 9)
    summary = pd.DataFrame({"L": L, "K": 8, "mean_accuracy": 0.5 + 0.4 * np.exp(-0.5 * L)})
    assert decay_slope(summary, 8) == pytest.approx(-0.5)
    with pytest.raises(ConfigError):
        decay_slope(summary[summary["L"] == 1], 8)


@pytest.mark.slow
def test_accuracy_decays_with_length():
    section = SeqBenchSection()
    result = run_benchmark(section, seed=0, jobs=4)
    s = result.summary
    chance_floor = 0.5 - 3 * math.sqrt(0.25 / section.n_test)
    assert (s["mean_accuracy"] >= chance_floor).all()
    for K in (4, 8, 16, 32):
        rows = s[s["K"] == K].set_index("L")["mean_accuracy"]
        assert rows[1] >= 0.95
        assert rows[2] - rows[8] >= 0.10
        assert decay_slope(s, K) < 0
