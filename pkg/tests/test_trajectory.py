import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from focalflow.errors import ConfigurationError, DimensionError, OrderingError, RangeError
from focalflow.trajectory import (
    DEMO_FORMAT, ActionChunk, Dataset, Demonstration, MacroTrajectory, Normalizer,
    Observation, concat_chunks, extract_macro, generate_expert, load_demos, min_jerk,
    observation_at, observation_features, save_demos, task_goal,
)

TASKS = ["lissajous", "reach", "pick-sketch"]


def test_single_chunk_is_identity():
    a = np.arange(8.0).reshape(4, 2)
    m = concat_chunks([ActionChunk(a, 0)])
    np.testing.assert_array_equal(m.actions, a)
    assert (m.chunk_size, m.num_chunks) == (4, 1)


def test_three_chunks_of_four_by_seven():
    chunks = [ActionChunk(np.full((4, 7), k), 4 * k) for k in range(3)]
    m = concat_chunks(chunks)
    assert m.actions.shape == (12, 7)
    assert (m.actions[4:8] == 1).all()


def test_concat_worked_example():
    m = concat_chunks([ActionChunk([[1.0], [2.0]], 0), ActionChunk([[3.0], [4.0]], 2)])
    np.testing.assert_array_equal(m.actions[:, 0], [1, 2, 3, 4])


def test_concat_errors():
    with pytest.raises(DimensionError):
        concat_chunks([ActionChunk(np.ones((2, 1)), 0), ActionChunk(np.ones((3, 1)), 2)])
    with pytest.raises(DimensionError):
        concat_chunks([ActionChunk(np.ones((2, 1)), 0), ActionChunk(np.ones((2, 2)), 2)])
    with pytest.raises(OrderingError):
        concat_chunks([ActionChunk(np.ones((2, 1)), 0), ActionChunk(np.ones((2, 1)), 3)])
    with pytest.raises(DimensionError):
        concat_chunks([])


def test_types_reject_bad_input():
    with pytest.raises(DimensionError):
        MacroTrajectory(np.ones((11, 2)), 4, 3)
    with pytest.raises(RangeError):
        ActionChunk([[np.nan]])
    with pytest.raises(RangeError):
        Observation([1.0, np.inf])


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 3), st.data())
def test_split_then_concat_is_identity(H, N, d, data):
    a = data.draw(arrays(np.float64, (H * N, d), elements=st.floats(-10, 10)))
    m = MacroTrajectory(a, H, N)
    back = concat_chunks(m.split(start_step=7))
    np.testing.assert_array_equal(back.actions, a)


def _demo(T=36, d=2, seed=0):
    rng = np.random.default_rng(seed)
    actions = rng.standard_normal((T, d))
    states = np.cumsum(np.vstack([np.zeros((1, d)), actions]), axis=0)
    return Demonstration(states, actions, "reach", context=np.array([0.5, -0.5]))


def test_extract_at_zero_clamps_history():
    demo = _demo()
    obs, macro = extract_macro(demo, 0, 4, 3, n_obs=2)
    np.testing.assert_array_equal(obs.values[:2], demo.states[0])
    np.testing.assert_array_equal(obs.values[2:4], demo.states[0])
    np.testing.assert_array_equal(obs.values[4:], demo.context)
    np.testing.assert_array_equal(macro.actions, demo.actions[:12])


def test_extract_valid_range():
    demo = _demo(T=36)
    extract_macro(demo, 24, 4, 3)
    with pytest.raises(RangeError, match="0..24"):
        extract_macro(demo, 25, 4, 3)
    with pytest.raises(RangeError):
        extract_macro(demo, -1, 4, 3)


def test_extracted_actions_reconstruct_states():
    demo = _demo()
    _, macro = extract_macro(demo, 5, 4, 3)
    rebuilt = demo.states[5] + np.cumsum(macro.actions, axis=0)
    np.testing.assert_allclose(rebuilt, demo.states[6:18], atol=1e-12)


def test_observation_newest_first():
    states = np.arange(10.0).reshape(5, 2)
    obs = observation_at(states, 3, n_obs=2)
    np.testing.assert_array_equal(obs.values, [6, 7, 4, 5])


def test_observation_features_are_invertible_differences():
    v = np.array([3.0, 4.0, 1.0, 1.0, 9.0])
    f = observation_features(v, n_obs=2, dim=2)
    np.testing.assert_array_equal(f, [3, 4, 2, 3, 9])
    batch = np.stack([v, v + 1])
    np.testing.assert_array_equal(observation_features(batch, 2, 2)[1], [4, 5, 2, 3, 10])


@pytest.mark.parametrize("task", TASKS)
def test_generation_is_deterministic(task):
    a = generate_expert(task, 3, 4, 60)
    b = generate_expert(task, 3, 4, 60)
    for x, y in zip(a, b):
        assert x.states.tobytes() == y.states.tobytes()
        assert x.actions.tobytes() == y.actions.tobytes()
    # a longer request extends the shorter one
    c = generate_expert(task, 3, 6, 60)
    assert c[3].actions.tobytes() == a[3].actions.tobytes()


@pytest.mark.parametrize("task", TASKS)
def test_incremental_recurrence_is_exact(task):
    for demo in generate_expert(task, 1, 3, 200):
        assert np.array_equal(demo.states[1:], demo.states[:-1] + demo.actions)


def test_task_dimensions():
    assert generate_expert("lissajous", 0, 1)[0].dim == 2
    assert generate_expert("reach", 0, 1)[0].dim == 2
    assert generate_expert("pick-sketch", 0, 1)[0].dim == 3


def test_reach_ends_at_goal_on_min_jerk_profile():
    for demo in generate_expert("reach", 0, 5, 200):
        goal = task_goal(demo)
        assert np.linalg.norm(demo.states[-1] - goal) < 1e-6
        # closed-form minimum-jerk polynomial
        s = np.arange(201) / 200
        blend = 10 * s ** 3 - 15 * s ** 4 + 6 * s ** 5
        expected = demo.states[0] + blend[:, None] * (goal - demo.states[0])
        np.testing.assert_allclose(demo.states, expected, atol=1e-12)


def test_min_jerk_endpoints():
    assert min_jerk(0.0) == 0.0 and min_jerk(1.0) == 1.0
    assert min_jerk(0.5) == pytest.approx(0.5)


def test_lissajous_actions_sum_to_zero():
    for demo in generate_expert("lissajous", 2, 5, 200):
        assert np.abs(demo.actions.sum(axis=0)).max() < 1e-6


def test_pick_sketch_has_pause_and_reaches_goal():
    for demo in generate_expert("pick-sketch", 0, 5, 200):
        still = np.all(demo.actions == 0.0, axis=1)
        assert 15 <= still.sum() <= 45
        np.testing.assert_allclose(demo.states[-1], task_goal(demo), atol=1e-9)


def test_generation_errors():
    with pytest.raises(ConfigurationError):
        generate_expert("juggle", 0, 1)
    assert generate_expert("reach", 0, 0) == []


def test_normalizer_round_trip(rng):
    x = rng.normal(3.0, 2.0, size=(50, 3))
    o = rng.normal(-1.0, 0.1, size=(50, 4))
    n = Normalizer.fit(x, o)
    np.testing.assert_allclose(n.denormalize_actions(n.normalize_actions(x)), x, atol=1e-12)
    np.testing.assert_allclose(n.denormalize_obs(n.normalize_obs(o)), o, atol=1e-12)
    back = Normalizer.from_dict(json.loads(json.dumps(n.to_dict())))
    np.testing.assert_array_equal(back.action_scale, n.action_scale)


def test_normalizer_handles_constant_columns():
    n = Normalizer.fit(np.ones((5, 2)), np.zeros((5, 1)))
    assert np.all(np.isfinite(n.normalize_actions(np.ones((1, 2)))))


@pytest.mark.parametrize("task", TASKS)
def test_dataset_windows_and_normalization(task):
    demos = generate_expert(task, 0, 10, 200)
    ds = Dataset(demos, 4, 3, 2)
    assert len(ds) == 10 * 189
    assert ds.macros.shape == (1890, 12, demos[0].dim)
    flat = ds.macros.reshape(-1, ds.action_dim)
    assert np.all(np.abs(flat.mean(axis=0)) <= 0.05)
    assert np.all((flat.std(axis=0) >= 0.8) & (flat.std(axis=0) <= 1.2))


def test_dataset_sampling_is_deterministic():
    ds = Dataset(generate_expert("reach", 0, 3, 50))
    a = ds.sample_batch(np.random.default_rng(1), 8)
    b = ds.sample_batch(np.random.default_rng(1), 8)
    np.testing.assert_array_equal(a[1], b[1])


def test_dataset_rejects_short_or_empty():
    with pytest.raises(ConfigurationError):
        Dataset([])
    with pytest.raises(RangeError):
        Dataset(generate_expert("reach", 0, 1, 10), 4, 3)


def test_demo_file_round_trip(tmp_path):
    demos = generate_expert("pick-sketch", 4, 3, 50)
    path = save_demos(demos, tmp_path / "d.jsonl")
    first = path.read_bytes()
    for line in path.read_text().splitlines():
        assert json.loads(line)["version"] == DEMO_FORMAT
    back = load_demos(path)
    for a, b in zip(demos, back):
        assert a.actions.tobytes() == b.actions.tobytes()
        assert a.states.tobytes() == b.states.tobytes()
        assert a.task_id == b.task_id and a.seed == b.seed
    save_demos(back, path)
    assert path.read_bytes() == first


def test_empty_demo_file_is_valid(tmp_path):
    path = save_demos([], tmp_path / "empty.jsonl")
    assert load_demos(path) == []


def test_bad_version_rejected(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps({"version": "other/9"}) + "\n")
    with pytest.raises(ConfigurationError):
        load_demos(p)
