import numpy as np
import pytest

from laifo.replay import (Episode, ExpertDataset, ExpertWindowSampler,
                          ReplayBuffer, load_dataset, save_dataset)


def _push_episode(buf, frames, done_last=True):
    buf.push(frames[0], action=None)
    for t in range(1, len(frames)):
        buf.push(frames[t], action=np.full(buf.act_shape, t, dtype=np.float32),
                 reward=float(t), done=(t == len(frames) - 1 and done_last))


def test_single_transition_roundtrip():
    buf = ReplayBuffer(capacity=4, obs_shape=(2,), act_shape=(1,))
    buf.push(np.array([1.0, 2.0]), action=None)
    buf.push(np.array([3.0, 4.0]), action=np.array([0.5]), reward=7.0, done=False)
    batch = buf.sample_stacked(1, d=1, rng=np.random.default_rng(0))
    assert np.allclose(batch.windows[0, 0], [1.0, 2.0])
    assert np.allclose(batch.next_windows[0, 0], [3.0, 4.0])
    assert batch.actions[0, 0] == pytest.approx(0.5)
    assert batch.rewards[0] == pytest.approx(7.0)


def test_ring_eviction_of_oldest():
    buf = ReplayBuffer(capacity=4, obs_shape=(1,), act_shape=(1,))
    _push_episode(buf, [np.array([float(i)]) for i in range(5)], done_last=False)
    # 5 pushes into capacity 4: frame 0 evicted
    stored = sorted(float(buf._obs[i, 0]) for i in range(4))
    assert stored == [1.0, 2.0, 3.0, 4.0]
    sources = buf._transition_sources()
    firsts = sorted(float(buf._obs[i, 0]) for i in sources)
    assert firsts == [1.0, 2.0, 3.0]


def test_degenerate_padding_single_transition_episode():
    buf = ReplayBuffer(capacity=8, obs_shape=(1,), act_shape=(1,))
    _push_episode(buf, [np.array([5.0]), np.array([6.0])])
    batch = buf.sample_stacked(3, d=3, rng=np.random.default_rng(1))
    assert np.allclose(batch.windows, 5.0)  # [x0, x0, x0]
    assert np.allclose(batch.next_windows[:, -1], 6.0)
    assert np.allclose(batch.next_windows[:, :-1], 5.0)


def test_d1_windows_are_plain_transitions():
    buf = ReplayBuffer(capacity=16, obs_shape=(1,), act_shape=(1,))
    _push_episode(buf, [np.array([float(i)]) for i in range(5)])
    batch = buf.sample_stacked(32, d=1, rng=np.random.default_rng(2))
    assert np.all(batch.next_windows[:, 0, 0] == batch.windows[:, 0, 0] + 1)


def test_successor_window_is_shift_by_one():
    buf = ReplayBuffer(capacity=64, obs_shape=(1,), act_shape=(1,))
    rng = np.random.default_rng(3)
    for n in (6, 3, 9):
        _push_episode(buf, [rng.standard_normal(1) for _ in range(n)])
    batch = buf.sample_stacked(200, d=4, rng=rng)
    # dropping the oldest frame of the window and appending x_{t+1}
    assert np.allclose(batch.next_windows[:, :-1], batch.windows[:, 1:])


def test_windows_never_cross_episode_boundaries():
    rng = np.random.default_rng(4)
    buf = ReplayBuffer(capacity=128, obs_shape=(1,), act_shape=(1,))
    # encode episode id in the observation, then scan sampled windows
    for ep in range(40):
        n = int(rng.integers(2, 9))
        frames = [np.array([float(ep)]) for _ in range(n)]
        _push_episode(buf, frames)
    batch = buf.sample_stacked(500, d=5, rng=rng)
    for w, nw in zip(batch.windows, batch.next_windows):
        assert len(np.unique(w)) == 1
        assert len(np.unique(nw)) == 1
        assert w[0, 0] == nw[0, 0]


def test_uniform_sampling_over_transitions():
    buf = ReplayBuffer(capacity=32, obs_shape=(1,), act_shape=(1,))
    _push_episode(buf, [np.array([float(i)]) for i in range(11)])  # 10 transitions
    assert buf.n_transitions() == 10
    rng = np.random.default_rng(5)
    batch = buf.sample_stacked(100_000, d=1, rng=rng)
    values, counts = np.unique(batch.windows[:, 0, 0], return_counts=True)
    freqs = counts / counts.sum()
    assert len(values) == 10
    assert np.all(np.abs(freqs - 0.1) <= 0.005)


def test_shape_mismatch_rejected():
    buf = ReplayBuffer(capacity=8, obs_shape=(2,), act_shape=(1,))
    with pytest.raises(ValueError, match="observation shape"):
        buf.push(np.zeros(3), action=None)
    buf.push(np.zeros(2), action=None)
    with pytest.raises(ValueError, match="action shape"):
        buf.push(np.zeros(2), action=np.zeros(2))


def test_empty_buffer_sampling_errors():
    buf = ReplayBuffer(capacity=8, obs_shape=(1,), act_shape=(1,))
    with pytest.raises(ValueError, match="transition"):
        buf.sample_stacked(1, d=2, rng=np.random.default_rng(0))


def _toy_dataset(with_actions=True, with_rewards=True, env="pointmass-v"):
    rng = np.random.default_rng(6)
    eps = []
    for n in (4, 7):
        eps.append(Episode(
            observations=rng.standard_normal((n, 2)).astype(np.float32),
            actions=rng.standard_normal((n - 1, 2)).astype(np.float32)
            if with_actions else None,
            rewards=rng.standard_normal(n - 1).astype(np.float32)
            if with_rewards else None,
        ))
    return ExpertDataset(env, (2,), (2,), eps)


def test_dataset_roundtrip_bit_exact(tmp_path):
    ds = _toy_dataset()
    path = tmp_path / "e.laifo"
    save_dataset(ds, path)
    again = tmp_path / "e2.laifo"
    save_dataset(load_dataset(path), again)
    assert path.read_bytes() == again.read_bytes()
    back = load_dataset(path)
    assert back.env_id == ds.env_id and back.count == ds.count
    for a, b in zip(back.episodes, ds.episodes):
        assert np.array_equal(a.observations, b.observations)
        assert np.array_equal(a.actions, b.actions)
        assert np.array_equal(a.rewards, b.rewards)


def test_dataset_header_count_mismatch(tmp_path):
    ds = _toy_dataset()
    path = tmp_path / "e.laifo"
    save_dataset(ds, path)
    raw = bytearray(path.read_bytes())
    # bump the declared episode count in the JSON header
    raw = raw.replace(b'"episodes": 2', b'"episodes": 3')
    bad = tmp_path / "bad.laifo"
    bad.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="episodes"):
        load_dataset(bad)


def test_dataset_truncated_payload(tmp_path):
    ds = _toy_dataset()
    path = tmp_path / "e.laifo"
    save_dataset(ds, path)
    raw = path.read_bytes()
    bad = tmp_path / "cut.laifo"
    bad.write_bytes(raw[:-5])
    with pytest.raises(ValueError, match="truncated"):
        load_dataset(bad)


def test_dataset_without_actions_flagged(tmp_path):
    ds = _toy_dataset(with_actions=False)
    path = tmp_path / "noact.laifo"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert not back.has_actions
    sampler = ExpertWindowSampler(back, d=2)
    with pytest.raises(ValueError, match="actions"):
        sampler.sample(4, np.random.default_rng(0), with_actions=True)


def test_expert_sampler_windows_match_agent_padding():
    ds = _toy_dataset()
    sampler = ExpertWindowSampler(ds, d=3)
    wins, acts, nxt = sampler.sample(64, np.random.default_rng(7), with_actions=True)
    assert wins.shape == (64, 3, 2) and acts.shape == (64, 2)
    assert np.allclose(nxt[:, :-1], wins[:, 1:])
