import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metadro.dataset import EmbeddingRecord, EmbeddingStore
from metadro.episodes import TaskSpec, sample_episode, sample_meta_batch
from metadro.errors import EpisodeError
from metadro.synth import SynthSpec, generate


def _uniform_store(classes=10, per_class=20, dim=3):
    return generate(SynthSpec(dim=dim, classes=classes, records_per_class=per_class, groups_per_class=2,
                              minority_fraction=0.3, seed=1))


def test_exhaustion_forces_disjoint():
    records = [EmbeddingRecord(f"{c}{i}", None, [i, 0.0], c) for c in "ab" for i in range(2)]
    store = EmbeddingStore(records)
    ep = sample_episode(store, TaskSpec(2, 1, 1), None, np.random.default_rng(0))
    assert set(ep.support_ids).isdisjoint(ep.query_ids)
    assert sorted(ep.support_ids + ep.query_ids) == sorted(store.ids)


def test_same_seed_same_episode():
    store = _uniform_store()
    a = sample_episode(store, TaskSpec(5, 3, 2), None, np.random.default_rng(42))
    b = sample_episode(store, TaskSpec(5, 3, 2), None, np.random.default_rng(42))
    assert a == b
    assert a != sample_episode(store, TaskSpec(5, 3, 2), None, np.random.default_rng(43))


def test_too_few_classes():
    with pytest.raises(EpisodeError, match="10-way"):
        sample_episode(_uniform_store(classes=5), TaskSpec(10, 5, 1), None, np.random.default_rng(0))


def test_deficient_class_named():
    records = [EmbeddingRecord(f"a{i}", None, [i], "a") for i in range(6)]
    records += [EmbeddingRecord(f"b{i}", None, [i], "b") for i in range(3)]
    with pytest.raises(EpisodeError, match="'b'"):
        sample_episode(EmbeddingStore(records), TaskSpec(2, 3, 1), None, np.random.default_rng(0))


def test_unknown_pool_class():
    with pytest.raises(EpisodeError, match="'zz'"):
        sample_episode(_uniform_store(), TaskSpec(2, 1, 1), ["c0", "zz"], np.random.default_rng(0))


@pytest.mark.parametrize("kw", [dict(n_way=1, k_shot=1), dict(n_way=2, k_shot=0), dict(n_way=2, k_shot=1, q_query=0)])
def test_task_spec_validation(kw):
    with pytest.raises(ValueError):
        TaskSpec(**kw)


def test_shapes_and_layout():
    store = _uniform_store(dim=4)
    ep = sample_episode(store, TaskSpec(4, 3, 2), None, np.random.default_rng(5))
    assert ep.support_x.shape == (12, 4) and ep.query_x.shape == (8, 4)
    assert ep.support_y.tolist() == [0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]
    assert ep.query_y.tolist() == [0, 0, 1, 1, 2, 2, 3, 3]
    assert len(ep.query_groups) == 8 and ep.n_way == 4
    assert len(set(ep.class_map)) == 4


def test_class_purity_and_vectors():
    store = _uniform_store()
    by_id = {r.id: r for r in store.records}
    rng = np.random.default_rng(9)
    for _ in range(200):
        ep = sample_episode(store, TaskSpec(5, 2, 3), store.classes[2:], rng)
        for ids, ys, xs in ((ep.support_ids, ep.support_y, ep.support_x), (ep.query_ids, ep.query_y, ep.query_x)):
            for rid, y, x in zip(ids, ys, xs):
                assert by_id[rid].label == ep.class_map[y]
                assert np.array_equal(by_id[rid].vector, x)
        assert all(c in store.classes[2:] for c in ep.class_map)
        assert ep.query_groups == tuple(by_id[r].group for r in ep.query_ids)


def test_class_frequency_near_uniform():
    store = _uniform_store(classes=10)
    rng = np.random.default_rng(2024)
    counts = dict.fromkeys(store.classes, 0)
    episodes = 1000
    for _ in range(episodes):
        for c in sample_episode(store, TaskSpec(5, 1, 1), None, rng).class_map:
            counts[c] += 1
    p = 5 / 10
    sd = np.sqrt(episodes * p * (1 - p))
    assert all(abs(v - episodes * p) < 5 * sd for v in counts.values())


@pytest.mark.parametrize("size", [16, 64, 1])
def test_meta_batch_size(size):
    batch = sample_meta_batch(_uniform_store(), TaskSpec(5, 1, 1), None, size, np.random.default_rng(0))
    assert len(batch) == size


def test_batch_of_one_matches_single_draw():
    store = _uniform_store()
    [a] = sample_meta_batch(store, TaskSpec(3, 2, 1), None, 1, np.random.default_rng(7))
    assert a == sample_episode(store, TaskSpec(3, 2, 1), None, np.random.default_rng(7))


def test_meta_batch_advances_rng():
    store = _uniform_store()
    rng = np.random.default_rng(7)
    first = sample_meta_batch(store, TaskSpec(3, 2, 1), None, 4, rng)
    second = sample_meta_batch(store, TaskSpec(3, 2, 1), None, 4, rng)
    assert first != second
    assert first == sample_meta_batch(store, TaskSpec(3, 2, 1), None, 4, np.random.default_rng(7))
    with pytest.raises(ValueError):
        sample_meta_batch(store, TaskSpec(3, 2, 1), None, 0, rng)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_support_query_never_overlap(n, k, q, seed):
    store = _uniform_store(classes=6, per_class=8)
    ep = sample_episode(store, TaskSpec(n, k, q), None, np.random.default_rng(seed))
    assert set(ep.support_ids).isdisjoint(ep.query_ids)
    assert len(set(ep.support_ids)) == n * k and len(set(ep.query_ids)) == n * q
