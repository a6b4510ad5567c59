import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metadro.dataset import (
    EmbeddingRecord,
    EmbeddingStore,
    StratumSpec,
    cap_per_class,
    clean_text,
    infer_format,
    load_store,
    select_classes,
    write_store,
)
from metadro.errors import IngestError, StratumError


def _store(n=6, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    records = [
        EmbeddingRecord(f"r{i}", f"p{i % 2}" if i % 3 else None, rng.standard_normal(dim), "ab"[i % 2], f"g{i % 3}")
        for i in range(n)
    ]
    return EmbeddingStore(records)


@pytest.mark.parametrize("fmt,suffix", [("csv", ".csv"), ("jsonl", ".jsonl"), ("binary", ".bin")])
def test_round_trip_is_exact(tmp_path, fmt, suffix):
    store = _store(10)
    path = tmp_path / f"s{suffix}"
    write_store(store, path, fmt)
    back = load_store(path, fmt)
    assert back == store
    assert back.vectors.tobytes() == store.vectors.tobytes()
    assert load_store(path) == store


def test_two_records_two_classes(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("id,patient_id,label,group,v0,v1,v2,v3\nx,,A,,1,2,3,4\ny,p1,B,,0,0,0,1\n")
    store = load_store(path)
    assert store.dim == 4
    assert store.classes == ["A", "B"]
    assert store.records[0].patient_id is None
    assert store.records[0].group == "A"


def test_dimension_mismatch_names_record(tmp_path):
    path = tmp_path / "s.jsonl"
    path.write_text(
        '{"id": "ok", "label": "A", "vector": [1, 2, 3, 4]}\n{"id": "bad", "label": "A", "vector": [1, 2, 3, 4, 5]}\n'
    )
    with pytest.raises(IngestError, match="'bad'"):
        load_store(path)


def test_duplicate_id_rejected():
    rec = EmbeddingRecord("x", None, [1.0], "A")
    with pytest.raises(IngestError, match="duplicate"):
        EmbeddingStore([rec, rec])


def test_empty_label_rejected():
    with pytest.raises(IngestError):
        EmbeddingRecord("x", None, [1.0], "")


def test_binary_bad_magic(tmp_path):
    path = tmp_path / "s.bin"
    path.write_bytes(b"NOPE\x01")
    with pytest.raises(IngestError, match="magic"):
        load_store(path)


def test_binary_truncated(tmp_path):
    path = tmp_path / "s.bin"
    write_store(_store(), path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(IngestError, match="truncated"):
        load_store(path)


def test_unknown_suffix():
    with pytest.raises(IngestError):
        infer_format("x.parquet")


def test_indices_rebuildable():
    store = _store(9)
    for label, idx in store.class_index.items():
        assert all(store.labels[i] == label for i in idx)
    assert sum(len(v) for v in store.group_index.values()) == len(store)
    assert store.subset(range(len(store))) == store


def test_vectors_read_only():
    store = _store()
    with pytest.raises(ValueError):
        store.vectors[0, 0] = 1.0
    with pytest.raises(ValueError):
        store.records[0].vector[0] = 1.0


# strata


def test_random_stratum_filters():
    assert select_classes({"a": 100, "b": 50, "c": 9}, StratumSpec("random", min_notes=10)) == ["a", "b"]


def test_popular_stratum():
    assert select_classes({"a": 100, "b": 50, "c": 20}, StratumSpec("popular", top_count=2)) == ["a", "b"]


def test_semi_rare_stratum():
    counts = {"a": 100, "b": 50, "c": 20, "d": 11}
    assert select_classes(counts, StratumSpec("semi_rare", top_count=2, min_notes=10)) == ["d", "c"]


def test_ties_broken_by_label():
    counts = {"z": 5, "m": 5, "a": 5, "q": 7}
    assert select_classes(counts, StratumSpec("popular", top_count=3)) == ["q", "a", "m"]


def test_empty_stratum():
    with pytest.raises(StratumError):
        select_classes({"a": 3, "b": 10}, StratumSpec("semi_rare", min_notes=10))
    with pytest.raises(StratumError):
        select_classes({}, StratumSpec("popular"))


@pytest.mark.parametrize("kw", [dict(kind="rare"), dict(kind="popular", top_count=0), dict(kind="random", min_notes=-1)])
def test_stratum_spec_validation(kw):
    with pytest.raises(ValueError):
        StratumSpec(**kw)


@given(st.dictionaries(st.text("abcdefgh", min_size=1, max_size=3), st.integers(11, 500), min_size=4, max_size=30))
def test_semi_rare_never_more_frequent_than_popular(counts):
    # ties at the boundary may land in both strata; distinct counts cannot
    k = len(counts) // 2
    pop = select_classes(counts, StratumSpec("popular", top_count=k))
    rare = select_classes(counts, StratumSpec("semi_rare", top_count=len(counts) - k, min_notes=10))
    assert max(counts[c] for c in rare) <= min(counts[c] for c in pop)
    if len(set(counts.values())) == len(counts):
        assert set(pop).isdisjoint(rare)


# capping


def _class_store(n, label="A", patient=lambda i: None):
    return EmbeddingStore([EmbeddingRecord(f"{label}{i:05d}", patient(i), [float(i)], label) for i in range(n)])


def test_cap_keeps_small_class():
    assert len(cap_per_class(_class_store(5), 1000)) == 5


def test_per_patient_cap_keeps_earliest():
    out = cap_per_class(_class_store(3, patient=lambda i: "p"), 1000, per_patient_cap=1)
    assert out.ids == ["A00000"]


def test_cap_deterministic():
    store = _class_store(2000)
    a = cap_per_class(store, 1000, seed=7)
    b = cap_per_class(store, 1000, seed=7)
    assert len(a) == 1000 and a.ids == b.ids
    assert cap_per_class(store, 1000, seed=8).ids != a.ids


def test_cap_invalid():
    with pytest.raises(ValueError):
        cap_per_class(_class_store(3), 0)


@settings(max_examples=30)
@given(st.integers(1, 40), st.integers(1, 60), st.integers(0, 5), st.integers(0, 99))
def test_cap_never_grows_or_changes_vectors(cap, n, patients, seed):
    records = [
        EmbeddingRecord(f"r{i}", f"p{i % patients}" if patients else None, [i, -i], "AB"[i % 2]) for i in range(n)
    ]
    store = EmbeddingStore(records)
    out = cap_per_class(store, cap, per_patient_cap=2 if patients else None, seed=seed)
    before, after = store.class_counts(), out.class_counts()
    assert all(after[c] <= min(before[c], cap) for c in after)
    original = {r.id: r for r in store.records}
    assert all(original[r.id] == r for r in out.records)


# text


def test_clean_text_example():
    assert clean_text("The BP was 140/90!!", {"the", "was"}) == "bp 140 90"


def test_clean_text_empty():
    assert clean_text("") == ""


def test_clean_text_truncates():
    text = " ".join("abcdefghij"[i % 10] for i in range(600))
    assert len(clean_text(text, max_tokens=512).split(" ")) == 512


def test_clean_text_underscore_is_separator():
    assert clean_text("snake_case-word") == "snake case word"


@given(st.text(max_size=200), st.sets(st.text("abcXYZ", min_size=1, max_size=3), max_size=4), st.integers(0, 40))
def test_clean_text_idempotent(text, stop, limit):
    once = clean_text(text, stop, limit)
    assert clean_text(once, stop, limit) == once
