import hashlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lpd.feature_store import (
    FeatureStoreError,
    FeatureTable,
    ManifestEntry,
    PairDataset,
    SyntheticConfig,
    epoch_batches,
    generate_synthetic,
    load_dataset,
    load_feature_table,
    read_manifest,
    sample_batch,
    save_dataset,
    write_feature_table,
)


def write_raw(tmp_path, payload: bytes, ids: str, dim=4):
    vec, idp = tmp_path / "v.f32", tmp_path / "v.ids"
    vec.write_bytes(payload)
    idp.write_text(ids)
    return ManifestEntry("video", "f", dim, vec, idp)


class TestLoad:
    def test_three_rows(self, tmp_path):
        data = np.arange(12, dtype="<f4")
        table = load_feature_table(write_raw(tmp_path, data.tobytes(), "a\nb\nc\n"))
        assert table.ids == ["a", "b", "c"] and table.dim == 4
        np.testing.assert_array_equal(table.vectors[2], [8, 9, 10, 11])

    def test_payload_mismatch(self, tmp_path):
        with pytest.raises(FeatureStoreError, match="payload length mismatch"):
            load_feature_table(write_raw(tmp_path, b"\0" * 47, "a\nb\nc\n"))

    def test_duplicate_id(self, tmp_path):
        with pytest.raises(FeatureStoreError, match="duplicate id"):
            load_feature_table(write_raw(tmp_path, b"\0" * 48, "a\nb\na\n"))

    def test_non_finite_names_row(self, tmp_path):
        data = np.zeros(12, dtype="<f4")
        data[5] = np.nan
        with pytest.raises(FeatureStoreError, match="row 1"):
            load_feature_table(write_raw(tmp_path, data.tobytes(), "a\nb\nc\n"))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 1000))
    def test_round_trip(self, tmp_path_factory, n, dim, seed):
        tmp = tmp_path_factory.mktemp("rt")
        vectors = np.random.default_rng(seed).standard_normal((n, dim)).astype(np.float32)
        table = FeatureTable("text", "x", [f"id{i}" for i in range(n)], vectors)
        entry = write_feature_table(table, tmp / "x.f32", tmp / "x.ids")
        back = load_feature_table(entry)
        assert back.ids == table.ids and back.dim == dim
        assert back.vectors.tobytes() == vectors.tobytes()

    def test_manifest_paths_relative(self, tmp_path):
        ds = generate_synthetic(SyntheticConfig(queries=2, distractors=5, val_queries=1, val_distractors=3, train_videos=8))
        save_dataset(ds, tmp_path / "d")
        text = (tmp_path / "d" / "manifest.tsv").read_text()
        assert str(tmp_path) not in text
        assert text.splitlines()[0].split("\t")[:3] == ["text", "t0", "24"]
        assert all(e.vectors_path.exists() for e in read_manifest(tmp_path / "d" / "manifest.tsv"))


def small_dataset(train):
    texts = sorted({t for t, _ in train})
    videos = sorted({v for _, v in train})
    return PairDataset(
        [FeatureTable("text", "t", texts, np.zeros((len(texts), 2), np.float32))],
        [FeatureTable("video", "v", videos, np.zeros((len(videos), 2), np.float32))],
        train,
    )


class TestBatches:
    def test_batch_of_128_from_9000(self):
        train = [(f"t{i}", f"v{i}") for i in range(9000)]
        batch = sample_batch(small_dataset(train), 128, seed=1)
        assert batch.size == 128 and len(set(batch.video_ids)) == 128

    def test_whole_dataset_one_batch(self):
        train = [(f"t{i}", f"v{i}") for i in range(10)]
        batches = epoch_batches(train, 10, seed=0, epoch=0)
        assert len(batches) == 1 and len(batches[0]) == 10

    def test_shared_video_captions_never_together(self):
        train = [(f"t{i}", f"v{i}") for i in range(20)] + [("extra", "v3")]
        for seed in range(50):
            for epoch in range(4):
                for batch in epoch_batches(train, 5, seed, epoch):
                    assert not {"t3", "extra"} <= {t for t, _ in batch}

    def test_round_robin_captions(self):
        train = [("a0", "v"), ("a1", "v")] + [(f"t{i}", f"w{i}") for i in range(3)]
        seen = set()
        for epoch in range(2):
            for batch in epoch_batches(train, 4, 0, epoch):
                seen |= {t for t, v in batch if v == "v"}
        assert seen == {"a0", "a1"}

    def test_repeated_text_deferred(self):
        train = [("same", f"v{i}") for i in range(3)] + [(f"t{i}", f"w{i}") for i in range(9)]
        for seed in range(20):
            for batch in epoch_batches(train, 4, seed, 0):
                texts = [t for t, _ in batch]
                assert len(set(texts)) == len(texts)

    def test_too_small(self):
        with pytest.raises(FeatureStoreError):
            epoch_batches([("t", "v")], 2, 0, 0)

    @settings(max_examples=30)
    @given(st.integers(0, 10_000), st.integers(2, 8))
    def test_distinct_invariant(self, seed, b):
        rng = np.random.default_rng(seed)
        train = [(f"t{i}", f"v{rng.integers(15)}") for i in range(30)]
        if len({v for _, v in train}) < b:
            return
        for batch in epoch_batches(train, b, seed, int(rng.integers(5))):
            assert len({v for _, v in batch}) == b
            assert len({t for t, _ in batch}) == b


class TestSynthetic:
    def test_judgment_count(self):
        ds = generate_synthetic(SyntheticConfig(queries=20, clusters=3, relevant_per_cluster=10, distractors=1000))
        assert sum(len(r) for r in ds.test.relevance.values()) == 600
        assert len(ds.test.collection) == 1600
        assert ds.text_dims == [24, 32, 40] and len(ds.video_dims) == 6

    def test_noise_free_items_equal_centroid(self):
        ds = generate_synthetic(SyntheticConfig(queries=2, distractors=4, val_queries=1, val_distractors=2, train_videos=4, noise=0.0))
        q = ds.test.queries[0]
        for c in range(3):
            ids = sorted(v for v in ds.test.relevance[q] if f"c{c:02d}" in v)
            for table in ds.video_tables:
                rows = table.rows(ids)
                np.testing.assert_array_equal(rows, np.repeat(rows[:1], len(ids), axis=0))

    def test_deterministic_bytes(self, tmp_path):
        cfg = SyntheticConfig(queries=3, distractors=20, val_queries=2, val_distractors=10, train_videos=30, seed=7)
        save_dataset(generate_synthetic(cfg), tmp_path / "a")
        save_dataset(generate_synthetic(cfg), tmp_path / "b")
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name

    def test_infeasible(self):
        with pytest.raises(FeatureStoreError):
            generate_synthetic(SyntheticConfig(queries=1, clusters=50, relevant_per_cluster=1, distractors=0))
        with pytest.raises(FeatureStoreError):
            generate_synthetic(SyntheticConfig(clusters=0))

    def test_save_load(self, tmp_path):
        ds = generate_synthetic(SyntheticConfig(queries=3, distractors=20, val_queries=2, val_distractors=10, train_videos=30))
        save_dataset(ds, tmp_path)
        back = load_dataset(tmp_path)
        assert back.train == ds.train
        assert back.test.relevance == ds.test.relevance
        assert back.test.queries == ds.test.queries
        assert back.val.collection == ds.val.collection
        for a, b in zip(back.video_tables, ds.video_tables):
            assert a.ids == b.ids and a.vectors.tobytes() == b.vectors.tobytes()

    def test_missing_id_rejected(self):
        table = FeatureTable("text", "t", ["a"], np.zeros((1, 2), np.float32))
        vid = FeatureTable("video", "v", ["x"], np.zeros((1, 2), np.float32))
        with pytest.raises(FeatureStoreError, match="missing"):
            PairDataset([table], [vid], [("a", "y")])
