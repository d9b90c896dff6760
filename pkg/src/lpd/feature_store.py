"""Precomputed feature tables, pair datasets, batching and the synthetic benchmark.

On-disk layout of a dataset directory::

    manifest.tsv          modality<TAB>feature<TAB>dim<TAB>vectors-path<TAB>ids-path
    <modality>_<feature>.f32   raw little-endian float32, count x dim, row-major
    <modality>_<feature>.ids   one id per line, LF-terminated
    pairs_train.tsv       text-id<TAB>video-id
    qrels_val.tsv         query-id<TAB>video-id  (presence = relevant)
    qrels_test.tsv
    collection_val.ids    video ids searched for the validation queries
    collection_test.ids

Paths in the manifest are relative to the manifest's directory.
"""
from __future__ import annotations

import logging
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MODALITIES = ("text", "video")


class FeatureStoreError(ValueError):
    pass


@dataclass
class FeatureTable:
    modality: str
    name: str
    ids: list[str]
    vectors: np.ndarray  # float32, len(ids) x dim

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise FeatureStoreError(f"unknown modality {self.modality!r}")
        if self.vectors.ndim != 2 or self.vectors.shape[1] < 1:
            raise FeatureStoreError("vectors must be a count x dim matrix with dim >= 1")
        if self.vectors.shape[0] != len(self.ids):
            raise FeatureStoreError(
                f"{len(self.ids)} ids but {self.vectors.shape[0]} vectors"
            )
        self._index = {}
        for row, item in enumerate(self.ids):
            if item in self._index:
                raise FeatureStoreError(f"duplicate id {item!r} at row {row}")
            self._index[item] = row
        bad = np.flatnonzero(~np.isfinite(self.vectors).all(axis=1))
        if bad.size:
            raise FeatureStoreError(f"non-finite value in row {bad[0]} (id {self.ids[bad[0]]!r})")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def rows(self, ids) -> np.ndarray:
        try:
            idx = [self._index[i] for i in ids]
        except KeyError as exc:
            raise FeatureStoreError(f"id {exc.args[0]!r} not in {self.modality}/{self.name}") from None
        return self.vectors[idx].astype(np.float64)

    def __contains__(self, item) -> bool:
        return item in self._index


@dataclass(frozen=True)
class ManifestEntry:
    modality: str
    name: str
    dim: int
    vectors_path: Path
    ids_path: Path


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise FeatureStoreError(f"{path}:{lineno}: expected 5 tab-separated fields")
        modality, name, dim, vec, ids = parts
        entries.append(
            ManifestEntry(modality, name, int(dim), path.parent / vec, path.parent / ids)
        )
    return entries


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    path = Path(path)
    lines = []
    for e in entries:
        vec = os.path.relpath(e.vectors_path, path.parent)
        ids = os.path.relpath(e.ids_path, path.parent)
        lines.append(f"{e.modality}\t{e.name}\t{e.dim}\t{vec}\t{ids}\n")
    path.write_text("".join(lines), encoding="utf-8", newline="\n")


def load_feature_table(entry: ManifestEntry) -> FeatureTable:
    ids = Path(entry.ids_path).read_text(encoding="utf-8").split("\n")
    if ids and ids[-1] == "":
        ids.pop()
    payload = Path(entry.vectors_path).read_bytes()
    expected = len(ids) * entry.dim * 4
    if len(payload) != expected:
        raise FeatureStoreError(
            f"payload length mismatch for {entry.modality}/{entry.name}: "
            f"{len(payload)} bytes, expected {expected} ({len(ids)} x {entry.dim} x 4)"
        )
    vectors = np.frombuffer(payload, dtype="<f4").reshape(len(ids), entry.dim).astype(np.float32)
    return FeatureTable(entry.modality, entry.name, ids, vectors)


def write_feature_table(table: FeatureTable, vectors_path, ids_path) -> ManifestEntry:
    Path(vectors_path).write_bytes(np.ascontiguousarray(table.vectors, dtype="<f4").tobytes())
    Path(ids_path).write_text("".join(f"{i}\n" for i in table.ids), encoding="utf-8", newline="\n")
    return ManifestEntry(table.modality, table.name, table.dim, Path(vectors_path), Path(ids_path))


def read_pairs(path) -> list[tuple[str, str]]:
    pairs = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            a, b = line.split("\t")
            pairs.append((a, b))
    return pairs


def write_pairs(path, pairs) -> None:
    Path(path).write_text("".join(f"{a}\t{b}\n" for a, b in pairs), encoding="utf-8", newline="\n")


def read_qrels(path) -> dict[str, set[str]]:
    qrels: dict[str, set[str]] = defaultdict(set)
    for q, v in read_pairs(path):
        qrels[q].add(v)
    return dict(qrels)


def read_ids(path) -> list[str]:
    return [x for x in Path(path).read_text(encoding="utf-8").split("\n") if x]


# ---------------------------------------------------------------------------
# datasets and batches
# ---------------------------------------------------------------------------


@dataclass
class EvalSplit:
    """Queries with complete relevance judgments over a video collection."""

    queries: list[str]
    collection: list[str]
    relevance: dict[str, set[str]]


@dataclass
class PairDataset:
    text_tables: list[FeatureTable]
    video_tables: list[FeatureTable]
    train: list[tuple[str, str]]
    val: EvalSplit | None = None
    test: EvalSplit | None = None

    def __post_init__(self):
        for table in self.text_tables:
            if table.modality != "text":
                raise FeatureStoreError(f"{table.name} is not a text table")
        for table in self.video_tables:
            if table.modality != "video":
                raise FeatureStoreError(f"{table.name} is not a video table")
        texts = {t for t, _ in self.train}
        videos = {v for _, v in self.train}
        for split in (self.val, self.test):
            if split is not None:
                texts.update(split.queries)
                videos.update(split.collection)
                for q, rel in split.relevance.items():
                    videos.update(rel)
        for tables, ids in ((self.text_tables, texts), (self.video_tables, videos)):
            for table in tables:
                missing = [i for i in ids if i not in table]
                if missing:
                    raise FeatureStoreError(
                        f"id {sorted(missing)[0]!r} missing from {table.modality}/{table.name}"
                    )

    @property
    def text_dims(self) -> list[int]:
        return [t.dim for t in self.text_tables]

    @property
    def video_dims(self) -> list[int]:
        return [t.dim for t in self.video_tables]

    def text_features(self, ids) -> list[np.ndarray]:
        return [t.rows(ids) for t in self.text_tables]

    def video_features(self, ids) -> list[np.ndarray]:
        return [t.rows(ids) for t in self.video_tables]

    def batch(self, pairs) -> "Batch":
        text_ids = [t for t, _ in pairs]
        video_ids = [v for _, v in pairs]
        return Batch(text_ids, video_ids, self.text_features(text_ids), self.video_features(video_ids))


@dataclass
class Batch:
    text_ids: list[str]
    video_ids: list[str]
    text: list[np.ndarray]
    video: list[np.ndarray]

    def __post_init__(self):
        if len(set(self.video_ids)) != len(self.video_ids):
            raise FeatureStoreError("batch repeats a video id")
        if len(set(self.text_ids)) != len(self.text_ids):
            raise FeatureStoreError("batch repeats a text id")

    @property
    def size(self) -> int:
        return len(self.video_ids)


def epoch_pairs(pairs, epoch: int) -> list[tuple[str, str]]:
    """One caption per video for this epoch, chosen round-robin."""
    captions = defaultdict(list)
    for t, v in pairs:
        captions[v].append(t)
    return [(caps[epoch % len(caps)], v) for v, caps in captions.items()]


def epoch_batches(pairs, b: int, seed: int, epoch: int) -> list[list[tuple[str, str]]]:
    """Shuffle one epoch and cut it into batches of ``b`` distinct videos and texts.

    A pair whose text already sits in the open batch is deferred to the next
    one. Leftovers that cannot fill a whole batch are dropped.
    """
    chosen = epoch_pairs(pairs, epoch)
    if len(chosen) < b:
        raise FeatureStoreError(f"only {len(chosen)} distinct videos, cannot fill a batch of {b}")
    rng = np.random.Generator(np.random.PCG64([seed, epoch]))
    order = rng.permutation(len(chosen))
    batches = []
    current, texts, deferred = [], set(), []
    for k in order:
        queue = [chosen[k]]
        while queue:
            t, v = queue.pop()
            if t in texts:
                deferred.append((t, v))
                continue
            current.append((t, v))
            texts.add(t)
            if len(current) == b:
                batches.append(current)
                current, texts = [], set()
                queue.extend(deferred)
                deferred = []
    return batches


def sample_batch(dataset: PairDataset, b: int, seed: int, epoch: int = 0) -> Batch:
    """First batch of the given epoch's shuffle."""
    batches = epoch_batches(dataset.train, b, seed, epoch)
    if not batches:
        raise FeatureStoreError(f"cannot assemble a batch of {b} distinct pairs")
    return dataset.batch(batches[0])


# ---------------------------------------------------------------------------
# persistence of whole datasets
# ---------------------------------------------------------------------------


def save_dataset(dataset: PairDataset, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for table in dataset.text_tables + dataset.video_tables:
        stem = f"{table.modality}_{table.name}"
        entries.append(write_feature_table(table, root / f"{stem}.f32", root / f"{stem}.ids"))
    write_manifest(root / "manifest.tsv", entries)
    write_pairs(root / "pairs_train.tsv", dataset.train)
    for name in ("val", "test"):
        split = getattr(dataset, name)
        if split is None:
            continue
        rows = [(q, v) for q in split.queries for v in sorted(split.relevance.get(q, ()))]
        write_pairs(root / f"qrels_{name}.tsv", rows)
        (root / f"collection_{name}.ids").write_text(
            "".join(f"{v}\n" for v in split.collection), encoding="utf-8", newline="\n"
        )


def load_dataset(root) -> PairDataset:
    root = Path(root)
    manifest = root / "manifest.tsv"
    if not manifest.exists():
        raise FeatureStoreError(f"missing manifest {manifest}")
    tables = [load_feature_table(e) for e in read_manifest(manifest)]
    splits = {}
    for name in ("val", "test"):
        qrels_path = root / f"qrels_{name}.tsv"
        if qrels_path.exists():
            pairs = read_pairs(qrels_path)
            queries = list(dict.fromkeys(q for q, _ in pairs))
            relevance = read_qrels(qrels_path)
            splits[name] = EvalSplit(queries, read_ids(root / f"collection_{name}.ids"), relevance)
    return PairDataset(
        [t for t in tables if t.modality == "text"],
        [t for t in tables if t.modality == "video"],
        read_pairs(root / "pairs_train.tsv"),
        splits.get("val"),
        splits.get("test"),
    )


# ---------------------------------------------------------------------------
# synthetic benchmark
# ---------------------------------------------------------------------------


@dataclass
class SyntheticConfig:
    """Desk-scale benchmark with multi-mode relevance.

    Every video has a semantic vector and a visual environment. Video feature
    ``j`` sees the semantics clearly only in the environments it is assigned
    to; elsewhere it mostly sees an unrelated vector. Each query's relevant
    videos are spread over ``clusters`` environments, so no single video
    feature covers all of them.
    """

    queries: int = 20
    clusters: int = 3
    relevant_per_cluster: int = 10
    distractors: int = 1000
    val_queries: int = 10
    val_distractors: int = 300
    train_videos: int = 2000
    captions_per_video: int = 1
    text_dims: tuple[int, ...] = (24, 32, 40)
    video_dims: tuple[int, ...] = (48, 24, 32, 48, 40, 16)
    latent_dim: int = 16
    environments: int = 3
    noise: float = 0.5
    text_noise: float = 0.5
    cluster_spread: float = 0.4
    off_env_signal: float = 0.3
    seed: int = 0

    def validate(self):
        if self.queries < 1 or self.clusters < 1 or self.relevant_per_cluster < 1:
            raise FeatureStoreError("queries, clusters and relevant_per_cluster must be >= 1")
        if self.clusters > self.relevant_per_cluster * self.queries + self.distractors:
            raise FeatureStoreError("more clusters than items")
        if self.environments < 1 or self.environments > len(self.video_dims):
            raise FeatureStoreError("need 1 <= environments <= number of video features")
        if self.distractors < 0 or self.val_distractors < 0 or self.train_videos < 1:
            raise FeatureStoreError("negative item counts")
        if not self.text_dims or not self.video_dims:
            raise FeatureStoreError("need at least one feature per modality")


class _World:
    """Random projections shared by every item of one synthetic benchmark."""

    def __init__(self, cfg: SyntheticConfig, rng: np.random.Generator):
        self.cfg = cfg
        L = cfg.latent_dim
        self.text_proj = [rng.standard_normal((L, d)) / np.sqrt(L) for d in cfg.text_dims]
        self.video_proj = [rng.standard_normal((L, d)) / np.sqrt(L) for d in cfg.video_dims]
        self.env_offset = [rng.standard_normal((cfg.environments, d)) * 0.5 for d in cfg.video_dims]
        # feature j is sharp in environment j % environments
        self.sharp = np.zeros((len(cfg.video_dims), cfg.environments), dtype=bool)
        for j in range(len(cfg.video_dims)):
            self.sharp[j, j % cfg.environments] = True

    def video_centroids(self, z, env, rng):
        """Clean per-feature vectors of a video with semantics ``z`` in ``env``."""
        cfg = self.cfg
        decoy = rng.standard_normal(z.shape)
        out = []
        for j, proj in enumerate(self.video_proj):
            w = 1.0 if self.sharp[j, env] else cfg.off_env_signal
            seen = w * z + np.sqrt(1.0 - w * w) * decoy
            out.append(seen @ proj + self.env_offset[j][env])
        return out

    def text_vectors(self, z, rng, noise):
        return [z @ p + noise * rng.standard_normal(p.shape[1]) for p in self.text_proj]


def _unit(rng, n, L):
    z = rng.standard_normal((n, L))
    return z / np.linalg.norm(z, axis=1, keepdims=True) * np.sqrt(L)


def generate_synthetic(cfg: SyntheticConfig) -> PairDataset:
    """Seeded synthetic benchmark. Same config gives bit-identical output."""
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    world = _World(cfg, rng)
    L = cfg.latent_dim
    k1, k2 = len(cfg.text_dims), len(cfg.video_dims)
    texts: dict[str, list[np.ndarray]] = {}
    videos: dict[str, list[np.ndarray]] = {}

    def add_video(vid, z, env, noise):
        cents = world.video_centroids(z, env, rng)
        videos[vid] = [c + noise * rng.standard_normal(c.shape) for c in cents]

    def add_text(tid, z):
        texts[tid] = world.text_vectors(z, rng, cfg.text_noise)

    train = []
    zs = _unit(rng, cfg.train_videos, L)
    envs = rng.integers(0, cfg.environments, cfg.train_videos)
    for n in range(cfg.train_videos):
        vid = f"tr{n:06d}"
        add_video(vid, zs[n], envs[n], cfg.noise)
        for c in range(cfg.captions_per_video):
            tid = f"tr{n:06d}#{c}"
            add_text(tid, zs[n])
            train.append((tid, vid))

    def make_split(prefix, n_queries, n_distractors):
        queries, collection, relevance = [], [], {}
        qz = _unit(rng, n_queries, L)
        for q in range(n_queries):
            qid = f"{prefix}q{q:04d}"
            add_text(qid, qz[q])
            queries.append(qid)
            relevance[qid] = set()
            for c in range(cfg.clusters):
                env = c % cfg.environments
                # one cluster = one visually coherent scene of the query's concept
                scene = qz[q] + cfg.cluster_spread * rng.standard_normal(L)
                cents = world.video_centroids(scene, env, rng)
                for r in range(cfg.relevant_per_cluster):
                    vid = f"{prefix}q{q:04d}c{c:02d}r{r:03d}"
                    videos[vid] = [x + cfg.noise * rng.standard_normal(x.shape) for x in cents]
                    relevance[qid].add(vid)
                    collection.append(vid)
        dz = _unit(rng, n_distractors, L)
        denv = rng.integers(0, cfg.environments, n_distractors)
        for n in range(n_distractors):
            vid = f"{prefix}d{n:06d}"
            add_video(vid, dz[n], denv[n], cfg.noise)
            collection.append(vid)
        return EvalSplit(queries, sorted(collection), relevance)

    val = make_split("va", cfg.val_queries, cfg.val_distractors)
    test = make_split("te", cfg.queries, cfg.distractors)

    text_ids = list(texts)
    video_ids = list(videos)
    text_tables = [
        FeatureTable("text", f"t{i}", text_ids, np.array([texts[t][i] for t in text_ids], dtype=np.float32))
        for i in range(k1)
    ]
    video_tables = [
        FeatureTable("video", f"v{j}", video_ids, np.array([videos[v][j] for v in video_ids], dtype=np.float32))
        for j in range(k2)
    ]
    return PairDataset(text_tables, video_tables, train, val, test)
