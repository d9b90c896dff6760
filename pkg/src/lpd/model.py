"""Feature-specific common spaces with attention fusion.

Topologies
----------
``lpd``
    One space per feature. Text-side space ``i`` compares text embedding ``i``
    with an attention fusion of all video embeddings; video-side space ``j``
    compares an attention fusion of all text embeddings with video embedding
    ``j``. Each space owns its fusion head.
``parallel-heads``
    The same number of spaces, but every space fuses both modalities with its
    own pair of heads; no space is anchored on a single feature.

Transforms ``tanh(x W + b)`` are shared: feature ``i`` has exactly one
transform no matter how many spaces consume it.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import unit_rows, cosine_matrix, cosine_matrix_backward, softmax, softmax_backward

TOPOLOGIES = ("lpd", "parallel-heads")


class ModelError(ValueError):
    pass


def space_layout(topology: str, k1: int, k2: int) -> list[tuple[str | int, str | int]]:
    """(text side, video side) per space; an int is a raw feature index, a str a head name."""
    if topology == "lpd":
        text_side = [(i, f"space{i}.vhead") for i in range(k1)]
        video_side = [(f"space{k1 + j}.thead", j) for j in range(k2)]
        return text_side + video_side
    if topology == "parallel-heads":
        return [(f"space{s}.thead", f"space{s}.vhead") for s in range(k1 + k2)]
    raise ModelError(f"unknown topology {topology!r}")


@dataclass
class ModelParams:
    text_dims: list[int]
    video_dims: list[int]
    d: int
    topology: str = "lpd"
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def k1(self) -> int:
        return len(self.text_dims)

    @property
    def k2(self) -> int:
        return len(self.video_dims)

    @property
    def n_spaces(self) -> int:
        return self.k1 + self.k2

    def layout(self):
        return space_layout(self.topology, self.k1, self.k2)

    def head_names(self) -> list[str]:
        heads = []
        for t, v in self.layout():
            heads += [h for h in (t, v) if isinstance(h, str)]
        return heads

    def shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for i, di in enumerate(self.text_dims):
            shapes[f"text{i}.W"] = (di, self.d)
            shapes[f"text{i}.b"] = (self.d,)
        for j, dj in enumerate(self.video_dims):
            shapes[f"video{j}.W"] = (dj, self.d)
            shapes[f"video{j}.b"] = (self.d,)
        for h in self.head_names():
            shapes[f"{h}.u"] = (self.d,)
            shapes[f"{h}.c"] = (1,)
        return shapes

    @classmethod
    def init(cls, text_dims, video_dims, d=512, topology="lpd", seed=0) -> "ModelParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
        p = cls(list(text_dims), list(video_dims), d, topology)
        rng = np.random.Generator(np.random.PCG64(seed))
        for name, shape in p.shapes().items():
            if name.startswith(("text", "video")):
                prefix, idx = ("text", p.text_dims) if name.startswith("text") else ("video", p.video_dims)
                fan_in = idx[int(name.split(".")[0][len(prefix):])]
            else:
                fan_in = d
            bound = 1.0 / np.sqrt(fan_in)
            p.tensors[name] = rng.uniform(-bound, bound, size=shape)
        return p

    def validate(self):
        shapes = self.shapes()
        if list(shapes) != list(self.tensors):
            raise ModelError("parameter names do not match the topology")
        for name, shape in shapes.items():
            arr = self.tensors[name]
            if arr.shape != shape:
                raise ModelError(f"{name}: shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ModelError(f"{name}: non-finite values")

    def copy(self) -> "ModelParams":
        return ModelParams(
            list(self.text_dims), list(self.video_dims), self.d, self.topology,
            {k: v.copy() for k, v in self.tensors.items()},
        )

    def census(self) -> dict[str, int]:
        return {
            "transforms": sum(1 for k in self.tensors if k.endswith(".W")),
            "heads": sum(1 for k in self.tensors if k.endswith(".u")),
            "scalars": sum(v.size for v in self.tensors.values()),
        }


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def transform(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[1] != W.shape[0]:
        raise ModelError(f"feature has {x.shape[1]} columns, transform expects {W.shape[0]}")
    return np.tanh(x @ W + b)


def transform_backward(x, e, d_e):
    dz = d_e * (1.0 - e * e)
    return x.T @ dz, dz.sum(axis=0)


def fuse(embeddings: list[np.ndarray], u: np.ndarray, c: np.ndarray):
    """Attention-weighted sum of k embedding matrices (each b x d).

    Returns the fused b x d matrix and the b x k weights.
    """
    stack = np.stack(embeddings)  # k x b x d
    logits = np.einsum("kbd,d->bk", stack, u) + c[0]
    weights = softmax(logits, axis=1)
    return np.einsum("bk,kbd->bd", weights, stack), weights


def fuse_backward(embeddings, u, weights, d_fused):
    stack = np.stack(embeddings)
    d_w = np.einsum("bd,kbd->bk", d_fused, stack)
    d_logits = softmax_backward(weights, d_w, axis=1)
    du = np.einsum("bk,kbd->d", d_logits, stack)
    dc = np.array([d_logits.sum()])
    d_stack = weights.T[:, :, None] * d_fused[None] + d_logits.T[:, :, None] * u[None, None, :]
    return list(d_stack), du, dc


# ---------------------------------------------------------------------------
# forward / backward over spaces
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingBatch:
    text: list[np.ndarray]
    video: list[np.ndarray]
    # per-space matrices that stand for the space when no single feature anchors it
    fused: list[np.ndarray] | None = None

    def space_anchors(self, topology: str) -> list[np.ndarray]:
        """The embedding matrix whose value spread characterises each space."""
        if topology == "lpd":
            return list(self.text) + list(self.video)
        if self.fused is None:
            raise ModelError("parallel-heads anchors need the fused embeddings")
        return list(self.fused)


@dataclass
class SpaceSimilarities:
    spaces: np.ndarray  # K x b x b, rows = texts, cols = videos

    @property
    def aggregate(self) -> np.ndarray:
        return self.spaces.mean(axis=0)

    @property
    def n_spaces(self) -> int:
        return self.spaces.shape[0]


def _side(src, embs, params, fused_cache, key):
    if isinstance(src, int):
        return embs[src]
    fused, weights = fuse(embs, params.tensors[f"{src}.u"], params.tensors[f"{src}.c"])
    fused_cache[key] = (src, weights)
    return fused


def forward_spaces(text_feats, video_feats, params: ModelParams):
    """Similarity matrices of every space for aligned text/video rows.

    Returns ``(SpaceSimilarities, EmbeddingBatch, cache)``; ``cache`` feeds
    :func:`backward_spaces`.
    """
    if len(text_feats) != params.k1 or len(video_feats) != params.k2:
        raise ModelError(
            f"batch has {len(text_feats)}/{len(video_feats)} features, "
            f"model expects {params.k1}/{params.k2}"
        )
    T = params.tensors
    et = [transform(x, T[f"text{i}.W"], T[f"text{i}.b"]) for i, x in enumerate(text_feats)]
    ev = [transform(x, T[f"video{j}.W"], T[f"video{j}.b"]) for j, x in enumerate(video_feats)]
    sims, fusion, cos_caches, anchors = [], {}, [], []
    for s, (tsrc, vsrc) in enumerate(params.layout()):
        tmat = _side(tsrc, et, params, fusion, (s, "t"))
        vmat = _side(vsrc, ev, params, fusion, (s, "v"))
        sim, cache = cosine_matrix(tmat, vmat)
        sims.append(sim)
        cos_caches.append(cache)
        if params.topology != "lpd":
            anchors.append(np.vstack([tmat, vmat]))
    emb = EmbeddingBatch(et, ev, anchors or None)
    cache = (list(text_feats), list(video_feats), et, ev, fusion, cos_caches)
    return SpaceSimilarities(np.stack(sims)), emb, cache


def backward_spaces(cache, d_spaces: np.ndarray, params: ModelParams) -> dict[str, np.ndarray]:
    """Parameter gradients given dLoss/dSimilarity for every space (K x b x b)."""
    xt, xv, et, ev, fusion, cos_caches = cache
    T = params.tensors
    grads = {k: np.zeros_like(v) for k, v in T.items()}
    d_et = [np.zeros_like(e) for e in et]
    d_ev = [np.zeros_like(e) for e in ev]
    for s, (tsrc, vsrc) in enumerate(params.layout()):
        if not np.any(d_spaces[s]):
            continue
        d_t, d_v = cosine_matrix_backward(cos_caches[s], d_spaces[s])
        for src, dmat, embs, d_embs, side in ((tsrc, d_t, et, d_et, "t"), (vsrc, d_v, ev, d_ev, "v")):
            if isinstance(src, int):
                d_embs[src] += dmat
                continue
            head, weights = fusion[(s, side)]
            d_stack, du, dc = fuse_backward(embs, T[f"{head}.u"], weights, dmat)
            grads[f"{head}.u"] += du
            grads[f"{head}.c"] += dc
            for k, dk in enumerate(d_stack):
                d_embs[k] += dk
    for i in range(len(et)):
        gW, gb = transform_backward(xt[i], et[i], d_et[i])
        grads[f"text{i}.W"] += gW
        grads[f"text{i}.b"] += gb
    for j in range(len(ev)):
        gW, gb = transform_backward(xv[j], ev[j], d_ev[j])
        grads[f"video{j}.W"] += gW
        grads[f"video{j}.b"] += gb
    return grads


# ---------------------------------------------------------------------------
# collection scoring
# ---------------------------------------------------------------------------


def _query_sides(query_feats, params):
    T = params.tensors
    et = [transform(x, T[f"text{i}.W"], T[f"text{i}.b"]) for i, x in enumerate(query_feats)]
    out = []
    for tsrc, _ in params.layout():
        if isinstance(tsrc, int):
            out.append(et[tsrc])
        else:
            out.append(fuse(et, T[f"{tsrc}.u"], T[f"{tsrc}.c"])[0])
    return out


def _item_sides(item_feats, params):
    T = params.tensors
    ev = [transform(x, T[f"video{j}.W"], T[f"video{j}.b"]) for j, x in enumerate(item_feats)]
    out = []
    for _, vsrc in params.layout():
        if isinstance(vsrc, int):
            out.append(ev[vsrc])
        else:
            out.append(fuse(ev, T[f"{vsrc}.u"], T[f"{vsrc}.c"])[0])
    return out


def score_collection(query_feats, collection_feats, params: ModelParams, chunk_size: int = 4096):
    """Per-space and aggregate similarities of every query to every item.

    ``query_feats``: k1 matrices (q x d_i). ``collection_feats``: k2 row-aligned
    matrices (n x d_j), e.g. the float32 tables; each chunk is lifted to
    float64 on its own so the whole collection is never copied.
    Returns ``(per_space K x q x n, aggregate q x n)``.
    """
    sizes = {m.shape[0] for m in collection_feats}
    if len(sizes) != 1:
        raise ModelError("collection feature tables are not aligned")
    n = sizes.pop()
    if len(query_feats) != params.k1:
        raise ModelError("query features do not match the model")
    q_units = [unit_rows(q)[0] for q in _query_sides(query_feats, params)]
    nq = query_feats[0].shape[0]
    per_space = np.empty((params.n_spaces, nq, n))
    for a in range(0, n, max(1, chunk_size)):
        b = min(n, a + max(1, chunk_size))
        chunk = [np.asarray(m[a:b], dtype=np.float64) for m in collection_feats]
        for s, vmat in enumerate(_item_sides(chunk, params)):
            per_space[s, :, a:b] = q_units[s] @ unit_rows(vmat)[0].T
    return per_space, per_space.mean(axis=0)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

MAGIC = b"LPDCKPT\x00"
VERSION = 1


def save_container(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Binary container: magic, u32 version, u32 header length, JSON header, f64 LE tensors."""
    header = dict(meta)
    header["tensors"] = [[name, list(arr.shape)] for name, arr in tensors.items()]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_container(path):
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ModelError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    tensors = {}
    for name, shape in header.pop("tensors"):
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        tensors[name] = arr.astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise ModelError(f"{path}: trailing bytes after tensors")
    return tensors, header


def params_meta(params: ModelParams) -> dict:
    return {
        "topology": params.topology,
        "d": params.d,
        "k1": params.k1,
        "k2": params.k2,
        "text_dims": params.text_dims,
        "video_dims": params.video_dims,
    }


def save_params(path, params: ModelParams, extra: dict | None = None) -> None:
    meta = params_meta(params)
    if extra:
        meta["extra"] = extra
    save_container(path, params.tensors, meta)


def load_params(path) -> ModelParams:
    tensors, meta = load_container(path)
    p = ModelParams(meta["text_dims"], meta["video_dims"], meta["d"], meta["topology"])
    p.tensors = {k: v for k, v in tensors.items() if not k.startswith("acc:")}
    p.validate()
    return p
