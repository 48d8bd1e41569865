"""Prior embedding banks and positive-sample selection.

A bank holds frozen prior embeddings for every sample plus neighbor lists
computed once by exact brute force.  Distances are squared Euclidean
everywhere and distance ties are broken by ascending id, so every sampler
is deterministic given its RNG.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import data as data_mod
from .data import Dataset
from .errors import ArgumentError, EncoderError, StateError

PRIOR_KINDS = ("identity_pixels", "pca", "random_net", "label_oracle", "file", "flip_invariant")


def sq_dists(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance from ``query`` to every row, as sum((a - b)**2)."""
    diff = matrix - query
    return np.einsum("ij,ij->i", diff, diff)


# -- prior encoders ---------------------------------------------------------

@dataclass(frozen=True)
class PriorEncoder:
    """Frozen mapping from dataset images to fixed-length vectors.

    ``params`` per kind: pca -> ``dim``; random_net -> ``seed`` plus optional
    ``arch``/``hidden_widths``/``embed_dim``; label_oracle -> ``seed``,
    ``jitter``; file -> ``path``.
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise ArgumentError(f"unknown prior kind {self.kind!r}; expected one of {PRIOR_KINDS}")

    def encode(self, dataset: Dataset) -> np.ndarray:
        images = dataset.images
        n = len(dataset)
        flat = images.reshape(n, -1)
        if self.kind == "identity_pixels":
            out = flat.copy()
        elif self.kind == "flip_invariant":
            # mean of the image and its mirror: equal for x and hflip(x)
            out = (0.5 * (images + images[:, :, ::-1, :])).reshape(n, -1)
        elif self.kind == "pca":
            out = _pca(flat, int(self.params.get("dim", 16)))
        elif self.kind == "label_oracle":
            out = _label_oracle(dataset.branch_labels, int(self.params.get("seed", 0)),
                                float(self.params.get("jitter", 0.005)))
        elif self.kind == "random_net":
            out = _random_net(images, self.params)
        else:
            out = data_mod.load_bank(self.params["path"]).astype(np.float64)
            if out.shape[0] != n:
                raise EncoderError(f"bank file {self.params['path']} has {out.shape[0]} rows for {n} samples")
        out = np.asarray(out, dtype=np.float64)
        bad = np.flatnonzero(~np.all(np.isfinite(out), axis=1))
        if bad.size:
            raise EncoderError(f"prior {self.kind!r} produced a non-finite embedding for sample {int(bad[0])}")
        return out


def _pca(flat: np.ndarray, dim: int) -> np.ndarray:
    centered = flat - flat.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    dim = min(dim, vt.shape[0])
    return centered @ vt[:dim].T


def _label_oracle(labels: np.ndarray, seed: int, jitter: float) -> np.ndarray:
    if not 0 <= jitter < 0.01:
        raise ArgumentError("label_oracle jitter must lie in [0, 0.01)")
    classes = np.unique(labels)
    onehot = (labels[:, None] == classes[None, :]).astype(np.float64)
    rng = np.random.default_rng(seed)
    return onehot + rng.uniform(-jitter, jitter, size=onehot.shape)


def _random_net(images: np.ndarray, params: dict) -> np.ndarray:
    from .model import EncoderConfig, embed, init_params

    n, h, w, c = images.shape
    cfg = EncoderConfig(
        arch=params.get("arch", "small_conv"),
        hidden_widths=tuple(params.get("hidden_widths", (16, 32))),
        embed_dim=int(params.get("embed_dim", 32)),
        projector_widths=(2,),
        image_hw=h,
        channels=c,
    )
    return embed(init_params(cfg, int(params.get("seed", 0))), images)


# -- bank -------------------------------------------------------------------

@dataclass(frozen=True)
class EmbeddingBank:
    matrix: np.ndarray
    neighbor_lists: np.ndarray
    neighbor_dists: np.ndarray
    k_max: int

    def __len__(self) -> int:
        return self.matrix.shape[0]

    def dists_from(self, query_id: int) -> np.ndarray:
        return sq_dists(self.matrix, self.matrix[query_id])


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def bank_from_matrix(matrix: np.ndarray, k_max: int, chunk_elems: int = 1 << 22) -> EmbeddingBank:
    """Exact neighbor lists for every row: self at rank 0, then (distance, id) order."""
    m = np.asarray(matrix, dtype=np.float64)
    n = m.shape[0]
    if m.ndim != 2 or n < 1:
        raise ArgumentError("embedding matrix must be N x D with N >= 1")
    if not 0 <= k_max < n:
        raise ArgumentError(f"k_max must satisfy 0 <= k_max < N={n}, got {k_max}")
    bad = np.flatnonzero(~np.all(np.isfinite(m), axis=1))
    if bad.size:
        raise EncoderError(f"non-finite embedding for sample {int(bad[0])}")
    lists = np.empty((n, k_max + 1), dtype=np.int64)
    dists = np.empty((n, k_max + 1), dtype=np.float64)
    ids = np.arange(n)
    rows_per_chunk = max(1, chunk_elems // max(1, n * m.shape[1]))
    for start in range(0, n, rows_per_chunk):
        block = m[start:start + rows_per_chunk]
        diff = block[:, None, :] - m[None, :, :]
        d = np.einsum("ijk,ijk->ij", diff, diff)
        for r in range(block.shape[0]):
            q = start + r
            row = d[r].copy()
            row[q] = -1.0  # pins self to rank 0 even among exact duplicates
            if k_max + 1 < n:
                kth = np.partition(row, k_max)[k_max]
                cand = np.flatnonzero(row <= kth)
            else:
                cand = ids
            order = cand[np.lexsort((cand, row[cand]))][: k_max + 1]
            lists[q] = order
            dists[q] = d[r, order]
    return EmbeddingBank(_readonly(m), _readonly(lists), _readonly(dists), k_max)


def build_bank(prior: PriorEncoder, dataset: Dataset, k_max: int) -> EmbeddingBank:
    return bank_from_matrix(prior.encode(dataset), k_max)


# -- selection --------------------------------------------------------------

@dataclass(frozen=True)
class GPSConfig:
    mode: str = "knn_random"
    tau: float = 1.0
    k: int = 4
    tie_break: str = "prefer_nonself"
    include_self_in_knn: bool = True

    def __post_init__(self):
        if self.mode not in ("tau_ball", "knn_random"):
            raise ArgumentError(f"unknown GPS mode {self.mode!r}")
        if self.tie_break not in ("prefer_nonself", "lowest_id"):
            raise ArgumentError(f"unknown tie_break {self.tie_break!r}")
        if self.mode == "tau_ball" and not self.tau > 0:
            raise ArgumentError("tau must be positive")
        if self.mode == "knn_random" and self.k < 1:
            raise ArgumentError("k must be >= 1")

    def check(self, bank: EmbeddingBank) -> None:
        if self.mode == "knn_random":
            need = self.k - 1 if self.include_self_in_knn else self.k
            if need > bank.k_max:
                raise ArgumentError(f"k={self.k} needs neighbor lists of length {need + 1}, bank has {bank.k_max + 1}")


def ball(bank: EmbeddingBank, query_id: int, tau: float) -> set[int]:
    """Ids within squared distance strictly below ``tau`` of the query."""
    return set(np.flatnonzero(bank.dists_from(query_id) < tau).tolist())


def gps_positive(bank: EmbeddingBank, query_id: int, cfg: GPSConfig) -> int:
    """Furthest member of the query's tau-ball."""
    d = bank.dists_from(query_id)
    inside = np.flatnonzero(d < cfg.tau)
    far = d[inside].max()
    ties = inside[d[inside] == far]
    if cfg.tie_break == "prefer_nonself":
        others = ties[ties != query_id]
        if others.size:
            return int(others.min())
    return int(ties.min())


def knn_candidates(bank: EmbeddingBank, query_id: int, cfg: GPSConfig) -> np.ndarray:
    """The ids a knn_random draw chooses from."""
    row = bank.neighbor_lists[query_id]
    return row[: cfg.k] if cfg.include_self_in_knn else row[1: cfg.k + 1]


def knn_positive(bank: EmbeddingBank, query_id: int, cfg: GPSConfig, rng: np.random.Generator) -> int:
    cand = knn_candidates(bank, query_id, cfg)
    return int(cand[rng.integers(len(cand))])


def knn_positive_batch(bank: EmbeddingBank, query_ids, cfg: GPSConfig, rng: np.random.Generator) -> np.ndarray:
    """Vectorized knn_positive for a whole batch (one uniform draw per query)."""
    q = np.asarray(query_ids, dtype=np.int64)
    offset = 0 if cfg.include_self_in_knn else 1
    return bank.neighbor_lists[q, offset + rng.integers(cfg.k, size=len(q))]


def select_positives(bank: EmbeddingBank, query_ids, cfg: GPSConfig, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    if cfg.mode == "knn_random":
        if rng is None:
            raise ArgumentError("knn_random sampling needs an rng")
        return knn_positive_batch(bank, query_ids, cfg, rng)
    return np.array([gps_positive(bank, int(i), cfg) for i in query_ids], dtype=np.int64)


def select_positive(bank: EmbeddingBank, query_id: int, cfg: GPSConfig, rng: Optional[np.random.Generator] = None) -> int:
    if cfg.mode == "tau_ball":
        return gps_positive(bank, query_id, cfg)
    if rng is None:
        raise ArgumentError("knn_random sampling needs an rng")
    return knn_positive(bank, query_id, cfg, rng)


# -- NNCLR support queue ----------------------------------------------------

class SupportQueue:
    """FIFO of embedding vectors (oldest first) with optional sample ids."""

    def __init__(self, capacity: int = 65536):
        if capacity < 1:
            raise ArgumentError("queue capacity must be >= 1")
        self.capacity = capacity
        self._buf: Optional[np.ndarray] = None
        self._ids = np.empty(0, dtype=np.int64)

    def __len__(self) -> int:
        return 0 if self._buf is None else self._buf.shape[0]

    @property
    def entries(self) -> np.ndarray:
        if self._buf is None:
            return np.empty((0, 0))
        return self._buf

    @property
    def ids(self) -> np.ndarray:
        return self._ids

    def push(self, embeddings, ids=None) -> None:
        emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        new_ids = np.full(len(emb), -1, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        if len(new_ids) != len(emb):
            raise ArgumentError("ids must align with embeddings")
        buf = emb if self._buf is None else np.concatenate([self._buf, emb])
        all_ids = np.concatenate([self._ids, new_ids])
        self._buf = buf[-self.capacity:].copy()
        self._ids = all_ids[-self.capacity:].copy()

    def nearest_index(self, queries) -> np.ndarray:
        """Queue positions of the nearest entry per query row (ties: oldest)."""
        if len(self) == 0:
            raise StateError("nearest-neighbor lookup on an empty queue")
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        out = np.empty(len(q), dtype=np.int64)
        for i, row in enumerate(q):
            out[i] = int(np.argmin(sq_dists(self._buf, row)))
        return out


def queue_push(queue: SupportQueue, embeddings, ids=None) -> None:
    queue.push(embeddings, ids)


def queue_nn(queue: SupportQueue, embedding) -> np.ndarray:
    """Stored entry nearest to ``embedding`` (a single vector)."""
    idx = queue.nearest_index(embedding)[0]
    return queue.entries[idx].copy()
