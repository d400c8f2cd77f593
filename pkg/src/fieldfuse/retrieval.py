"""Co-view region retrieval: image descriptors and an HNSW index over L2.

The descriptor is a deterministic 8x8x3 tiny image: area-averaged
downsample, per-channel mean/std normalization, flattened and L2-normalized
to 192 dims. It has no learned weights, which keeps retrieval reproducible;
the index is descriptor-agnostic, so a learned embedding can replace it
without touching the graph code.

The index is a standard hierarchical navigable-small-world graph: each node
draws a level from an exponential distribution, lives on every layer up to
that level, and keeps at most M neighbors per layer (2M on layer 0).
Insertion descends greedily from the entry point, then runs a beam search
of width ef_construction per layer; queries descend the same way and run a
beam of width ef_search on layer 0. With ef_search >= index size the search
is exact. Ties break toward the lower node id, so builds are deterministic
given a seed.
"""

from __future__ import annotations

import heapq
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, EmptyIndex

DESCRIPTOR_GRID = 8
DESCRIPTOR_DIM = DESCRIPTOR_GRID * DESCRIPTOR_GRID * 3
INDEX_MAGIC = b"FFHN"
INDEX_VERSION = 1


@dataclass(frozen=True)
class Descriptor:
    """Fixed-length image signature with its provenance."""

    vector: np.ndarray
    agent_id: str = ""
    image_index: int = -1

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValueError("descriptor entries must be finite")
        object.__setattr__(self, "vector", v)


def _area_weights(src: int, dst: int) -> np.ndarray:
    """(dst, src) matrix averaging src cells into dst equal bins by overlap."""
    w = np.zeros((dst, src))
    bin_size = src / dst
    for i in range(dst):
        lo = i * bin_size
        hi = (i + 1) * bin_size
        for r in range(int(math.floor(lo)), min(src, int(math.ceil(hi)))):
            overlap = min(hi, r + 1) - max(lo, r)
            if overlap > 0:
                w[i, r] = overlap / bin_size
    return w


def extract_descriptor(image: np.ndarray, agent_id: str = "", image_index: int = -1) -> Descriptor:
    """Tiny-image descriptor: 8x8 area average per channel, per-channel
    mean/std normalization, unit L2 norm.

    Constant (zero-variance) images map to the fixed fallback descriptor
    1/sqrt(192) in every component instead of producing NaNs.
    """
    image = np.asarray(image, dtype=float)
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] == 0 or image.shape[1] == 0:
        raise ValueError(f"expected a non-empty (H, W, 3) image, got {image.shape}")
    wr = _area_weights(image.shape[0], DESCRIPTOR_GRID)
    wc = _area_weights(image.shape[1], DESCRIPTOR_GRID)
    parts = []
    for c in range(3):
        tiny = wr @ image[:, :, c] @ wc.T
        std = tiny.std()
        if std < 1e-12:
            parts.append(np.zeros(DESCRIPTOR_GRID * DESCRIPTOR_GRID))
        else:
            parts.append(((tiny - tiny.mean()) / std).reshape(-1))
    v = np.concatenate(parts)
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        v = np.full(DESCRIPTOR_DIM, 1.0 / math.sqrt(DESCRIPTOR_DIM))
    else:
        v = v / norm
    return Descriptor(v, agent_id, image_index)


class HnswIndex:
    """Layered small-world graph over L2 distance."""

    def __init__(self, dim: int, m: int = 16, ef_construction: int = 200,
                 ef_search: int = 64, seed: int = 0):
        self.dim = dim
        self.m = m
        self.ef_construction = ef_construction
        self.ef_search = ef_search
        self.level_scale = 1.0 / math.log(m)
        self.vectors = np.zeros((0, dim), dtype=np.float32)
        self.levels: list = []
        self.neighbors: list = []  # per node: list of adjacency lists, layers 0..level
        self.entry_point: int | None = None
        self._rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def top_level(self) -> int:
        return self.levels[self.entry_point] if self.entry_point is not None else -1

    def _distance(self, q: np.ndarray, idx) -> np.ndarray:
        diff = self.vectors[idx].astype(np.float64) - q
        return np.sum(diff * diff, axis=-1)

    def _search_layer(self, q: np.ndarray, entry_ids: list, ef: int, layer: int) -> list:
        """Beam search on one layer; returns [(sq_dist, id)] ascending, <= ef items."""
        visited = set(entry_ids)
        dists = self._distance(q, list(entry_ids))
        candidates = [(float(d), i) for d, i in zip(dists, entry_ids)]
        heapq.heapify(candidates)
        best = [(-d, i) for d, i in candidates]
        heapq.heapify(best)
        while len(best) > ef:
            heapq.heappop(best)
        while candidates:
            d, node = heapq.heappop(candidates)
            if d > -best[0][0] and len(best) >= ef:
                break
            fresh = [n for n in self.neighbors[node][layer] if n not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            for nd, n in zip(self._distance(q, fresh), fresh):
                nd = float(nd)
                if len(best) < ef or nd < -best[0][0]:
                    heapq.heappush(candidates, (nd, n))
                    heapq.heappush(best, (-nd, n))
                    if len(best) > ef:
                        heapq.heappop(best)
        return sorted((-d, i) for d, i in best)

    def _select_closest(self, ranked: list, limit: int) -> list:
        """Closest-first neighbor selection; lower id wins at equal distance."""
        return [i for _, i in sorted(ranked, key=lambda t: (t[0], t[1]))[:limit]]

    def _degree_cap(self, layer: int) -> int:
        return 2 * self.m if layer == 0 else self.m

    def _add_edge(self, a: int, b: int, layer: int) -> None:
        if b not in self.neighbors[a][layer]:
            self.neighbors[a][layer].append(b)
        if a not in self.neighbors[b][layer]:
            self.neighbors[b][layer].append(a)

    def _prune(self, node: int, layer: int) -> None:
        """Shrink an overfull adjacency back to the cap, farthest links first.

        Edges are symmetric, so a removal updates both endpoints; an edge
        that is the counterpart's only link on the layer is dropped last,
        which keeps every node reachable in practice.
        """
        cap = self._degree_cap(layer)
        links = self.neighbors[node][layer]
        if len(links) <= cap:
            return
        base = self.vectors[node].astype(np.float64)
        ranked = sorted(
            zip(self._distance(base, links), links), key=lambda t: (-t[0], -t[1])
        )
        droppable = [i for _, i in ranked if len(self.neighbors[i][layer]) > 1]
        pinned = [i for _, i in ranked if len(self.neighbors[i][layer]) <= 1]
        to_drop = droppable[: len(links) - cap]
        if len(to_drop) < len(links) - cap:  # degree cap is hard; drop pinned last
            to_drop += pinned[: len(links) - cap - len(to_drop)]
        for other in to_drop:
            self.neighbors[node][layer].remove(other)
            if node in self.neighbors[other][layer]:
                self.neighbors[other][layer].remove(node)

    def insert(self, vector: np.ndarray) -> int:
        vector = np.asarray(vector, dtype=float).reshape(-1)
        if vector.shape[0] != self.dim:
            raise DimensionMismatch(f"descriptor dim {vector.shape[0]} != index dim {self.dim}")
        level = int(-math.log(1.0 - self._rng.random()) * self.level_scale)
        node = len(self.levels)
        self.vectors = np.vstack([self.vectors, vector.astype(np.float32)[None]])
        self.levels.append(level)
        self.neighbors.append([[] for _ in range(level + 1)])
        if len(self.levels) == 1:
            self.entry_point = node
            return node

        q = self.vectors[node].astype(np.float64)
        eps = [self.entry_point]
        for layer in range(self.top_level, level, -1):
            eps = [i for _, i in self._search_layer(q, eps, 1, layer)]
        for layer in range(min(level, self.top_level), -1, -1):
            ranked = self._search_layer(q, eps, self.ef_construction, layer)
            for other in self._select_closest(ranked, self.m):
                self._add_edge(node, other, layer)
                self._prune(other, layer)
            eps = [i for _, i in ranked]
        if level > self.levels[self.entry_point]:
            self.entry_point = node
        return node

    def search(self, vector: np.ndarray, k: int) -> list:
        """k approximate nearest neighbors as (id, L2 distance), ascending."""
        if len(self) == 0:
            raise EmptyIndex("search on an empty index")
        vector = np.asarray(vector, dtype=float).reshape(-1)
        if vector.shape[0] != self.dim:
            raise DimensionMismatch(f"query dim {vector.shape[0]} != index dim {self.dim}")
        eps = [self.entry_point]
        for layer in range(self.top_level, 0, -1):
            eps = [i for _, i in self._search_layer(vector, eps, 1, layer)]
        ranked = self._search_layer(vector, eps, max(self.ef_search, k), 0)
        ranked.sort(key=lambda t: (t[0], t[1]))
        return [(i, math.sqrt(d)) for d, i in ranked[:k]]

    def brute_force(self, vector: np.ndarray, k: int) -> list:
        """Linear-scan oracle over the same stored vectors."""
        if len(self) == 0:
            raise EmptyIndex("search on an empty index")
        q = np.asarray(vector, dtype=float).reshape(-1)
        d = self._distance(q, np.arange(len(self)))
        order = sorted(range(len(self)), key=lambda i: (d[i], i))[:k]
        return [(i, math.sqrt(d[i])) for i in order]

    def check_invariants(self) -> None:
        """Degree caps, nested layer membership, reachability per layer."""
        for node, adj in enumerate(self.neighbors):
            assert len(adj) == self.levels[node] + 1, "layer membership must be nested"
            for layer, links in enumerate(adj):
                cap = self._degree_cap(layer)
                assert len(links) <= cap, f"node {node} exceeds degree {cap} on layer {layer}"
                for other in links:
                    assert self.levels[other] >= layer, "edge to node missing from layer"
        for layer in range(self.top_level + 1):
            members = {i for i, lv in enumerate(self.levels) if lv >= layer}
            if not members:
                continue
            reached = set()
            frontier = [self.entry_point] if self.levels[self.entry_point] >= layer else []
            reached.update(frontier)
            while frontier:
                nxt = []
                for node in frontier:
                    for other in self.neighbors[node][layer]:
                        if other not in reached:
                            reached.add(other)
                            nxt.append(other)
                frontier = nxt
            assert reached == members, f"layer {layer}: {len(members - reached)} unreachable"

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(INDEX_MAGIC)
            entry = self.entry_point if self.entry_point is not None else 0xFFFFFFFF
            fh.write(
                struct.pack(
                    "<IIIIIII",
                    INDEX_VERSION, self.dim, self.m, self.ef_construction,
                    self.ef_search, len(self), entry,
                )
            )
            for node in range(len(self)):
                fh.write(struct.pack("<I", self.levels[node]))
                for links in self.neighbors[node]:
                    fh.write(struct.pack("<I", len(links)))
                    fh.write(np.asarray(links, dtype="<u4").tobytes())
            fh.write(self.vectors.astype("<f4").tobytes())

    @staticmethod
    def load(path) -> "HnswIndex":
        with open(path, "rb") as fh:
            if fh.read(4) != INDEX_MAGIC:
                raise ValueError("not an index file")
            version, dim, m, efc, efs, count, entry = struct.unpack("<IIIIIII", fh.read(28))
            if version != INDEX_VERSION:
                raise ValueError(f"unsupported index version {version}")
            index = HnswIndex(dim, m=m, ef_construction=efc, ef_search=efs)
            for _ in range(count):
                (level,) = struct.unpack("<I", fh.read(4))
                index.levels.append(level)
                adj = []
                for _layer in range(level + 1):
                    (n,) = struct.unpack("<I", fh.read(4))
                    adj.append(list(np.frombuffer(fh.read(4 * n), dtype="<u4")))
                index.neighbors.append(adj)
            blob = fh.read(4 * count * dim)
            index.vectors = np.frombuffer(blob, dtype="<f4").reshape(count, dim).copy()
            index.entry_point = None if entry == 0xFFFFFFFF else int(entry)
        return index


def hnsw_insert(index: HnswIndex, descriptor: Descriptor) -> HnswIndex:
    index.insert(descriptor.vector)
    return index


def hnsw_search(index: HnswIndex, query: Descriptor, k: int) -> list:
    return index.search(query.vector, k)


def dataset_descriptors(dataset) -> list:
    return [
        extract_descriptor(img, agent_id=dataset.agent_id, image_index=k)
        for k, img in enumerate(dataset.images)
    ]


def coview_pairs(dataset_i, dataset_j, top_n: int = 5, seed: int = 0) -> list:
    """Most-similar cross-agent image pairs as (index_i, index_j, distance).

    Builds the index over agent j's descriptors, queries every image of
    agent i for its single nearest neighbor, and keeps the global top_n by
    ascending distance -- at most one pair per image of agent i.
    """
    if not dataset_i.images or not dataset_j.images:
        raise ValueError("both datasets must be non-empty")
    desc_i = dataset_descriptors(dataset_i)
    desc_j = dataset_descriptors(dataset_j)
    index = HnswIndex(DESCRIPTOR_DIM, seed=seed)
    for d in desc_j:
        index.insert(d.vector)
    hits = []
    for k, d in enumerate(desc_i):
        (j, dist), = index.search(d.vector, 1)
        hits.append((k, j, dist))
    hits.sort(key=lambda t: (t[2], t[0], t[1]))
    return hits[:top_n]
