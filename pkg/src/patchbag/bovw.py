"""Bag-of-visual-words feature selection and encoding.

Pipeline: per-descriptor strength (variance of the descriptor's own
components) ranks descriptors, the strongest 80% survive, k-means (k=100,
seeded k-means++ then Lloyd) builds the codebook, and each patch becomes the
L1-normalized histogram of its descriptors' nearest centroids (Euclidean,
ties to the lowest centroid index).

Codebooks are built either per region (each patch set gets its own
vocabulary, the default) or globally (one vocabulary pooled
over every set, which keeps histogram bins comparable across regions). The
per-set tables D (n_patches x k) row-concatenate into the training table
T (N_total x k).
"""

from __future__ import annotations

import csv
import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .binio import Cursor, FileFormatError, FormatErrorCode, read_framed, write_framed
from .features import DescriptorSet
from .labels import Label

CODEBOOK_MAGIC = b"PBCB"
CODEBOOK_VERSION = 1

DEFAULT_K = 100
DEFAULT_TRIM_FRACTION = 0.8
DEFAULT_MAX_ITER = 100
DEFAULT_TOL = 1e-4


class VocabScope(enum.Enum):
    PER_REGION = "region"
    GLOBAL = "global"


class EmptyInputError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


class ZeroDescriptorError(ValueError):
    pass


@dataclass
class Codebook:
    k: int
    centroids: np.ndarray  # (k, d) float32
    trim_fraction: float
    seed: int
    scope: VocabScope
    source_descriptor_count: int
    final_sse: float = 0.0
    sse_history: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float32)
        if self.centroids.shape[0] != self.k:
            raise ValueError(f"centroid count {self.centroids.shape[0]} != k={self.k}")
        if not np.isfinite(self.centroids).all():
            raise ValueError("codebook centroids must be finite")

    @property
    def d(self) -> int:
        return self.centroids.shape[1]


@dataclass
class EncodedTable:
    rows: np.ndarray  # (n, k) float64 histograms
    labels: np.ndarray  # (n,) int
    provenance: list[tuple[str, int]]  # (region_id, seq_index) per row

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.rows.shape[0] != self.labels.shape[0] or self.rows.shape[0] != len(self.provenance):
            raise ValueError("rows, labels and provenance must have matching lengths")

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def k(self) -> int:
        return self.rows.shape[1]


def descriptor_strength(descriptors: np.ndarray) -> np.ndarray:
    """Population variance of each descriptor's own components.

    Accepts a single d-vector or an (N, d) matrix; returns a scalar or (N,).
    """
    arr = np.asarray(descriptors, dtype=np.float64)
    if arr.ndim == 1:
        return float(arr.var())
    return arr.var(axis=1)


def trim_count(n: int, fraction: float) -> int:
    # epsilon guards float products like 0.8*55 landing a hair above the
    # integer they mean; intent is ceil(fraction*n) over the reals
    return int(math.ceil(fraction * n - 1e-9))


def trim_strongest(
    descriptors: np.ndarray, fraction: float = DEFAULT_TRIM_FRACTION
) -> tuple[np.ndarray, np.ndarray]:
    """Keep the ceil(fraction*N) strongest descriptors, stable under ties.

    Returns (kept descriptors in original order, kept original indices).
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    arr = np.asarray(descriptors)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise EmptyInputError("need a non-empty (N, d) descriptor matrix")
    n = arr.shape[0]
    kept = trim_count(n, fraction)
    strengths = descriptor_strength(arr)
    # stable sort on descending strength: ties keep the lower original index
    order = np.argsort(-strengths, kind="stable")[:kept]
    order.sort()
    return arr[order], order


def _kmeans_pp_init(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = data.shape[0]
    centroids = np.empty((k, data.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = data[first]
    d2 = ((data - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            raise InsufficientDataError(
                f"only {i} distinct descriptors available for k={k} centroids; "
                "use the global vocabulary scope or a smaller k"
            )
        probs = d2 / total
        nxt = int(rng.choice(n, p=probs))
        centroids[i] = data[nxt]
        d2 = np.minimum(d2, ((data - centroids[i]) ** 2).sum(axis=1))
    return centroids


def _assign(data: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid per point (ties to the lowest index) and squared distances.

    Distances are computed exactly as sum((x - c)^2) and the same values drive
    the argmin, so the per-iteration SSE is monotone even at the ulp level.
    """
    n = data.shape[0]
    assign = np.empty(n, dtype=np.intp)
    d2 = np.empty(n, dtype=np.float64)
    chunk = max(1, 2**22 // max(centroids.shape[0] * centroids.shape[1], 1))
    for i0 in range(0, n, chunk):
        i1 = min(i0 + chunk, n)
        diffs = data[i0:i1, None, :] - centroids[None, :, :]
        dist = (diffs * diffs).sum(axis=2)
        assign[i0:i1] = np.argmin(dist, axis=1)
        d2[i0:i1] = dist[np.arange(i1 - i0), assign[i0:i1]]
    return assign, d2


def kmeans(
    descriptors: np.ndarray,
    k: int,
    seed: int,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    trim_fraction: float = DEFAULT_TRIM_FRACTION,
    scope: VocabScope = VocabScope.PER_REGION,
) -> Codebook:
    """Lloyd's algorithm with seeded k-means++ initialization.

    Empty clusters are reseeded to the point currently farthest from its
    centroid. The per-iteration SSE sequence (non-increasing) is kept on the
    returned Codebook. Results are bit-reproducible for fixed inputs + seed.
    """
    data = np.asarray(descriptors, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError(f"descriptors must be (N, d), got shape {data.shape}")
    if not np.isfinite(data).all():
        raise ValueError("descriptors contain non-finite values")
    n = data.shape[0]
    if n < k:
        raise InsufficientDataError(
            f"{n} descriptors for k={k}; use the global vocabulary scope or a smaller k"
        )

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(data, k, rng)
    assign, d2 = _assign(data, centroids)
    history = [float(d2.sum())]

    for _ in range(max_iter):
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, data)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty][:, None]

        if not nonempty.all():
            # move each empty centroid onto the point farthest from its
            # current centroid; zero that distance so the next empty cluster
            # claims a different point
            _, cur_d2 = _assign(data, centroids)
            for ci in np.flatnonzero(~nonempty):
                far = int(np.argmax(cur_d2))
                centroids[ci] = data[far]
                cur_d2[far] = 0.0

        assign, d2 = _assign(data, centroids)
        sse = float(d2.sum())
        history.append(sse)
        if history[-2] - sse <= tol * max(history[-2], 1e-300):
            break

    return Codebook(
        k=k,
        centroids=centroids.astype(np.float32),
        trim_fraction=trim_fraction,
        seed=seed,
        scope=scope,
        source_descriptor_count=n,
        final_sse=history[-1],
        sse_history=history,
    )


def encode_patch(descriptors: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Histogram of nearest-centroid assignments for one patch, divided by R."""
    arr = np.asarray(descriptors, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ZeroDescriptorError("patch has no descriptors to encode")
    if arr.shape[1] != codebook.d:
        raise ValueError(f"descriptor dim {arr.shape[1]} != codebook dim {codebook.d}")
    assign, _ = _assign(arr, codebook.centroids.astype(np.float64))
    counts = np.bincount(assign, minlength=codebook.k).astype(np.float64)
    return counts / arr.shape[0]


def encode_set(dset: DescriptorSet, codebook: Codebook) -> np.ndarray:
    """(n_patches, k) table; row i encodes patch i in seq_index order."""
    return np.stack([encode_patch(dset.descriptors[i], codebook) for i in range(dset.n_patches)]) \
        if dset.n_patches else np.zeros((0, codebook.k), dtype=np.float64)


def build_and_encode(
    sets: list[DescriptorSet],
    scope: VocabScope = VocabScope.PER_REGION,
    k: int = DEFAULT_K,
    fraction: float = DEFAULT_TRIM_FRACTION,
    seed: int = 0,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> tuple[EncodedTable, dict[str, Codebook]]:
    """Trim, cluster and encode every set, then row-concatenate the tables.

    PER_REGION fits one codebook per set from that set's trimmed descriptors;
    GLOBAL pools all trimmed descriptors into a single codebook. Returns the
    concatenated table and the codebooks keyed by region_id ("*" for global).
    """
    if not sets:
        raise EmptyInputError("no descriptor sets to encode")

    def pooled_descriptors(dset: DescriptorSet) -> np.ndarray:
        return dset.descriptors.reshape(-1, dset.d).astype(np.float64)

    codebooks: dict[str, Codebook] = {}
    if scope is VocabScope.PER_REGION:
        for dset in sets:
            desc = pooled_descriptors(dset)
            if desc.shape[0] == 0:
                raise EmptyInputError(f"set {dset.region_id} has no descriptors")
            kept, _ = trim_strongest(desc, fraction)
            if kept.shape[0] < k:
                raise InsufficientDataError(
                    f"set {dset.region_id}: {kept.shape[0]} descriptors after trimming "
                    f"< k={k}; use the global vocabulary scope or a smaller k"
                )
            # every codebook shares the caller's seed: clustering depends only
            # on (descriptors, k, seed), so a single set encodes identically
            # under either scope
            codebooks[dset.region_id] = kmeans(kept, k, seed, max_iter, tol, fraction, scope)
    else:
        pools = []
        for dset in sets:
            desc = pooled_descriptors(dset)
            if desc.shape[0] == 0:
                continue
            kept, _ = trim_strongest(desc, fraction)
            pools.append(kept)
        if not pools:
            raise EmptyInputError("no descriptors in any set")
        pooled = np.concatenate(pools, axis=0)
        if pooled.shape[0] < k:
            raise InsufficientDataError(
                f"{pooled.shape[0]} pooled descriptors after trimming < k={k}"
            )
        codebooks["*"] = kmeans(pooled, k, seed, max_iter, tol, fraction, scope)

    blocks = []
    labels = []
    provenance = []
    for dset in sets:
        cb = codebooks[dset.region_id if scope is VocabScope.PER_REGION else "*"]
        blocks.append(encode_set(dset, cb))
        labels.extend([int(dset.label)] * dset.n_patches)
        provenance.extend((dset.region_id, i) for i in range(dset.n_patches))
    table = EncodedTable(
        rows=np.concatenate(blocks, axis=0) if blocks else np.zeros((0, k)),
        labels=np.array(labels, dtype=np.int64),
        provenance=provenance,
    )
    return table, codebooks


def write_codebook(codebook: Codebook, path: str | Path) -> None:
    """magic | version u16 | scope u8 | k u32 | d u32 | seed u64 |
    trim_fraction f32 | centroids f32 row-major | CRC32."""
    payload = struct.pack("<H", CODEBOOK_VERSION)
    payload += struct.pack("<B", 0 if codebook.scope is VocabScope.PER_REGION else 1)
    payload += struct.pack("<IIQf", codebook.k, codebook.d, codebook.seed, codebook.trim_fraction)
    payload += np.ascontiguousarray(codebook.centroids, dtype="<f4").tobytes()
    write_framed(path, CODEBOOK_MAGIC, payload)


def read_codebook(path: str | Path) -> Codebook:
    cur = Cursor(read_framed(path, CODEBOOK_MAGIC), context=str(path))
    version = cur.unpack("H")
    if version != CODEBOOK_VERSION:
        raise FileFormatError(
            FormatErrorCode.BAD_VERSION, f"{path}: version {version}, expected {CODEBOOK_VERSION}"
        )
    scope_code = cur.unpack("B")
    k, d, seed, trim_fraction = cur.unpack("IIQf")
    raw = cur.take(k * d * 4)
    cur.expect_end()
    centroids = np.frombuffer(raw, dtype="<f4").reshape(k, d).copy()
    return Codebook(
        k=k,
        centroids=centroids,
        trim_fraction=float(trim_fraction),
        seed=seed,
        scope=VocabScope.PER_REGION if scope_code == 0 else VocabScope.GLOBAL,
        source_descriptor_count=0,
    )


TABLE_HEADER_PREFIX = ["region_id", "seq_index", "label"]


def write_table_csv(table: EncodedTable, path: str | Path) -> None:
    """CSV export: region_id,seq_index,label,h0..h{k-1}."""
    header = TABLE_HEADER_PREFIX + [f"h{i}" for i in range(table.k)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for (region_id, seq_index), label, row in zip(table.provenance, table.labels, table.rows):
            writer.writerow([region_id, seq_index, int(label)] + [f"{v:.9g}" for v in row])


def read_table_csv(path: str | Path) -> EncodedTable:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        k = len(header) - len(TABLE_HEADER_PREFIX)
        rows, labels, provenance = [], [], []
        for rec in reader:
            provenance.append((rec[0], int(rec[1])))
            labels.append(int(rec[2]))
            rows.append([float(v) for v in rec[3:]])
    return EncodedTable(
        rows=np.array(rows, dtype=np.float64).reshape(len(labels), k),
        labels=np.array(labels, dtype=np.int64),
        provenance=provenance,
    )
