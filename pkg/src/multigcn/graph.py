"""Graph ingestion, RMAT generation and CSR construction.

Vertex ids are dense u32. Feature vectors are never materialized; a graph
only carries the feature lengths needed to size transfers.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ParseError

ELEMENT_BYTES = 4
EDGE_MAGIC = b"MGEL"
EDGE_VERSION = 1
_EDGE_HEADER = struct.Struct("<4sIII")

DEFAULT_RMAT_PROBS = (0.57, 0.19, 0.19, 0.05)


@dataclass
class EdgeList:
    src: np.ndarray
    dst: np.ndarray
    num_vertices: int

    def __post_init__(self) -> None:
        self.src = np.asarray(self.src, dtype=np.uint32)
        self.dst = np.asarray(self.dst, dtype=np.uint32)
        if self.src.shape != self.dst.shape:
            raise ValueError("src and dst must have the same length")
        if len(self.src) and max(int(self.src.max()), int(self.dst.max())) >= self.num_vertices:
            raise ValueError("edge endpoint out of range for num_vertices")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, int]], num_vertices: int | None = None) -> EdgeList:
        arr = np.array(list(pairs), dtype=np.int64).reshape(-1, 2)
        if num_vertices is None:
            num_vertices = int(arr.max()) + 1 if len(arr) else 0
        return cls(arr[:, 0], arr[:, 1], num_vertices)

    @property
    def edges(self) -> list[tuple[int, int]]:
        return list(zip(self.src.tolist(), self.dst.tolist()))

    def __len__(self) -> int:
        return len(self.src)


@dataclass(frozen=True)
class CsrGraph:
    """Incoming-neighbor CSR: row v lists the sources of edges u -> v."""

    row_offsets: np.ndarray
    col_indices: np.ndarray
    feature_len_in: int
    feature_len_out: int
    element_bytes: int = ELEMENT_BYTES

    @property
    def num_vertices(self) -> int:
        return len(self.row_offsets) - 1

    @property
    def num_edges(self) -> int:
        return int(self.row_offsets[-1])

    def in_neighbors(self, v: int) -> np.ndarray:
        return self.col_indices[int(self.row_offsets[v]):int(self.row_offsets[v + 1])]

    def in_degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets).astype(np.int64)

    def edge_pairs(self) -> np.ndarray:
        """All (src, dst) pairs as an (|E|, 2) int64 array, sorted by (dst, src)."""
        dst = np.repeat(np.arange(self.num_vertices, dtype=np.int64), self.in_degrees())
        return np.stack([self.col_indices.astype(np.int64), dst], axis=1)

    def with_feature_lengths(self, feature_len_in: int, feature_len_out: int) -> CsrGraph:
        return CsrGraph(self.row_offsets, self.col_indices, feature_len_in, feature_len_out, self.element_bytes)


@dataclass(frozen=True)
class GraphStats:
    avg_degree: Fraction
    max_degree: int
    topology_bytes: int
    feature_bytes: int


def load_edge_list(source: BinaryIO | bytes, fmt: str = "text") -> EdgeList:
    """Read an edge list from a byte stream.

    ``fmt`` is ``"text"`` (SNAP style "src dst" lines, ``#`` comments) or
    ``"binary"`` (little-endian u32 pairs with an optional MGEL header).
    """
    data = source if isinstance(source, (bytes, bytearray)) else source.read()
    if fmt == "text":
        return _parse_text(bytes(data))
    if fmt == "binary":
        return _parse_binary(bytes(data))
    raise ConfigError(f"unknown edge list format {fmt!r}", key="graph_format")


def _parse_text(data: bytes) -> EdgeList:
    src: list[int] = []
    dst: list[int] = []
    offset = 0
    for line in data.splitlines(keepends=True):
        stripped = line.strip()
        if stripped and not stripped.startswith(b"#"):
            parts = stripped.split()
            if len(parts) != 2:
                raise ParseError(f"expected 'src dst', got {stripped[:40]!r}", offset)
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(f"non-integer vertex id in {stripped[:40]!r}", offset) from None
            if u < 0 or v < 0 or u >= 2**32 or v >= 2**32:
                raise ParseError("vertex id outside u32 range", offset)
            src.append(u)
            dst.append(v)
        offset += len(line)
    n = max(max(src), max(dst)) + 1 if src else 0
    return EdgeList(np.array(src, dtype=np.uint32), np.array(dst, dtype=np.uint32), n)


def _parse_binary(data: bytes) -> EdgeList:
    body_start = 0
    declared_v = declared_e = None
    if data[:4] == EDGE_MAGIC:
        if len(data) < _EDGE_HEADER.size:
            raise ParseError("truncated MGEL header", len(data))
        _, version, declared_v, declared_e = _EDGE_HEADER.unpack_from(data)
        if version != EDGE_VERSION:
            raise ParseError(f"unsupported MGEL version {version}", 4)
        body_start = _EDGE_HEADER.size
    body = memoryview(data)[body_start:]
    if len(body) % 8:
        raise ParseError("truncated edge record", body_start + (len(body) // 8) * 8)
    pairs = np.frombuffer(body, dtype="<u4").reshape(-1, 2)
    if declared_e is not None and declared_e != len(pairs):
        raise ParseError(f"header declares {declared_e} edges, found {len(pairs)}", 12)
    src = pairs[:, 0].astype(np.uint32)
    dst = pairs[:, 1].astype(np.uint32)
    n = int(max(src.max(), dst.max())) + 1 if len(pairs) else 0
    if declared_v is not None:
        if declared_v < n:
            raise ParseError(f"header declares {declared_v} vertices but ids reach {n - 1}", 8)
        n = declared_v
    return EdgeList(src, dst, n)


def write_edge_list(edges: EdgeList, sink: BinaryIO, fmt: str = "binary", header: bool = True) -> None:
    if fmt == "text":
        buf = io.StringIO()
        for u, v in zip(edges.src.tolist(), edges.dst.tolist()):
            buf.write(f"{u} {v}\n")
        sink.write(buf.getvalue().encode("ascii"))
    elif fmt == "binary":
        if header:
            sink.write(_EDGE_HEADER.pack(EDGE_MAGIC, EDGE_VERSION, edges.num_vertices, len(edges)))
        pairs = np.stack([edges.src, edges.dst], axis=1).astype("<u4")
        sink.write(pairs.tobytes())
    else:
        raise ConfigError(f"unknown edge list format {fmt!r}", key="graph_format")


def _rmat_sample(rng: np.random.Generator, scale: int, count: int, a: float, b: float,
                 c: float) -> tuple[np.ndarray, np.ndarray]:
    src = np.zeros(count, dtype=np.uint32)
    dst = np.zeros(count, dtype=np.uint32)
    for level in range(scale):
        r = rng.random(count)
        row_bit = r >= a + b
        col_bit = ((r >= a) & (r < a + b)) | (r >= a + b + c)
        src |= row_bit.astype(np.uint32) << np.uint32(level)
        dst |= col_bit.astype(np.uint32) << np.uint32(level)
    return src, dst


def generate_rmat(
    scale: int,
    avg_degree: int,
    probs: Sequence[float | Fraction] = DEFAULT_RMAT_PROBS,
    seed: int = 0,
    permute: bool = True,
    distinct: bool = False,
) -> EdgeList:
    """Sample ``2**scale * avg_degree`` RMAT edges.

    Each edge descends ``scale`` levels of the adjacency matrix, picking a
    quadrant with probabilities (a, b, c, d). Duplicates are kept unless
    ``distinct`` is set, in which case sampling continues until that many
    distinct edges exist (first occurrences, in sample order). With
    ``permute`` the vertex labels are shuffled afterwards so that hub
    vertices do not all land on the same low-bit node id.
    """
    if len(probs) != 4 or any(p < 0 for p in probs):
        raise ConfigError("rmat probabilities must be four non-negative values", key="rmat_probs")
    if not math.isclose(float(sum(probs)), 1.0, abs_tol=1e-9):
        raise ConfigError(f"rmat probabilities sum to {float(sum(probs))}, expected 1", key="rmat_probs")
    if not 0 <= scale <= 30:
        raise ConfigError(f"rmat scale {scale} outside [0, 30]", key="vertex_scale")
    a, b, c, _ = (float(p) for p in probs)
    n = 1 << scale
    m = n * avg_degree
    if distinct and m > n * n:
        raise ConfigError(f"cannot draw {m} distinct edges among {n} vertices", key="avg_degree")
    rng = np.random.default_rng(seed)
    src, dst = _rmat_sample(rng, scale, m, a, b, c)
    if distinct:
        while True:
            keys = src.astype(np.uint64) << np.uint64(32) | dst.astype(np.uint64)
            _, first = np.unique(keys, return_index=True)
            if len(first) >= m:
                break
            more = max(1024, (m - len(first)) * 2)
            s2, d2 = _rmat_sample(rng, scale, more, a, b, c)
            src, dst = np.concatenate((src, s2)), np.concatenate((dst, d2))
        first.sort()
        src, dst = src[first[:m]], dst[first[:m]]
    if permute and n > 1:
        perm = rng.permutation(n).astype(np.uint32)
        src = perm[src]
        dst = perm[dst]
    return EdgeList(src, dst, n)


def build_csr(edges: EdgeList, feature_len_in: int, feature_len_out: int) -> CsrGraph:
    n = edges.num_vertices
    if len(edges):
        keys = np.unique(edges.dst.astype(np.uint64) << np.uint64(32) | edges.src.astype(np.uint64))
        dst = (keys >> np.uint64(32)).astype(np.int64)
        col = (keys & np.uint64(0xFFFFFFFF)).astype(np.uint32)
    else:
        dst = np.zeros(0, dtype=np.int64)
        col = np.zeros(0, dtype=np.uint32)
    counts = np.bincount(dst, minlength=n) if n else np.zeros(0, dtype=np.int64)
    row_offsets = np.zeros(n + 1, dtype=np.uint64)
    np.cumsum(counts, out=row_offsets[1:])
    return CsrGraph(row_offsets, col, feature_len_in, feature_len_out)


def graph_stats(g: CsrGraph) -> GraphStats:
    deg = g.in_degrees()
    avg = Fraction(g.num_edges, g.num_vertices) if g.num_vertices else Fraction(0)
    return GraphStats(
        avg_degree=avg,
        max_degree=int(deg.max()) if len(deg) else 0,
        topology_bytes=g.num_edges * ELEMENT_BYTES,
        feature_bytes=g.num_vertices * g.feature_len_in * ELEMENT_BYTES,
    )
