"""Molecular graph construction under distance, k-nearest and Voronoi cutoffs.

Edges are directed (sender -> receiver) and may point at periodic images,
including images of the receiving atom itself. Every edge carries its
interatomic distance and the radial-basis expansion of that distance.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, GraphError
from .structures import AtomicStructure, image_displacements
from .voronoi import clip_cell, points_collinear


@dataclass(frozen=True)
class RbfConfig:
    """Gaussian distance expansion: centers -mu_min + k*delta for k = 0..k_max."""

    mu_min: float = 0.0
    delta: float = 0.1
    k_max: int = 150

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.k_max < 0:
            raise ValueError("k_max must be non-negative")

    @property
    def n_features(self) -> int:
        return self.k_max + 1

    def centers(self) -> np.ndarray:
        return -self.mu_min + self.delta * np.arange(self.k_max + 1, dtype=np.float64)


def rbf_expand(distance, config: RbfConfig) -> np.ndarray:
    """Expand distances into exp(-(d - center)^2 / delta) per basis center.

    A scalar yields a vector of length k_max + 1; an array of E distances
    yields an E x (k_max + 1) matrix. All components lie in (0, 1].
    """
    d = np.asarray(distance, dtype=np.float64)
    scalar = d.ndim == 0
    d = np.atleast_1d(d)
    if np.any(d <= 0):
        raise ValueError("distances must be positive")
    out = np.exp(-((d[:, None] - config.centers()[None, :]) ** 2) / config.delta)
    return out[0] if scalar else out


@dataclass(frozen=True)
class CutoffPolicy:
    """Which atom pairs exchange messages: fixed radius, k nearest, or Voronoi."""

    kind: str
    r: float | None = None
    k: int | None = None

    def __post_init__(self):
        if self.kind == "distance":
            if self.r is None or not self.r > 0:
                raise ValueError("distance policy needs r > 0")
        elif self.kind == "knearest":
            if self.k is None or self.k < 1:
                raise ValueError("knearest policy needs k >= 1")
        elif self.kind != "voronoi":
            raise ValueError(f"unknown cutoff policy {self.kind!r}")

    @classmethod
    def distance(cls, r: float) -> "CutoffPolicy":
        return cls("distance", r=float(r))

    @classmethod
    def k_nearest(cls, k: int) -> "CutoffPolicy":
        return cls("knearest", k=int(k))

    @classmethod
    def voronoi(cls) -> "CutoffPolicy":
        return cls("voronoi")

    @classmethod
    def parse(cls, text: str) -> "CutoffPolicy":
        kind, _, param = text.strip().partition(":")
        kind = kind.lower()
        try:
            if kind == "distance":
                return cls.distance(float(param))
            if kind == "knearest":
                return cls.k_nearest(int(param))
            if kind == "voronoi":
                return cls.voronoi()
        except ValueError as exc:
            raise ValueError(f"bad cutoff policy {text!r}: {exc}") from None
        raise ValueError(f"unknown cutoff policy {text!r}")

    def param_label(self) -> str:
        if self.kind == "distance":
            return f"{self.r:g}"
        if self.kind == "knearest":
            return str(self.k)
        return ""

    def __str__(self) -> str:
        label = self.param_label()
        return f"{self.kind}:{label}" if label else self.kind


@dataclass
class MolecularGraph:
    """Directed graph over atoms (or a disjoint union of several molecules)."""

    node_species: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_offset: np.ndarray
    edge_distance: np.ndarray
    edge_features: np.ndarray
    segment_ids: np.ndarray
    n_graphs: int
    rbf: RbfConfig
    unbounded_cells: int = 0

    @property
    def n_nodes(self) -> int:
        return len(self.node_species)

    @property
    def n_edges(self) -> int:
        return len(self.edge_src)

    def in_degrees(self) -> np.ndarray:
        return np.bincount(self.edge_dst, minlength=self.n_nodes)

    def iter_edges(self):
        for s, d, off, dist in zip(
            self.edge_src, self.edge_dst, self.edge_offset, self.edge_distance
        ):
            yield int(s), int(d), tuple(int(o) for o in off), float(dist)

    def edge_set(self) -> set[tuple[int, int, tuple[int, int, int]]]:
        return {(s, d, off) for s, d, off, _ in self.iter_edges()}

    def validate(self) -> None:
        n, e = self.n_nodes, self.n_edges
        if self.edge_src.shape != (e,) or self.edge_dst.shape != (e,):
            raise GraphError("edge index shape mismatch")
        if e and (self.edge_src.min() < 0 or self.edge_src.max() >= n):
            raise GraphError("edge source out of range")
        if e and (self.edge_dst.min() < 0 or self.edge_dst.max() >= n):
            raise GraphError("edge target out of range")
        if len(self.edge_set()) != e:
            raise GraphError("duplicate (src, dst, offset) edge")
        if e and not np.all(self.edge_distance > 0):
            raise GraphError("non-positive edge distance")
        if self.edge_features.shape != (e, self.rbf.n_features):
            raise GraphError("edge feature shape mismatch")
        if self.segment_ids.shape != (n,):
            raise GraphError("segment id shape mismatch")
        if np.any(np.diff(self.segment_ids) < 0):
            raise GraphError("segment ids must be non-decreasing")
        if n and (self.segment_ids.min() < 0 or self.segment_ids.max() >= self.n_graphs):
            raise GraphError("segment id out of range")


def _assemble(structure, src, dst, offsets, distances, rbf, unbounded=0) -> MolecularGraph:
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    offsets = np.asarray(offsets, dtype=np.int32).reshape(-1, 3)
    distances = np.asarray(distances, dtype=np.float64)
    order = np.lexsort((offsets[:, 2], offsets[:, 1], offsets[:, 0], src, dst))
    src, dst, offsets, distances = src[order], dst[order], offsets[order], distances[order]
    features = (
        rbf_expand(distances, rbf)
        if len(distances)
        else np.zeros((0, rbf.n_features))
    )
    return MolecularGraph(
        node_species=np.asarray(structure.species, dtype=np.int64),
        edge_src=src,
        edge_dst=dst,
        edge_offset=offsets,
        edge_distance=distances,
        edge_features=features,
        segment_ids=np.zeros(structure.n_atoms, dtype=np.int64),
        n_graphs=1,
        rbf=rbf,
        unbounded_cells=unbounded,
    )


def _edges_distance(structure: AtomicStructure, r: float):
    pairs = image_displacements(structure, r)
    return pairs.neighbor, pairs.center, pairs.offset, pairs.distance


def _knearest_candidates(structure: AtomicStructure, k: int):
    n = structure.n_atoms
    if not structure.periodic:
        if n - 1 < k:
            raise GraphError(
                f"insufficient neighbors: k={k} but only {n - 1} candidates"
            )
        pos = structure.positions
        diam = float(np.linalg.norm(pos[None] - pos[:, None], axis=-1).max())
        return image_displacements(structure, diam + 1e-9)
    volume = abs(np.linalg.det(structure.cell))
    density = n / volume
    r = 1.3 * (3.0 * k / (4.0 * math.pi * density)) ** (1.0 / 3.0) + 1.0
    for _ in range(64):
        pairs = image_displacements(structure, r)
        counts = np.bincount(pairs.center, minlength=n)
        if len(pairs) and counts.min() >= k:
            return pairs
        r *= 1.6
    raise GraphError("k-nearest candidate search did not converge")


def _edges_knearest(structure: AtomicStructure, k: int):
    pairs = _knearest_candidates(structure, k)
    src, dst, offsets, distances = [], [], [], []
    for v in range(structure.n_atoms):
        rows = np.flatnonzero(pairs.center == v)
        # Ties at equal distance resolve to the smaller atom index, then the
        # lexicographically smaller offset.
        off = pairs.offset[rows]
        order = np.lexsort(
            (off[:, 2], off[:, 1], off[:, 0], pairs.neighbor[rows], pairs.distance[rows])
        )
        take = rows[order[:k]]
        src.append(pairs.neighbor[take])
        dst.append(pairs.center[take])
        offsets.append(pairs.offset[take])
        distances.append(pairs.distance[take])
    return (
        np.concatenate(src),
        np.concatenate(dst),
        np.concatenate(offsets),
        np.concatenate(distances),
    )


def _voronoi_directed(structure: AtomicStructure):
    """Per-atom face neighbors as a set of (src, dst, offset) plus a flag count."""
    pos = structure.positions
    n = structure.n_atoms
    found: set[tuple[int, int, tuple[int, int, int]]] = set()
    unbounded_count = 0
    if structure.periodic:
        cell = structure.cell
        signs = np.array(
            [[1, 1, 1], [1, 1, -1], [1, -1, 1], [1, -1, -1]], dtype=np.float64
        )
        diag = float(np.linalg.norm(signs @ cell, axis=1).max())
        r = 1.05 * diag
        for _ in range(8):
            pairs = image_displacements(structure, r)
            results = []
            ok = True
            for v in range(n):
                rows = np.flatnonzero(pairs.center == v)
                disp = pos[pairs.neighbor[rows]] + pairs.offset[rows] @ cell - pos[v]
                cellres = clip_cell(disp, np.full(3, -r), np.full(3, r))
                if cellres.unbounded or 2.0 * cellres.circumradius > r:
                    ok = False
                    break
                results.append((v, rows, cellres.neighbor_indices))
            if ok:
                for v, rows, picked in results:
                    for i in picked:
                        row = rows[i]
                        found.add(
                            (
                                int(pairs.neighbor[row]),
                                v,
                                tuple(int(o) for o in pairs.offset[row]),
                            )
                        )
                break
            r *= 1.8
        else:
            raise GraphError("voronoi construction did not converge")
    else:
        if n < 2:
            raise GraphError("non-periodic voronoi needs at least 2 atoms")
        if n >= 3 and points_collinear(pos):
            raise GraphError("collinear atoms: voronoi cells degenerate")
        # Bounding-box fallback for unbounded hull cells: clip against a box
        # at twice the structure extent and keep faces shared between real
        # atoms. Atoms whose cell still touches the box are flagged.
        lo, hi = pos.min(axis=0), pos.max(axis=0)
        mid, extent = 0.5 * (lo + hi), np.maximum(hi - lo, 1.0)
        box_lo, box_hi = mid - extent, mid + extent
        others = np.arange(n)
        for v in range(n):
            idx = others[others != v]
            cellres = clip_cell(pos[idx] - pos[v], box_lo - pos[v], box_hi - pos[v])
            if cellres.unbounded:
                unbounded_count += 1
            for i in cellres.neighbor_indices:
                found.add((int(idx[i]), v, (0, 0, 0)))
    # Face sharing is symmetric; union with the mirrored edge guards against
    # hairline numerical disagreement between the two clipped cells.
    sym = set(found)
    for s, d, off in found:
        sym.add((d, s, (-off[0], -off[1], -off[2])))
    return sym, unbounded_count


def _edges_voronoi(structure: AtomicStructure):
    edges, unbounded = _voronoi_directed(structure)
    ordered = sorted(edges, key=lambda e: (e[1], e[0], e[2]))
    src = np.array([e[0] for e in ordered], dtype=np.int64)
    dst = np.array([e[1] for e in ordered], dtype=np.int64)
    offsets = np.array([e[2] for e in ordered], dtype=np.int32).reshape(-1, 3)
    pos = structure.positions
    shift = offsets @ structure.cell if structure.periodic else 0.0
    distances = np.linalg.norm(pos[src] + shift - pos[dst], axis=1)
    return src, dst, offsets, distances, unbounded


def build_graph(
    structure: AtomicStructure, policy: CutoffPolicy, rbf: RbfConfig
) -> MolecularGraph:
    """Construct the directed molecular graph for one structure."""
    if policy.kind == "distance":
        src, dst, offsets, distances = _edges_distance(structure, policy.r)
        return _assemble(structure, src, dst, offsets, distances, rbf)
    if policy.kind == "knearest":
        src, dst, offsets, distances = _edges_knearest(structure, policy.k)
        return _assemble(structure, src, dst, offsets, distances, rbf)
    src, dst, offsets, distances, unbounded = _edges_voronoi(structure)
    return _assemble(structure, src, dst, offsets, distances, rbf, unbounded)


def batch_graphs(graphs: list[MolecularGraph]) -> MolecularGraph:
    """Disjoint union with node, edge and graph indices shifted."""
    if not graphs:
        raise ValueError("cannot batch an empty list of graphs")
    rbf = graphs[0].rbf
    for g in graphs[1:]:
        if g.rbf != rbf:
            raise ValueError("graphs in a batch must share the rbf config")
    species, src, dst, offs, dists, feats, segs = [], [], [], [], [], [], []
    node_shift = 0
    graph_shift = 0
    for g in graphs:
        species.append(g.node_species)
        src.append(g.edge_src + node_shift)
        dst.append(g.edge_dst + node_shift)
        offs.append(g.edge_offset)
        dists.append(g.edge_distance)
        feats.append(g.edge_features)
        segs.append(g.segment_ids + graph_shift)
        node_shift += g.n_nodes
        graph_shift += g.n_graphs
    return MolecularGraph(
        node_species=np.concatenate(species),
        edge_src=np.concatenate(src),
        edge_dst=np.concatenate(dst),
        edge_offset=np.concatenate(offs),
        edge_distance=np.concatenate(dists),
        edge_features=np.concatenate(feats),
        segment_ids=np.concatenate(segs),
        n_graphs=graph_shift,
        rbf=rbf,
        unbounded_cells=sum(g.unbounded_cells for g in graphs),
    )


@dataclass(frozen=True)
class GraphStatistics:
    mean_incoming_edges: float
    stddev_incoming_edges: float
    isolated_atom_count: int
    atom_count: int
    unbounded_cell_count: int


def graph_statistics(graphs: list[MolecularGraph]) -> GraphStatistics:
    """Incoming-edge statistics over every atom of a graph dataset."""
    if not graphs:
        raise ValueError("empty dataset")
    degrees = np.concatenate([g.in_degrees() for g in graphs])
    return GraphStatistics(
        mean_incoming_edges=float(degrees.mean()),
        stddev_incoming_edges=float(degrees.std()),
        isolated_atom_count=int((degrees == 0).sum()),
        atom_count=int(len(degrees)),
        unbounded_cell_count=sum(g.unbounded_cells for g in graphs),
    )


def write_statistics_csv(path, rows) -> None:
    """Rows of (policy_kind, param_label, GraphStatistics) to CSV."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("policy,param,mean_incoming,stddev,isolated\n")
        for kind, param, stats in rows:
            fh.write(
                f"{kind},{param},{stats.mean_incoming_edges!r},"
                f"{stats.stddev_incoming_edges!r},{stats.isolated_atom_count}\n"
            )


_CACHE_MAGIC = b"EGRC"
_CACHE_VERSION = 1


def save_graph_cache(path, graphs: list[MolecularGraph], ids: list[str]) -> None:
    """Versioned little-endian binary cache of graphs (features are rebuilt
    from distances on load, so they are not stored)."""
    if len(graphs) != len(ids):
        raise ValueError("one id per graph required")
    rbf = graphs[0].rbf if graphs else RbfConfig()
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<IddII", _CACHE_VERSION, rbf.mu_min, rbf.delta, rbf.k_max, len(graphs)))
        for g, gid in zip(graphs, ids):
            if g.rbf != rbf:
                raise ValueError("all cached graphs must share the rbf config")
            if g.n_graphs != 1:
                raise ValueError("cache stores single graphs, not batches")
            raw = gid.encode("utf-8")
            fh.write(struct.pack("<III", len(raw), g.n_nodes, g.n_edges))
            fh.write(raw)
            fh.write(g.node_species.astype("<u4").tobytes())
            fh.write(g.edge_src.astype("<u4").tobytes())
            fh.write(g.edge_dst.astype("<u4").tobytes())
            fh.write(g.edge_offset.astype("<i4").tobytes())
            fh.write(g.edge_distance.astype("<f8").tobytes())
            fh.write(struct.pack("<I", g.unbounded_cells))


def load_graph_cache(path) -> tuple[list[MolecularGraph], list[str]]:
    with open(path, "rb") as fh:
        if fh.read(4) != _CACHE_MAGIC:
            raise DataError(f"{path}: not a graph cache file")
        version, mu_min, delta, k_max, count = struct.unpack("<IddII", fh.read(28))
        if version != _CACHE_VERSION:
            raise DataError(f"{path}: unsupported cache version {version}")
        rbf = RbfConfig(mu_min, delta, k_max)
        graphs, ids = [], []
        for _ in range(count):
            id_len, n_nodes, n_edges = struct.unpack("<III", fh.read(12))
            ids.append(fh.read(id_len).decode("utf-8"))
            species = np.frombuffer(fh.read(4 * n_nodes), dtype="<u4").astype(np.int64)
            src = np.frombuffer(fh.read(4 * n_edges), dtype="<u4").astype(np.int64)
            dst = np.frombuffer(fh.read(4 * n_edges), dtype="<u4").astype(np.int64)
            offsets = np.frombuffer(fh.read(12 * n_edges), dtype="<i4").reshape(-1, 3)
            distances = np.frombuffer(fh.read(8 * n_edges), dtype="<f8").copy()
            (unbounded,) = struct.unpack("<I", fh.read(4))
            features = (
                rbf_expand(distances, rbf) if n_edges else np.zeros((0, rbf.n_features))
            )
            graphs.append(
                MolecularGraph(
                    node_species=species,
                    edge_src=src,
                    edge_dst=dst,
                    edge_offset=offsets.astype(np.int32),
                    edge_distance=distances,
                    edge_features=features,
                    segment_ids=np.zeros(n_nodes, dtype=np.int64),
                    n_graphs=1,
                    rbf=rbf,
                    unbounded_cells=unbounded,
                )
            )
    return graphs, ids
