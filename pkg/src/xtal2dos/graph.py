"""Crystal graphs, spectra, datasets, and disjoint-union batching.

Node order is never canonicalized: datasets keep whatever order the file or
generator produced, and the encoder is expected to be equivariant to it.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

D_ATOM = 92
N_MAX_NBR = 12
D_EDGE = 41
R_CUT = 8.0
LY_PHDOS = 51
LY_EDOS = 128
N_ELEMENTS = 8
NORMALIZED_GRIDS = ("phdos", "synthetic")
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    """A record or dataset file violates the data contract."""


# ---------------------------------------------------------------- types


@dataclass
class CrystalGraph:
    """Atoms as feature vectors plus directed, distance-labelled neighbor lists.

    ``neighbors[i]`` lists ``(j, distance)`` pairs: node i attends over j.
    """

    id: str
    nodes: np.ndarray
    neighbors: list[list[tuple[int, float]]]

    @property
    def n_atoms(self) -> int:
        return self.nodes.shape[0]

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(dst, src, distance) arrays in neighbor-list order."""
        dst, src, dist = [], [], []
        for i, nbrs in enumerate(self.neighbors):
            for j, d in nbrs:
                dst.append(i)
                src.append(j)
                dist.append(d)
        return (np.asarray(dst, dtype=np.int64), np.asarray(src, dtype=np.int64),
                np.asarray(dist, dtype=np.float64))

    def validate(self, d_atom: int | None = None, n_max_nbr: int = N_MAX_NBR) -> None:
        nodes = self.nodes
        if nodes.ndim != 2 or nodes.shape[0] == 0:
            raise DataError(f"{self.id}: nodes must be a non-empty 2-D array")
        if d_atom is not None and nodes.shape[1] != d_atom:
            raise DataError(f"{self.id}: node features have width {nodes.shape[1]}, expected {d_atom}")
        if not np.all(np.isfinite(nodes)):
            raise DataError(f"{self.id}: non-finite node features")
        n = nodes.shape[0]
        if len(self.neighbors) != n:
            raise DataError(f"{self.id}: {len(self.neighbors)} neighbor lists for {n} nodes")
        for i, nbrs in enumerate(self.neighbors):
            if not 1 <= len(nbrs) <= n_max_nbr:
                raise DataError(f"{self.id}: node {i} has {len(nbrs)} neighbors (allowed 1..{n_max_nbr})")
            for j, d in nbrs:
                if not 0 <= j < n:
                    raise DataError(f"{self.id}: node {i} lists neighbor {j} outside [0, {n})")
                if not (math.isfinite(d) and d > 0):
                    raise DataError(f"{self.id}: node {i} has invalid distance {d!r} to {j}")


@dataclass
class Spectrum:
    values: np.ndarray
    grid: str = "synthetic"

    def validate(self, l_y: int, record: str = "?") -> None:
        v = self.values
        if v.ndim != 1 or v.shape[0] != l_y:
            raise DataError(f"{record}: target has length {v.shape[0] if v.ndim == 1 else v.shape}, expected {l_y}")
        if not np.all(np.isfinite(v)):
            raise DataError(f"{record}: non-finite target value")
        if np.any(v < 0):
            raise DataError(f"{record}: negative target value")
        if self.grid in NORMALIZED_GRIDS and abs(v.sum() - 1.0) > 1e-6:
            raise DataError(f"{record}: {self.grid} target sums to {v.sum():.9g}, expected 1")


@dataclass
class Sample:
    graph: CrystalGraph
    target: Spectrum

    @property
    def id(self) -> str:
        return self.graph.id


@dataclass
class Dataset:
    samples: list[Sample]
    assignments: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def subset(self, name: str) -> list[Sample]:
        if name == "all":
            return list(self.samples)
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        if not self.assignments:
            raise ValueError("dataset has no split assignments; call split() first")
        return [s for s in self.samples if self.assignments[s.id] == name]


# ---------------------------------------------------------------- edge features


def basis_centers(d_edge: int = D_EDGE, r_cut: float = R_CUT) -> np.ndarray:
    return np.linspace(0.0, r_cut, d_edge)


def gaussian_basis_expand(distance, centers: np.ndarray | None = None, width: float | None = None) -> np.ndarray:
    """Expand distances (scalar or array, angstrom) in a Gaussian basis.

    Component k is exp(-(d - c_k)^2 / width^2); the default width is the
    spacing between centers. Far tails are floored at the smallest normal
    float instead of underflowing to zero.
    """
    if centers is None:
        centers = basis_centers()
    if width is None:
        width = float(centers[1] - centers[0])
    d = np.asarray(distance, dtype=np.float64)
    if np.any(~np.isfinite(d)) or np.any(d <= 0):
        raise DataError("distances must be positive and finite")
    out = np.exp(-((d[..., None] - centers) ** 2) / width ** 2)
    return np.maximum(out, np.finfo(np.float64).tiny)


# ---------------------------------------------------------------- serialization


def sample_to_record(sample: Sample) -> dict:
    g = sample.graph
    return {
        "id": g.id,
        "nodes": g.nodes.tolist(),
        "edges": [[[int(j), float(d)] for j, d in nbrs] for nbrs in g.neighbors],
        "target": sample.target.values.tolist(),
        "grid": sample.target.grid,
    }


def save_dataset(path: str | os.PathLike, dataset: Dataset | Iterable[Sample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sample in dataset:
            fh.write(json.dumps(sample_to_record(sample), separators=(",", ":")))
            fh.write("\n")


def record_to_sample(rec: dict, l_y: int, d_atom: int | None, n_max_nbr: int = N_MAX_NBR) -> Sample:
    for key in ("id", "nodes", "edges", "target"):
        if key not in rec:
            raise DataError(f"missing field {key!r}")
    rid = str(rec["id"])
    try:
        nodes = np.asarray(rec["nodes"], dtype=np.float64)
        neighbors = [[(int(j), float(d)) for j, d in nbrs] for nbrs in rec["edges"]]
        values = np.asarray(rec["target"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DataError(f"{rid}: malformed record ({exc})") from None
    graph = CrystalGraph(rid, nodes, neighbors)
    graph.validate(d_atom, n_max_nbr)
    target = Spectrum(values, rec.get("grid", "synthetic"))
    target.validate(l_y, rid)
    return Sample(graph, target)


def load_dataset(path: str | os.PathLike, l_y: int, d_atom: int | None = D_ATOM,
                 n_max_nbr: int = N_MAX_NBR) -> Dataset:
    """Read and validate a JSONL dataset; the first bad record aborts the load."""
    samples = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise DataError("record is not a JSON object")
                sample = record_to_sample(rec, l_y, d_atom, n_max_nbr)
            except (json.JSONDecodeError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if sample.id in seen:
                raise DataError(f"{path}:{lineno}: duplicate record id {sample.id!r}")
            seen.add(sample.id)
            samples.append(sample)
    return Dataset(samples)


# ---------------------------------------------------------------- synthetic data

# Element table: fixed so every seed shares one graph->spectrum map.
_ELEMENT_CENTER = np.linspace(0.15, 0.85, N_ELEMENTS)
_ELEMENT_WIDTH = np.array([0.06, 0.08, 0.05, 0.07, 0.09, 0.06, 0.08, 0.07])
_DISTANCE_SHIFT = 0.05  # grid units per angstrom of mean-neighbor distance
_REFERENCE_DISTANCE = 3.0
_CODE_SCALE = 0.1


def element_codes(d_atom: int = D_ATOM) -> np.ndarray:
    """Feature vector per pseudo-element: one-hot head plus a small fixed code."""
    if d_atom < N_ELEMENTS:
        raise ValueError(f"d_atom must be at least {N_ELEMENTS}")
    rng = np.random.Generator(np.random.PCG64(20_221_101))
    codes = np.zeros((N_ELEMENTS, d_atom))
    codes[:, :N_ELEMENTS] = np.eye(N_ELEMENTS)
    codes[:, N_ELEMENTS:] = _CODE_SCALE * rng.standard_normal((N_ELEMENTS, d_atom - N_ELEMENTS))
    return codes


def atom_elements(nodes: np.ndarray) -> np.ndarray:
    return np.argmax(nodes[:, :N_ELEMENTS], axis=1)


def mean_neighbor_distance(graph: CrystalGraph) -> np.ndarray:
    return np.array([np.mean([d for _, d in nbrs]) for nbrs in graph.neighbors])


def atom_peak(element: int, mean_distance: float, l_y: int) -> np.ndarray:
    """Unnormalized Gaussian bump contributed by one atom."""
    grid = np.linspace(0.0, 1.0, l_y)
    center = _ELEMENT_CENTER[element] + _DISTANCE_SHIFT * (mean_distance - _REFERENCE_DISTANCE)
    center = min(max(center, 0.05), 0.95)
    width = _ELEMENT_WIDTH[element]
    return np.exp(-0.5 * ((grid - center) / width) ** 2)


def synthetic_spectrum(graph: CrystalGraph, l_y: int) -> np.ndarray:
    """The synthetic ground truth: normalized sum of per-atom bumps.

    Each atom's bump is centered by its pseudo-element and shifted by its
    mean neighbor distance, so the map depends on both node features and
    edge geometry.
    """
    elements = atom_elements(graph.nodes)
    dists = mean_neighbor_distance(graph)
    total = np.zeros(l_y)
    for e, d in zip(elements, dists):
        total += atom_peak(int(e), float(d), l_y)
    return total / total.sum()


def _positions(rng: np.random.Generator, n: int, min_dist: float = 1.0) -> np.ndarray:
    box = (12.0 * n) ** (1.0 / 3.0)
    pts: list[np.ndarray] = []
    tries = 0
    while len(pts) < n:
        p = rng.uniform(0.0, box, size=3)
        if all(np.linalg.norm(p - q) >= min_dist for q in pts):
            pts.append(p)
        tries += 1
        if tries > 200 * n:
            box *= 1.1
            tries = 0
    return np.array(pts)


def knn_neighbors(pos: np.ndarray, k: int) -> list[list[tuple[int, float]]]:
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    np.fill_diagonal(dist, np.inf)
    out = []
    for i in range(len(pos)):
        order = np.argsort(dist[i], kind="stable")[:k]
        out.append([(int(j), float(dist[i, j])) for j in order])
    return out


def generate_synthetic(count: int, seed: int, n_range: tuple[int, int] = (4, 20), l_y: int = LY_PHDOS,
                       d_atom: int = D_ATOM, n_max_nbr: int = N_MAX_NBR) -> Dataset:
    """Random crystal-like graphs with targets computed by ``synthetic_spectrum``.

    Sample i draws from its own PCG64 stream keyed by (seed, i), so any
    sample can be regenerated on its own.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    codes = element_codes(d_atom)
    samples = []
    for i in range(count):
        rng = np.random.Generator(np.random.PCG64([seed, i]))
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        elements = rng.integers(0, N_ELEMENTS, size=n)
        pos = _positions(rng, n)
        nbrs = knn_neighbors(pos, min(n_max_nbr, n - 1))
        graph = CrystalGraph(f"syn-{seed}-{i:05d}", codes[elements].copy(), nbrs)
        samples.append(Sample(graph, Spectrum(synthetic_spectrum(graph, l_y), "synthetic")))
    return Dataset(samples)


# ---------------------------------------------------------------- splitting


def split_fraction(sample_id: str, seed: int) -> float:
    digest = hashlib.blake2b(f"{seed}:{sample_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") / 2.0 ** 64


def split(dataset: Dataset, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> Dataset:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {tuple(ratios)}")
    cut_train = ratios[0]
    cut_val = ratios[0] + ratios[1]
    assignments = {}
    for s in dataset.samples:
        u = split_fraction(s.id, seed)
        if u < cut_train:
            assignments[s.id] = "train"
        elif u < cut_val:
            assignments[s.id] = "val"
        else:
            assignments[s.id] = "test"
    return Dataset(dataset.samples, assignments)


# ---------------------------------------------------------------- batching


@dataclass
class GraphBatch:
    """Several graphs merged into one disjoint-union graph.

    Edge arrays index the concatenated node array; ``pad_index``/``pad_mask``
    lay the nodes out as (graphs, max atoms) for source attention, with
    padding slots pointing at row 0 and masked out.
    """

    ids: list[str]
    nodes: np.ndarray
    dst: np.ndarray
    src: np.ndarray
    edge_attr: np.ndarray
    node_graph: np.ndarray
    counts: np.ndarray
    pad_index: np.ndarray
    pad_mask: np.ndarray
    targets: np.ndarray | None

    @property
    def n_graphs(self) -> int:
        return len(self.ids)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]


def collate(samples: Sequence[Sample] | Sequence[CrystalGraph], d_edge: int = D_EDGE,
            r_cut: float = R_CUT) -> GraphBatch:
    graphs = [s.graph if isinstance(s, Sample) else s for s in samples]
    if not graphs:
        raise ValueError("cannot collate an empty batch")
    centers = basis_centers(d_edge, r_cut)
    counts = np.array([g.n_atoms for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    dsts, srcs, dists = [], [], []
    for g, off in zip(graphs, offsets):
        dst, src, dist = g.edge_arrays()
        dsts.append(dst + off)
        srcs.append(src + off)
        dists.append(dist)
    dist = np.concatenate(dists)
    n_max = int(counts.max())
    pad_index = np.zeros((len(graphs), n_max), dtype=np.int64)
    pad_mask = np.zeros((len(graphs), n_max), dtype=bool)
    for b, (off, c) in enumerate(zip(offsets, counts)):
        pad_index[b, :c] = np.arange(off, off + c)
        pad_mask[b, :c] = True
    targets = None
    if isinstance(samples[0], Sample):
        targets = np.stack([s.target.values for s in samples])
    return GraphBatch(
        ids=[g.id for g in graphs],
        nodes=np.concatenate([g.nodes for g in graphs]),
        dst=np.concatenate(dsts),
        src=np.concatenate(srcs),
        edge_attr=gaussian_basis_expand(dist, centers),
        node_graph=np.repeat(np.arange(len(graphs)), counts),
        counts=counts,
        pad_index=pad_index,
        pad_mask=pad_mask,
        targets=targets,
    )
