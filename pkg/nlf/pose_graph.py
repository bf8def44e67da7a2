"""Confidence-aware pose graph over LiDAR frames.

Edges come from coarse-to-fine mutual-nearest-neighbour matching of hybrid
features; each edge is weighted by how well its correspondences preserve
pairwise distances. The graph loss is an edge-weighted Chamfer distance between
posed clouds and only moves the pose parameters.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .autodiff import Tensor
from .errors import GeometryError
from .se3 import PoseParams, transform_points
from .types import EdgeKind, MatchStage

logger = logging.getLogger(__name__)

BRUTE_FORCE_PAIRS = 1 << 18


@dataclass
class CorrespondenceSet:
    pairs: np.ndarray
    stage: MatchStage

    def __post_init__(self) -> None:
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.pairs)

    def is_bijective(self) -> bool:
        return len(np.unique(self.pairs[:, 0])) == len(self) and len(np.unique(self.pairs[:, 1])) == len(self)

    def swapped(self) -> CorrespondenceSet:
        pairs = self.pairs[:, ::-1]
        return CorrespondenceSet(pairs[np.argsort(pairs[:, 0], kind="stable")], self.stage)


@dataclass
class GraphEdge:
    i: int
    j: int
    compatibility: float
    weight: float
    kind: EdgeKind
    n_pairs: int = 0

    def record(self) -> dict:
        out = asdict(self)
        out["kind"] = self.kind.value
        out["alpha"] = out.pop("weight")
        return out


@dataclass
class PoseGraph:
    n_vertices: int
    edges: list[GraphEdge] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.edges)

    @property
    def loops(self) -> list[GraphEdge]:
        return [e for e in self.edges if e.kind is EdgeKind.loop]

    def is_connected(self) -> bool:
        seen = {0}
        frontier = [0]
        adj: dict[int, set[int]] = {}
        for e in self.edges:
            adj.setdefault(e.i, set()).add(e.j)
            adj.setdefault(e.j, set()).add(e.i)
        while frontier:
            v = frontier.pop()
            for w in adj.get(v, ()):
                if w not in seen:
                    seen.add(w)
                    frontier.append(w)
        return len(seen) == self.n_vertices

    def jsonl(self) -> str:
        return "".join(json.dumps(e.record(), sort_keys=True) + "\n" for e in self.edges)


def _as_features(f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    return f.reshape(len(f), -1)


def mnn_match(feats_i: np.ndarray, feats_j: np.ndarray) -> CorrespondenceSet:
    """Mutual nearest neighbours under L2; ties resolve to the lowest index."""

    fi, fj = _as_features(feats_i), _as_features(feats_j)
    if len(fi) == 0 or len(fj) == 0:
        return CorrespondenceSet(np.zeros((0, 2)), MatchStage.coarse)
    d = cdist(fi, fj, "sqeuclidean")
    nn_ij = d.argmin(axis=1)
    nn_ji = d.argmin(axis=0)
    m = np.flatnonzero(nn_ji[nn_ij] == np.arange(len(fi)))
    return CorrespondenceSet(np.stack([m, nn_ij[m]], axis=1), MatchStage.coarse)


def refine_match(coarse: CorrespondenceSet, feats_i: np.ndarray, feats_j: np.ndarray) -> CorrespondenceSet:
    """MNN again, restricted to the points that took part in ``coarse``."""

    if len(coarse) == 0:
        return CorrespondenceSet(np.zeros((0, 2)), MatchStage.fine)
    sub_i = np.unique(coarse.pairs[:, 0])
    sub_j = np.unique(coarse.pairs[:, 1])
    local = mnn_match(_as_features(feats_i)[sub_i], _as_features(feats_j)[sub_j])
    pairs = np.stack([sub_i[local.pairs[:, 0]], sub_j[local.pairs[:, 1]]], axis=1)
    return CorrespondenceSet(pairs, MatchStage.fine)


def edge_compatibility(fine: CorrespondenceSet, feats_i: np.ndarray, feats_j: np.ndarray) -> float:
    """Mean cosine similarity over matched pairs; -1 when nothing usable is matched."""

    if len(fine) == 0:
        return -1.0
    a = _as_features(feats_i)[fine.pairs[:, 0]]
    b = _as_features(feats_j)[fine.pairs[:, 1]]
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    ok = (na > 0.0) & (nb > 0.0)
    if not np.any(ok):
        return -1.0
    cos = np.sum(a[ok] * b[ok], axis=1) / (na[ok] * nb[ok])
    return float(np.clip(cos.mean(), -1.0, 1.0))


def spatial_consistency(
    fine: CorrespondenceSet, points_i: np.ndarray, points_j: np.ndarray, tau_d: float
) -> tuple[np.ndarray, float]:
    """Per-pair share of other pairs whose mutual distance agrees within tau_d, and its mean."""

    n = len(fine)
    if n < 2:
        return np.zeros(n), 0.0
    a = np.asarray(points_i, dtype=np.float64)[fine.pairs[:, 0]]
    b = np.asarray(points_j, dtype=np.float64)[fine.pairs[:, 1]]
    agree = np.abs(cdist(a, a) - cdist(b, b)) < tau_d
    np.fill_diagonal(agree, False)
    P = agree.sum(axis=1) / (n - 1)
    return P, float(P.mean())


def build_graph(
    points: Sequence[np.ndarray],
    features: Sequence[np.ndarray],
    edge_threshold: float,
    tau_d: float,
) -> PoseGraph:
    """All sequential edges plus non-adjacent pairs whose compatibility beats ``edge_threshold``."""

    n = len(points)
    if n < 2 or len(features) != n:
        raise GeometryError(f"pose graph needs >= 2 frames with features, got {n} clouds / {len(features)} feature sets")
    graph = PoseGraph(n)
    for i in range(n):
        for j in range(i + 1, n):
            sequential = j == i + 1
            coarse = mnn_match(features[i], features[j])
            fine = refine_match(coarse, features[i], features[j])
            compat = edge_compatibility(fine, features[i], features[j])
            if not sequential and not compat > edge_threshold:
                continue
            _, alpha = spatial_consistency(fine, points[i], points[j], tau_d)
            kind = EdgeKind.sequential if sequential else EdgeKind.loop
            graph.edges.append(GraphEdge(i, j, compat, alpha, kind, len(fine)))
    logger.debug(
        "pose graph: %d edges (%d loops) at threshold %.3f", len(graph.edges), len(graph.loops), edge_threshold
    )
    return graph


def nearest_neighbors(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Index into ``ref`` of each query point's nearest neighbour (ties: lowest index when brute force)."""

    if len(query) * len(ref) <= BRUTE_FORCE_PAIRS:
        return cdist(query, ref, "sqeuclidean").argmin(axis=1)
    _, idx = cKDTree(ref).query(query)
    return np.asarray(idx, dtype=np.int64)


def chamfer_tensor(a: Tensor, b: Tensor) -> Tensor:
    """Symmetric mean squared NN distance; NN assignment is fixed, distances differentiate."""

    if a.shape[0] == 0 or b.shape[0] == 0:
        raise GeometryError("chamfer distance of an empty cloud")
    nn_ab = nearest_neighbors(a.data, b.data)
    nn_ba = nearest_neighbors(b.data, a.data)
    d_ab = ((a - ad.take(b, nn_ab)) ** 2).sum(axis=1).mean()
    d_ba = ((b - ad.take(a, nn_ba)) ** 2).sum(axis=1).mean()
    return d_ab + d_ba


def chamfer(ci: np.ndarray, cj: np.ndarray) -> float:
    points_i = getattr(ci, "points", ci)
    points_j = getattr(cj, "points", cj)
    with ad.no_grad():
        return chamfer_tensor(Tensor(points_i), Tensor(points_j)).item()


def graph_loss(graph: PoseGraph, clouds: Sequence[np.ndarray], poses: PoseParams) -> Tensor:
    """sum over edges of alpha_ij * chamfer(T_i S_i, T_j S_j) for sensor-frame clouds S."""

    if len(graph) == 0:
        raise GeometryError("graph loss over an empty graph")
    total: Tensor = Tensor(0.0)
    cache: dict[int, Tensor] = {}

    def posed(k: int) -> Tensor:
        if k not in cache:
            R, t = poses.tensors(k)
            cache[k] = transform_points(R, t, clouds[k])
        return cache[k]

    for e in graph.edges:
        if e.weight <= 0.0:
            continue
        total = total + e.weight * chamfer_tensor(posed(e.i), posed(e.j))
    return total


def write_graph(path: str | Path, graph: PoseGraph, *, append: bool = True) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("a" if append else "w") as fh:
        fh.write(graph.jsonl())
    return p
