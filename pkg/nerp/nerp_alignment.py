from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from nerp.configs import EdgeTopology
from nerp.nerp_configs import SUCCESS_TOLERANCE, GraphConfig
from nerp.nerp_exceptions import CountMismatch, InvalidScene, NonFinite, ShapeMismatch
from nerp.nerp_scene import Scene

TIE_TOLERANCE = 1e-12


@dataclass(frozen=True)
class Assignment:
    perm: Tuple[int, ...]
    total_cost: float

    def __len__(self) -> int:
        return len(self.perm)


def similarity(current_feats, target_feats) -> np.ndarray:
    """s[i][j] = ||w_i - w'_j||_2 between current-view and target-view descriptors."""
    a = np.atleast_2d(np.asarray(current_feats, dtype=np.float64))
    b = np.atleast_2d(np.asarray(target_feats, dtype=np.float64))
    if a.shape[0] < 1 or a.shape != b.shape:
        raise ShapeMismatch(f"similarity: descriptor sets {a.shape} and {b.shape} differ")
    return cdist(a, b, metric="euclidean")


def _optimal_cost(s: np.ndarray) -> float:
    if s.size == 0:
        return 0.0
    rows, cols = linear_sum_assignment(s)
    return float(s[rows, cols].sum())


def hungarian(s) -> Assignment:
    """
    Minimum-cost bijection. Among optimal permutations the lexicographically smallest
    one is returned: each row takes the smallest column that still admits an optimal
    completion of the remaining rows.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ShapeMismatch(f"hungarian: cost matrix must be square, got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise NonFinite("hungarian: cost matrix has non-finite entries")
    n = s.shape[0]
    best = _optimal_cost(s)
    slack = TIE_TOLERANCE * max(1.0, abs(best))
    free = list(range(n))
    fixed = 0.0
    perm: List[int] = []
    for row in range(n):
        rest_rows = list(range(row + 1, n))
        for col in free:
            remaining = [c for c in free if c != col]
            sub = s[np.ix_(rest_rows, remaining)]
            if fixed + s[row, col] + _optimal_cost(sub) <= best + slack:
                perm.append(col)
                fixed += s[row, col]
                free = remaining
                break
    total = float(sum(s[i, perm[i]] for i in range(n)))
    return Assignment(perm=tuple(int(j) for j in perm), total_cost=total)


@dataclass(frozen=True, eq=False)
class RearrGraph:
    """Vertices V^i = (current centroid, assigned target centroid), undirected edges i < j."""

    vertices: np.ndarray
    edges: Tuple[Tuple[int, int], ...]
    object_ids: Tuple[int, ...]

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def current(self) -> np.ndarray:
        return self.vertices[:, :3]

    @property
    def target(self) -> np.ndarray:
        return self.vertices[:, 3:]

    def offsets(self) -> np.ndarray:
        return np.linalg.norm(self.target - self.current, axis=1)

    def goal_delta(self, i: int) -> np.ndarray:
        return self.target[i] - self.current[i]

    def misplaced(self, tol: float = SUCCESS_TOLERANCE) -> List[int]:
        return [int(i) for i in np.flatnonzero(self.offsets() > tol)]

    def moved(self, i: int, delta) -> "RearrGraph":
        vertices = self.vertices.copy()
        vertices[i, :3] += np.asarray(delta, dtype=np.float64)
        return RearrGraph(vertices=vertices, edges=self.edges, object_ids=self.object_ids)

    def permuted(self, order: Sequence[int]) -> "RearrGraph":
        """Relabel vertices: new vertex k is old vertex order[k]."""
        inverse = {old: new for new, old in enumerate(order)}
        edges = tuple(
            sorted(tuple(sorted((inverse[i], inverse[j]))) for i, j in self.edges)  # type: ignore
        )
        return RearrGraph(
            vertices=self.vertices[list(order)],
            edges=edges,
            object_ids=tuple(self.object_ids[k] for k in order),
        )

    def validate(self, current: Optional[Scene] = None) -> "RearrGraph":
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 6:
            raise ShapeMismatch(f"Graph vertices must be N x 6, got {self.vertices.shape}")
        if len(self.object_ids) != self.num_vertices:
            raise CountMismatch("Graph object ids do not match its vertices")
        for i, j in self.edges:
            if not (0 <= i <= j < self.num_vertices):
                raise InvalidScene(f"Edge ({i}, {j}) is not a canonical vertex pair")
        if current is not None:
            for k, object_id in enumerate(self.object_ids):
                if np.abs(self.current[k] - current.get(object_id).centroid).max() > 1e-9:
                    raise InvalidScene(f"Vertex {k} does not match object {object_id}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            "vertices": self.vertices.tolist(),
            "edges": [list(e) for e in self.edges],
            "object_ids": list(self.object_ids),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RearrGraph":
        return cls(
            vertices=np.asarray(data["vertices"], dtype=np.float64).reshape(-1, 6),
            edges=tuple((int(i), int(j)) for i, j in data["edges"]),
            object_ids=tuple(int(k) for k in data["object_ids"]),
        )


def _edges(centroids: np.ndarray, cfg: GraphConfig) -> Tuple[Tuple[int, int], ...]:
    n = centroids.shape[0]
    pairs = set()
    if cfg.topology == EdgeTopology.Complete or n - 1 <= cfg.k:
        pairs = {(i, j) for i in range(n) for j in range(i + 1, n)}
    else:
        dist = cdist(centroids[:, :2], centroids[:, :2])
        np.fill_diagonal(dist, np.inf)
        for i in range(n):
            for j in np.argsort(dist[i], kind="stable")[: cfg.k]:
                pairs.add((min(i, int(j)), max(i, int(j))))
    if cfg.self_loops:
        pairs |= {(i, i) for i in range(n)}
    return tuple(sorted(pairs))


def build_graph(
    current: Scene, target: Scene, assignment: Assignment, cfg: Optional[GraphConfig] = None
) -> RearrGraph:
    cfg = cfg or GraphConfig()
    if len(current) != len(target) or len(assignment) != len(current):
        raise CountMismatch(
            f"build_graph: {len(current)} current objects, {len(target)} target objects, "
            f"assignment over {len(assignment)}"
        )
    now = current.centroids
    goal = target.centroids[list(assignment.perm)]
    return RearrGraph(
        vertices=np.concatenate([now, goal], axis=1),
        edges=_edges(now, cfg),
        object_ids=tuple(current.ids),
    )


def ground_truth_assignment(current: Scene, target: Scene) -> Assignment:
    """Pairing by object identity, the perception-free correspondence."""
    if sorted(current.ids) != sorted(target.ids):
        raise CountMismatch(f"Scenes hold different objects: {current.ids} vs {target.ids}")
    perm = tuple(target.index_of(object_id) for object_id in current.ids)
    return Assignment(perm=perm, total_cost=0.0)


def align(
    current: Scene,
    target: Scene,
    current_feats,
    target_feats,
    cfg: Optional[GraphConfig] = None,
) -> Tuple[Assignment, RearrGraph]:
    assignment = hungarian(similarity(current_feats, target_feats))
    return assignment, build_graph(current, target, assignment, cfg)


def correspondence_accuracy(assignment: Assignment, truth: Assignment) -> float:
    if len(assignment) == 0:
        return 1.0
    hits = sum(int(a == b) for a, b in zip(assignment.perm, truth.perm))
    return hits / len(truth)
