import json
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from dbt.adapters.events.logging import AdapterLogger
from sklearn.metrics import roc_auc_score

from nerp.configs import DropoutMode
from nerp.nerp_configs import CollisionTrainConfig, SAConfig, SceneConfig
from nerp.nerp_exceptions import (
    ClassImbalance,
    CorruptRecord,
    DegenerateCloud,
    EmptyDataset,
    NonFiniteLoss,
)
from nerp.nerp_scene import SceneObject, footprint_overlap, make_cloud, sample_shape
from nerp.neural import MLP, Adagrad, Module, Tensor, no_grad
from nerp.neural import functional as F

logger = AdapterLogger("nerp")

DATASET_FORMAT_VERSION = 1
MOVED_MASK = 0.0
OTHER_MASK = 1.0


@dataclass(frozen=True, eq=False)
class MaskedCloud:
    """Joint point set of two objects; mask marks membership (0 moved, 1 other)."""

    points: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return self.points.shape[0]

    def validate(self) -> "MaskedCloud":
        classes = set(np.unique(self.mask).tolist())
        if not classes <= {0.0, 1.0}:
            raise DegenerateCloud(f"Mask values must be 0 or 1, found {sorted(classes)}")
        if len(classes) < 2:
            raise DegenerateCloud("A masked cloud needs points of both objects")
        return self

    def translated(self, offset) -> "MaskedCloud":
        return MaskedCloud(self.points + np.asarray(offset, dtype=np.float64), self.mask)

    def as_rows(self) -> np.ndarray:
        return np.concatenate([self.points, self.mask[:, None]], axis=1)


def _subsample(cloud: np.ndarray, count: int, rng: Optional[np.random.Generator]) -> np.ndarray:
    if rng is not None:
        return cloud[rng.choice(cloud.shape[0], size=count, replace=cloud.shape[0] < count)]
    index = np.round(np.linspace(0, cloud.shape[0] - 1, count)).astype(np.int64)
    return cloud[index]


def canonical_order(points: np.ndarray) -> np.ndarray:
    """Lexicographic (x, y, z) order, so the lexicographic minimum becomes index 0."""
    return np.lexsort((points[:, 2], points[:, 1], points[:, 0]))


def make_masked_cloud(
    moved_cloud: np.ndarray,
    other_cloud: np.ndarray,
    n: int = 512,
    rng: Optional[np.random.Generator] = None,
) -> MaskedCloud:
    """
    Joint subsample of n points, n/2 from each object. Without an rng the subsample
    and ordering are canonical; with one they are random (training augmentation).
    """
    half = n // 2
    points = np.concatenate(
        [_subsample(moved_cloud, half, rng), _subsample(other_cloud, n - half, rng)]
    )
    mask = np.concatenate([np.full(half, MOVED_MASK), np.full(n - half, OTHER_MASK)])
    order = rng.permutation(n) if rng is not None else canonical_order(points)
    return MaskedCloud(points=points[order], mask=mask[order])


def fps(points: np.ndarray, ratio: float) -> np.ndarray:
    """Farthest point sampling of ceil(ratio * n) indices, seeded at index 0."""
    return fps_batch(np.asarray(points, dtype=np.float64)[None], ratio)[0]


def fps_batch(xyz: np.ndarray, ratio: float) -> np.ndarray:
    b, n, _ = xyz.shape
    npoint = min(n, int(math.ceil(ratio * n - 1e-9)))
    rows = np.arange(b)
    chosen = np.zeros((b, npoint), dtype=np.int64)
    distance = np.full((b, n), np.inf)
    farthest = np.zeros(b, dtype=np.int64)
    for k in range(npoint):
        chosen[:, k] = farthest
        d = ((xyz - xyz[rows, farthest][:, None, :]) ** 2).sum(axis=-1)
        distance = np.minimum(distance, d)
        farthest = distance.argmax(axis=1)
    return chosen


def _group_padded(
    xyz: np.ndarray, centers: np.ndarray, radius: float, max_neighbors: int
) -> np.ndarray:
    """B x S x K neighbour indices, nearest first, centre first, padded with the centre."""
    b, n, _ = xyz.shape
    rows = np.arange(b)[:, None]
    center_xyz = xyz[rows, centers]
    d = ((center_xyz[:, :, None, :] - xyz[:, None, :, :]) ** 2).sum(axis=-1)
    d[d > radius * radius] = np.inf
    s = centers.shape[1]
    d[rows[:, :, None], np.arange(s)[None, :, None], centers[:, :, None]] = -1.0
    k = min(max_neighbors, n)
    order = np.argsort(d, axis=-1, kind="stable")[:, :, :k]
    outside = np.isinf(np.take_along_axis(d, order, axis=-1))
    return np.where(outside, centers[:, :, None], order)


def ball_group(
    centers: Sequence[int], points: np.ndarray, radius: float, max_neighbors: int
) -> List[np.ndarray]:
    """Per centre index: points within `radius`, nearest first, capped, centre always included."""
    points = np.asarray(points, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.int64)
    groups = []
    for c in centers:
        d = ((points - points[c]) ** 2).sum(axis=1)
        d[c] = -1.0
        inside = np.flatnonzero(d <= radius * radius)
        inside = inside[np.argsort(d[inside], kind="stable")]
        groups.append(inside[:max_neighbors])
    return groups


class CollisionNet(Module):
    """Set-abstraction classifier u_xi over a masked joint cloud."""

    def __init__(self, cfg: Optional[SAConfig] = None, seed: int = 0) -> None:
        self.cfg = cfg or SAConfig()
        rng = np.random.default_rng(seed)
        self.sa = [MLP(layer.widths, rng, relu_last=True) for layer in self.cfg.layers]
        self.global_sa = MLP(self.cfg.global_widths, rng, relu_last=True)
        self.head = MLP(self.cfg.head_widths, rng, output="sigmoid")

    def forward(self, points: np.ndarray, mask: np.ndarray) -> Tensor:
        """points B x n x 3, mask B x n -> scores B x 1."""
        xyz = np.asarray(points, dtype=np.float64)
        b, n, _ = xyz.shape
        feats = Tensor(np.asarray(mask, dtype=np.float64).reshape(b * n, 1))
        for layer_cfg, mlp in zip(self.cfg.layers, self.sa):
            centers = fps_batch(xyz, layer_cfg.ratio)
            groups = _group_padded(xyz, centers, layer_cfg.radius, layer_cfg.max_neighbors)
            s, k = groups.shape[1], groups.shape[2]
            rows = np.arange(b)[:, None, None]
            new_xyz = xyz[np.arange(b)[:, None], centers]
            rel = (xyz[rows, groups] - new_xyz[:, :, None, :]).reshape(-1, 3)
            gathered = F.gather_rows(feats, (rows * n + groups).reshape(-1))
            hidden = mlp(F.concat([Tensor(rel), gathered], axis=1))
            feats = F.max_aggregate(hidden, np.arange(b * s * k).reshape(b * s, k))
            xyz, n = new_xyz, s
        rel = (xyz - xyz.mean(axis=1, keepdims=True)).reshape(-1, 3)
        hidden = self.global_sa(F.concat([Tensor(rel), feats], axis=1))
        pooled = F.max_aggregate(hidden, np.arange(b * n).reshape(b, n))
        return self.head(pooled, DropoutMode.Eval)

    def score(self, clouds: Sequence[MaskedCloud], chunk: int = 64) -> np.ndarray:
        """Inference in chunks, each cloud put in canonical order first."""
        out = np.zeros(len(clouds))
        with no_grad():
            for start in range(0, len(clouds), chunk):
                part = clouds[start : start + chunk]
                orders = [canonical_order(c.points) for c in part]
                points = np.stack([c.points[o] for c, o in zip(part, orders)])
                mask = np.stack([c.mask[o] for c, o in zip(part, orders)])
                out[start : start + len(part)] = self.forward(points, mask).data[:, 0]
        return out


def collision_score(x: MaskedCloud, net: CollisionNet) -> float:
    x.validate()
    return float(net.score([x])[0])


class CollisionChecker(Protocol):
    def pair_scores(
        self, moved: Sequence[SceneObject], others: Sequence[SceneObject]
    ) -> np.ndarray:
        """len(moved) x len(others) collision scores in [0, 1]."""
        ...


def is_free(
    checker: CollisionChecker, obj: SceneObject, others: Sequence[SceneObject], epsilon: float
) -> bool:
    if not others:
        return True
    return bool(checker.pair_scores([obj], others).max() < epsilon)


class OracleCollisionChecker:
    """Exact footprint oracle scoring 1.0 on overlap and 0.0 otherwise."""

    def __init__(self, margin: float = 0.005) -> None:
        self.margin = margin

    def pair_scores(
        self, moved: Sequence[SceneObject], others: Sequence[SceneObject]
    ) -> np.ndarray:
        return np.array(
            [[float(footprint_overlap(a, b, self.margin)) for b in others] for a in moved]
        ).reshape(len(moved), len(others))


def _cloud_radius(obj: SceneObject) -> float:
    return float(np.linalg.norm(obj.cloud[:, :2] - obj.cloud[:, :2].mean(axis=0), axis=1).max())


class LearnedCollisionChecker:
    """
    Scores pairs with a trained CollisionNet. Pairs whose bounding circles are more
    than `broad_factor` times their summed radii apart score 0 without a forward pass.
    """

    def __init__(self, net: CollisionNet, broad_factor: float = 2.0, chunk: int = 64) -> None:
        self.net = net
        self.broad_factor = broad_factor
        self.chunk = chunk
        self.forward_passes = 0

    def pair_scores(
        self, moved: Sequence[SceneObject], others: Sequence[SceneObject]
    ) -> np.ndarray:
        scores = np.zeros((len(moved), len(others)))
        pending: List[Tuple[int, int]] = []
        clouds: List[MaskedCloud] = []
        other_radii = [_cloud_radius(o) for o in others]
        for a, obj in enumerate(moved):
            ra = _cloud_radius(obj)
            for c, other in enumerate(others):
                gap = np.linalg.norm(obj.cloud[:, :2].mean(0) - other.cloud[:, :2].mean(0))
                if gap > self.broad_factor * (ra + other_radii[c]):
                    continue
                pending.append((a, c))
                clouds.append(make_masked_cloud(obj.cloud, other.cloud, self.net.cfg.n_points))
        if clouds:
            self.forward_passes += len(clouds)
            values = self.net.score(clouds, self.chunk)
            for (a, c), v in zip(pending, values):
                scores[a, c] = v
        return scores


def generate_collision_dataset(
    num_pairs: int,
    rng: np.random.Generator,
    scene_cfg: Optional[SceneConfig] = None,
    n_points: int = 512,
    augment: bool = True,
) -> List[Tuple[MaskedCloud, int]]:
    """
    Balanced (MaskedCloud, label) pairs labelled by the footprint oracle. Labels
    alternate and offsets are resampled until the oracle agrees, so exactly half
    of the records are colliding.
    """
    scene_cfg = scene_cfg or SceneConfig()
    records = []
    for k in range(num_pairs):
        want = k % 2 == 0
        a_shape, b_shape = sample_shape(scene_cfg, rng), sample_shape(scene_cfg, rng)
        reach = a_shape.bounding_radius + b_shape.bounding_radius + scene_cfg.margin
        a = SceneObject(0, a_shape, np.array([0.0, 0.0, a_shape.half_height]), None, None)
        while True:
            theta = rng.uniform(0.0, 2 * np.pi)
            dist = rng.uniform(0.0, 2.0 * reach)
            b_pos = np.array([dist * np.cos(theta), dist * np.sin(theta), b_shape.half_height])
            b = SceneObject(1, b_shape, b_pos, None, None)
            if footprint_overlap(a, b, scene_cfg.margin) == want:
                break
        a_cloud = make_cloud(a_shape, a.position, int(rng.integers(2**31 - 1)), scene_cfg.n_pts)
        b_cloud = make_cloud(b_shape, b_pos, int(rng.integers(2**31 - 1)), scene_cfg.n_pts)
        cloud = make_masked_cloud(a_cloud, b_cloud, n_points, rng if augment else None)
        records.append((cloud, int(want)))
    return records


def _record_dtype(n_points: int) -> np.dtype:
    return np.dtype([("cloud", "<f8", (n_points, 4)), ("label", "u1")])


def write_collision_dataset(
    path: str, records: Sequence[Tuple[MaskedCloud, int]], meta: Optional[Dict[str, Any]] = None
) -> str:
    """Binary records (n x 4 float rows, 1 label byte) plus a JSON sidecar; returns its path."""
    n_points = len(records[0][0]) if records else 0
    table = np.zeros(len(records), dtype=_record_dtype(n_points))
    for k, (cloud, label) in enumerate(records):
        table[k]["cloud"] = cloud.as_rows()
        table[k]["label"] = label
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    table.tofile(path)
    sidecar = f"{path}.json"
    with open(sidecar, "w") as f:
        json.dump(
            {
                "format_version": DATASET_FORMAT_VERSION,
                "n_points": n_points,
                "count": len(records),
                "positives": int(sum(label for _, label in records)),
                "meta": meta or {},
            },
            f,
            sort_keys=True,
            indent=2,
        )
    logger.info(f"Wrote {len(records)} collision records to {path}")
    return sidecar


def read_collision_dataset(path: str) -> Tuple[List[Tuple[MaskedCloud, int]], Dict[str, Any]]:
    with open(f"{path}.json") as f:
        sidecar = json.load(f)
    if sidecar.get("format_version") != DATASET_FORMAT_VERSION:
        raise CorruptRecord(path, 0, f"unsupported format {sidecar.get('format_version')}")
    raw = np.fromfile(path, dtype=_record_dtype(sidecar["n_points"]))
    if raw.shape[0] != sidecar["count"]:
        raise CorruptRecord(path, raw.shape[0], f"expected {sidecar['count']} records")
    records = []
    for k, row in enumerate(raw):
        if row["label"] > 1:
            raise CorruptRecord(path, k, f"label {row['label']} is not binary")
        cloud = row["cloud"]
        records.append((MaskedCloud(cloud[:, :3].copy(), cloud[:, 3].copy()), int(row["label"])))
    return records, sidecar


@dataclass
class CollisionTrainResult:
    net: CollisionNet
    accuracy: float
    auc: float
    history: List[Dict[str, float]] = field(default_factory=list)


def classification_metrics(scores: np.ndarray, labels: np.ndarray) -> Tuple[float, float]:
    if labels.size == 0:
        return float("nan"), float("nan")
    accuracy = float(np.mean((scores >= 0.5) == (labels == 1)))
    if len(np.unique(labels)) < 2:
        return accuracy, float("nan")
    return accuracy, float(roc_auc_score(labels, scores))


def train_collision(
    dataset: Sequence[Tuple[MaskedCloud, int]],
    cfg: Optional[CollisionTrainConfig] = None,
    sa_cfg: Optional[SAConfig] = None,
) -> CollisionTrainResult:
    cfg = cfg or CollisionTrainConfig()
    if len(dataset) == 0:
        raise EmptyDataset("Cannot train the collision network on an empty dataset")
    labels = np.array([label for _, label in dataset], dtype=np.float64)
    positive = float(labels.mean())
    if not cfg.balance_low <= positive <= cfg.balance_high:
        raise ClassImbalance(positive, cfg.balance_low, cfg.balance_high)

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(dataset))
    n_val = max(1, int(round(cfg.val_fraction * len(dataset)))) if len(dataset) > 1 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        raise EmptyDataset("Collision dataset too small to hold out a validation split")

    net = CollisionNet(sa_cfg, seed=cfg.seed)
    optimizer = Adagrad(net.parameters(), cfg.adagrad)
    val_clouds = [dataset[k][0].validate() for k in val_idx]
    history = []
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        shuffled = train_idx[rng.permutation(train_idx.size)]
        for start in range(0, shuffled.size, cfg.batch_size):
            batch = shuffled[start : start + cfg.batch_size]
            points = np.stack([dataset[k][0].points for k in batch])
            mask = np.stack([dataset[k][0].mask for k in batch])
            loss = F.bce(net.forward(points, mask), labels[batch][:, None])
            if not np.isfinite(loss.data):
                raise NonFiniteLoss(f"collision batch {start} of epoch {epoch}", loss.item())
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        accuracy, auc = classification_metrics(net.score(val_clouds), labels[val_idx])
        history.append(
            {"epoch": epoch, "loss": float(np.mean(losses)), "accuracy": accuracy, "auc": auc}
        )
        logger.info(
            f"Collision epoch {epoch}: loss={np.mean(losses):.4f} "
            f"val_accuracy={accuracy:.3f} val_auc={auc:.3f}"
        )
    return CollisionTrainResult(net=net, accuracy=accuracy, auc=auc, history=history)
