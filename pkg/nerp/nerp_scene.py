import hashlib
import json
import os
from dataclasses import dataclass, replace
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from dbt.adapters.events.logging import AdapterLogger

from nerp.configs import ShapeKind
from nerp.nerp_configs import SUCCESS_TOLERANCE, FeatureOracleConfig, SceneConfig
from nerp.nerp_exceptions import (
    CountMismatch,
    InvalidScene,
    PlacementExhausted,
    TargetInfeasible,
    UnknownObject,
)

logger = AdapterLogger("nerp")

CENTROID_TOLERANCE = 1e-6
# sampled xy positions live on a dyadic grid so goal - current is exact in float64
PLACEMENT_GRID = 2.0**-20


@dataclass(frozen=True)
class Shape:
    kind: ShapeKind
    height: float
    radius: float = 0.0
    half_extents: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    @classmethod
    def cylinder(cls, radius: float, height: float) -> "Shape":
        return cls(ShapeKind.Cylinder, height=height, radius=radius)

    @classmethod
    def box(cls, hx: float, hy: float, hz: float) -> "Shape":
        return cls(ShapeKind.Box, height=2 * hz, half_extents=(hx, hy, hz))

    @property
    def half_height(self) -> float:
        return self.height / 2

    @property
    def xy_extent(self) -> Tuple[float, float]:
        if self.kind == ShapeKind.Cylinder:
            return self.radius, self.radius
        return self.half_extents[0], self.half_extents[1]

    @property
    def bounding_radius(self) -> float:
        if self.kind == ShapeKind.Cylinder:
            return self.radius
        return float(np.hypot(self.half_extents[0], self.half_extents[1]))

    def check(self) -> None:
        sizes = [self.radius] if self.kind == ShapeKind.Cylinder else list(self.half_extents)
        if min(sizes) <= 0 or self.height <= 0:
            raise InvalidScene(f"{self.kind} dimensions must be positive, got {self}")

    def to_dict(self) -> Dict[str, Any]:
        if self.kind == ShapeKind.Cylinder:
            params = {"radius": self.radius, "height": self.height}
        else:
            params = {"half_extents": list(self.half_extents)}
        return {"kind": str(self.kind), "params": params}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Shape":
        kind = ShapeKind(data["kind"])
        params = data["params"]
        if kind == ShapeKind.Cylinder:
            return cls.cylinder(params["radius"], params["height"])
        return cls.box(*params["half_extents"])

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform samples on the top face and the sides, local frame, centred at zero."""
        h = self.half_height
        if self.kind == ShapeKind.Cylinder:
            r = self.radius
            top_share = r / (r + 2 * self.height)  # pi r^2 / (pi r^2 + 2 pi r H)
            on_top = rng.random(n) < top_share
            theta = rng.uniform(0.0, 2 * np.pi, n)
            rho = np.where(on_top, r * np.sqrt(rng.random(n)), r)
            z = np.where(on_top, h, rng.uniform(-h, h, n))
            points = np.stack([rho * np.cos(theta), rho * np.sin(theta), z], axis=1)
        else:
            hx, hy, hz = self.half_extents
            areas = np.array([hx * hy, hy * hz, hy * hz, hx * hz, hx * hz])
            face = rng.choice(5, size=n, p=areas / areas.sum())
            u, v = rng.uniform(-1.0, 1.0, n), rng.uniform(-1.0, 1.0, n)
            points = np.empty((n, 3))
            table = {
                0: (u * hx, v * hy, np.full(n, hz)),
                1: (np.full(n, hx), u * hy, v * hz),
                2: (np.full(n, -hx), u * hy, v * hz),
                3: (u * hx, np.full(n, hy), v * hz),
                4: (u * hx, np.full(n, -hy), v * hz),
            }
            for f, (x, y, zz) in table.items():
                rows = face == f
                points[rows] = np.stack([x[rows], y[rows], zz[rows]], axis=1)
        return points - points.mean(axis=0)


def snap(xy) -> np.ndarray:
    return np.round(np.asarray(xy, dtype=np.float64) / PLACEMENT_GRID) * PLACEMENT_GRID


def sample_table_position(
    shape: "Shape", table: Tuple[float, float], rng: np.random.Generator
) -> np.ndarray:
    """Uniform footprint-inside-table position on the placement grid."""
    ex, ey = shape.xy_extent
    lo = snap(np.ceil(np.array([ex, ey]) / PLACEMENT_GRID) * PLACEMENT_GRID)
    hi = snap(np.floor((np.array(table) - [ex, ey]) / PLACEMENT_GRID) * PLACEMENT_GRID)
    xy = snap(rng.uniform(lo, hi))
    return np.array([xy[0], xy[1], shape.half_height])


def make_cloud(shape: Shape, position: np.ndarray, cloud_seed: int, n_pts: int) -> np.ndarray:
    """Regenerate an object's cloud; the centroid equals `position`."""
    local = shape.sample_surface(n_pts, np.random.default_rng(cloud_seed))
    return local + np.asarray(position, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class SceneObject:
    id: int
    shape: Shape
    position: np.ndarray
    cloud: np.ndarray
    feature: np.ndarray
    cloud_seed: int = 0

    @property
    def centroid(self) -> np.ndarray:
        return self.cloud.mean(axis=0)

    @property
    def xy(self) -> np.ndarray:
        return self.position[:2]

    def translated(self, delta) -> "SceneObject":
        delta = np.asarray(delta, dtype=np.float64)
        return replace(self, position=self.position + delta, cloud=self.cloud + delta)

    def placed_at(self, position) -> "SceneObject":
        return self.translated(np.asarray(position, dtype=np.float64) - self.position)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": int(self.id),
            "shape": self.shape.to_dict(),
            "position": self.position.tolist(),
            "feature": self.feature.tolist(),
            "cloud_seed": int(self.cloud_seed),
            "n_pts": int(self.cloud.shape[0]),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SceneObject":
        shape = Shape.from_dict(data["shape"])
        position = np.asarray(data["position"], dtype=np.float64)
        return cls(
            id=int(data["id"]),
            shape=shape,
            position=position,
            cloud=make_cloud(shape, position, data["cloud_seed"], data["n_pts"]),
            feature=np.asarray(data["feature"], dtype=np.float64),
            cloud_seed=int(data["cloud_seed"]),
        )


@dataclass(frozen=True, eq=False)
class Scene:
    table: Tuple[float, float]
    objects: Tuple[SceneObject, ...]

    @property
    def ids(self) -> List[int]:
        return [o.id for o in self.objects]

    def __len__(self) -> int:
        return len(self.objects)

    def index_of(self, object_id: int) -> int:
        for i, o in enumerate(self.objects):
            if o.id == object_id:
                return i
        raise UnknownObject(object_id)

    def get(self, object_id: int) -> SceneObject:
        return self.objects[self.index_of(object_id)]

    @property
    def positions(self) -> np.ndarray:
        return np.array([o.position for o in self.objects]).reshape(-1, 3)

    @property
    def centroids(self) -> np.ndarray:
        return np.array([o.centroid for o in self.objects]).reshape(-1, 3)

    def with_object(self, obj: SceneObject) -> "Scene":
        i = self.index_of(obj.id)
        return replace(self, objects=self.objects[:i] + (obj,) + self.objects[i + 1 :])

    def others(self, object_id: int) -> List[SceneObject]:
        return [o for o in self.objects if o.id != object_id]

    def validate(self, margin: float = 0.005) -> "Scene":
        """The Scene invariant checker; returns self so calls can be chained."""
        if not self.objects:
            raise InvalidScene("A scene needs at least one object")
        if len(set(self.ids)) != len(self.ids):
            raise InvalidScene(f"Duplicate object ids in {self.ids}")
        for o in self.objects:
            o.shape.check()
            if o.cloud.size == 0:
                raise InvalidScene(f"Object {o.id} has an empty cloud")
            if np.abs(o.centroid - o.position).max() > CENTROID_TOLERANCE:
                raise InvalidScene(f"Object {o.id} cloud centroid drifted from its position")
            if not fits_table(o, self.table):
                raise InvalidScene(f"Object {o.id} footprint leaves the table")
        for i, a in enumerate(self.objects):
            for b in self.objects[i + 1 :]:
                if footprint_overlap(a, b, margin):
                    raise InvalidScene(f"Objects {a.id} and {b.id} overlap")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            "table": [float(self.table[0]), float(self.table[1])],
            "objects": [o.to_dict() for o in self.objects],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Scene":
        return cls(
            table=(float(data["table"][0]), float(data["table"][1])),
            objects=tuple(SceneObject.from_dict(o) for o in data["objects"]),
        )

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def save_scene(scene: Scene, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(scene.to_dict(), f, sort_keys=True, indent=2)


def load_scene(path: str) -> Scene:
    with open(path) as f:
        return Scene.from_dict(json.load(f))


def fits_table(obj: SceneObject, table: Tuple[float, float]) -> bool:
    ex, ey = obj.shape.xy_extent
    x, y = obj.position[0], obj.position[1]
    return bool(ex <= x <= table[0] - ex and ey <= y <= table[1] - ey)


def footprint_overlap(a: SceneObject, b: SceneObject, margin: float = 0.005) -> bool:
    """True iff the 2D footprints (disks or rectangles) come closer than `margin`."""
    if a.shape.kind == ShapeKind.Box and b.shape.kind == ShapeKind.Cylinder:
        a, b = b, a
    offset = np.abs(a.xy - b.xy)
    if a.shape.kind == ShapeKind.Cylinder and b.shape.kind == ShapeKind.Cylinder:
        return bool(np.linalg.norm(offset) < a.shape.radius + b.shape.radius + margin)
    if a.shape.kind == ShapeKind.Cylinder:
        gap = np.maximum(offset - np.asarray(b.shape.xy_extent), 0.0)
        return bool(np.linalg.norm(gap) < a.shape.radius + margin)
    gap = offset - np.asarray(a.shape.xy_extent) - np.asarray(b.shape.xy_extent)
    if np.all(gap < 0):
        return True
    return bool(np.linalg.norm(np.maximum(gap, 0.0)) < margin)


def collides_with_any(obj: SceneObject, others: Iterable[SceneObject], margin: float) -> bool:
    return any(footprint_overlap(obj, o, margin) for o in others)


def sample_shape(cfg: SceneConfig, rng: np.random.Generator) -> Shape:
    if rng.random() < cfg.cylinder_probability:
        return Shape.cylinder(rng.uniform(*cfg.radius_range), cfg.object_height)
    hx, hy = rng.uniform(*cfg.half_extent_range, size=2)
    return Shape.box(hx, hy, cfg.object_height / 2)


def sample_scene(
    num_objects: int,
    table_range: Optional[Tuple[float, float]] = None,
    rng: Optional[np.random.Generator] = None,
    cfg: Optional[SceneConfig] = None,
) -> Scene:
    cfg = cfg or SceneConfig()
    rng = rng if rng is not None else np.random.default_rng()
    low, high = table_range or cfg.table_range
    if num_objects < 1:
        raise InvalidScene(f"num_objects must be >= 1, got {num_objects}")
    table = (float(rng.uniform(low, high)), float(rng.uniform(low, high)))
    placed: List[SceneObject] = []
    for object_id in range(num_objects):
        shape = sample_shape(cfg, rng)
        feature = rng.standard_normal(cfg.feature_dim)
        feature /= np.linalg.norm(feature)
        cloud_seed = int(rng.integers(2**31 - 1))
        ex, ey = shape.xy_extent
        for _ in range(cfg.max_attempts):
            if 2 * ex > table[0] or 2 * ey > table[1]:
                break
            position = sample_table_position(shape, table, rng)
            candidate = SceneObject(object_id, shape, position, None, feature, cloud_seed)
            if not fits_table(candidate, table):
                continue
            if not collides_with_any(candidate, placed, cfg.margin):
                cloud = make_cloud(shape, position, cloud_seed, cfg.n_pts)
                placed.append(replace(candidate, cloud=cloud))
                break
        else:
            raise PlacementExhausted(
                f"Could not place object {object_id} on a {table[0]:.2f}x{table[1]:.2f} table "
                f"after {cfg.max_attempts} attempts"
            )
        if len(placed) != object_id + 1:
            raise PlacementExhausted(f"Object {object_id} is larger than the table {table}")
    return Scene(table=table, objects=tuple(placed))


def _derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def make_target_by_swap(
    scene: Scene, rng: np.random.Generator, margin: float = 0.005, max_attempts: int = 1000
) -> Scene:
    """
    Permute object positions by a derangement, so every goal is occupied by another object
    in the source scene. Permutations whose target breaks the Scene invariants are resampled.
    """
    n = len(scene)
    if n < 2:
        raise InvalidScene("A swap target needs at least two objects")
    positions = scene.positions
    for _ in range(max_attempts):
        perm = _derangement(n, rng)
        moved = tuple(
            o.placed_at([positions[perm[k]][0], positions[perm[k]][1], o.shape.half_height])
            for k, o in enumerate(scene.objects)
        )
        target = Scene(table=scene.table, objects=moved)
        try:
            return target.validate(margin)
        except InvalidScene:
            continue
    raise TargetInfeasible(f"No valid swap target after {max_attempts} derangements")


def apply_placement(scene: Scene, object_id: int, delta) -> Scene:
    """Teleport one object by `delta`; collisions are the caller's concern."""
    obj = scene.get(object_id)
    return scene.with_object(obj.translated(delta))


def view_features(
    scene: Scene, cfg: FeatureOracleConfig, rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    base = np.array([o.feature for o in scene.objects])
    if cfg.noise_sigma == 0.0:
        return base.copy()
    rng = rng if rng is not None else np.random.default_rng()
    return base + rng.normal(0.0, cfg.noise_sigma, size=base.shape)


class FeatureOracle:
    """Stand-in for perception with its own rng stream, one view per call."""

    def __init__(self, cfg: FeatureOracleConfig) -> None:
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)

    def view(self, scene: Scene) -> np.ndarray:
        return view_features(scene, self.cfg, self.rng)


def _paired_offsets(scene: Scene, target: Scene) -> np.ndarray:
    if sorted(scene.ids) != sorted(target.ids):
        raise CountMismatch(f"Scenes hold different objects: {scene.ids} vs {target.ids}")
    return np.array([o.position - target.get(o.id).position for o in scene.objects])


def displacements(scene: Scene, target: Scene) -> np.ndarray:
    return np.linalg.norm(_paired_offsets(scene, target), axis=1)


def max_displacement(scene: Scene, target: Scene) -> float:
    return float(displacements(scene, target).max())


def final_error(scene: Scene, target: Scene) -> float:
    """Mean per-object distance to target."""
    return float(displacements(scene, target).mean())


def misplaced_ids(scene: Scene, target: Scene, tol: float = SUCCESS_TOLERANCE) -> List[int]:
    d = displacements(scene, target)
    return [o.id for o, dist in zip(scene.objects, d) if dist > tol]


def is_success(scene: Scene, target: Scene, tol: float = SUCCESS_TOLERANCE) -> bool:
    """The single success predicate: every object within `tol` of its target."""
    return max_displacement(scene, target) <= tol


def scene_from_objects(table: Sequence[float], objects: Sequence[SceneObject]) -> Scene:
    return Scene(table=(float(table[0]), float(table[1])), objects=tuple(objects))
