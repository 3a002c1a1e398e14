from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from nerp.configs import (
    AblationVariant,
    EdgeTopology,
    ErrorReduction,
    HorizonMode,
    NerpConfigBase,
)

SUCCESS_TOLERANCE = 0.005  # metres, per-object displacement


@dataclass
class SceneConfig(NerpConfigBase):
    table_range: Tuple[float, float] = (0.6, 1.0)
    cylinder_probability: float = 0.5
    radius_range: Tuple[float, float] = (0.03, 0.06)
    half_extent_range: Tuple[float, float] = (0.025, 0.05)
    object_height: float = 0.10
    n_pts: int = 256
    margin: float = 0.005
    max_attempts: int = 1000
    feature_dim: int = 32

    def check(self) -> None:
        self.require(0 < self.table_range[0] <= self.table_range[1], "bad table_range")
        self.require(0 < self.radius_range[0] <= self.radius_range[1], "bad radius_range")
        self.require(
            0 < self.half_extent_range[0] <= self.half_extent_range[1], "bad half_extent_range"
        )
        self.require(0.0 <= self.cylinder_probability <= 1.0, "cylinder_probability not in [0,1]")
        self.require(self.object_height > 0, "object_height must be positive")
        self.require(self.n_pts >= 1, "n_pts must be >= 1")
        self.require(self.margin >= 0, "margin must be >= 0")
        self.require(self.feature_dim >= 2, "feature_dim must be >= 2")


@dataclass
class FeatureOracleConfig(NerpConfigBase):
    dim: int = 32
    noise_sigma: float = 0.0
    seed: int = 0

    def check(self) -> None:
        self.require(self.dim >= 2, "feature dimension must be >= 2")
        self.require(self.noise_sigma >= 0, "noise_sigma must be >= 0")


@dataclass
class GraphConfig(NerpConfigBase):
    topology: EdgeTopology = EdgeTopology.Complete
    k: int = 3
    self_loops: bool = False

    def check(self) -> None:
        self.require(self.k >= 1, "k must be >= 1")


@dataclass
class AdagradConfig(NerpConfigBase):
    lr: float = 0.01
    lr_decay: float = 0.0
    weight_decay: float = 0.0
    initial_accumulator: float = 0.0
    eps: float = 1e-10

    def check(self) -> None:
        self.require(self.lr > 0, "lr must be positive")
        self.require(self.eps > 0, "eps must be positive")
        self.require(self.initial_accumulator >= 0, "initial_accumulator must be >= 0")


@dataclass
class EncoderConfig(NerpConfigBase):
    hidden: int = 128
    layers: int = 2
    k_max: int = 3
    aggregation: str = "max"

    def check(self) -> None:
        self.require(self.layers >= 1, "layers must be >= 1")
        self.require(self.hidden >= 8, "hidden must be >= 8")
        self.require(self.k_max in (1, 2, 3), "k_max must be 1, 2 or 3")
        self.require(self.aggregation == "max", "only max aggregation is supported")


@dataclass
class LossWeights(NerpConfigBase):
    selection: float = 1.0
    proposal: float = 1.0
    goal: float = 1.0

    def check(self) -> None:
        self.require(
            min(self.selection, self.proposal, self.goal) >= 0, "loss weights must be >= 0"
        )


@dataclass
class ModelConfig(NerpConfigBase):
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    dropout_p: float = 0.5
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def check(self) -> None:
        self.require(0.0 <= self.dropout_p < 1.0, "dropout_p must be in [0, 1)")


@dataclass
class SALayerConfig(NerpConfigBase):
    ratio: float = 0.5
    radius: float = 0.4
    widths: List[int] = field(default_factory=lambda: [4, 32, 32, 64])
    max_neighbors: int = 32

    def check(self) -> None:
        self.require(0 < self.ratio <= 1, "ratio must be in (0, 1]")
        self.require(self.radius > 0, "radius must be positive")
        self.require(len(self.widths) >= 2, "an SA MLP needs at least two widths")
        self.require(self.max_neighbors >= 1, "max_neighbors must be >= 1")


def _default_sa_layers() -> List[SALayerConfig]:
    return [
        SALayerConfig(ratio=0.5, radius=0.4, widths=[4, 32, 32, 64], max_neighbors=32),
        SALayerConfig(ratio=0.25, radius=0.6, widths=[67, 128, 128], max_neighbors=64),
    ]


@dataclass
class SAConfig(NerpConfigBase):
    layers: List[SALayerConfig] = field(default_factory=_default_sa_layers)
    global_widths: List[int] = field(default_factory=lambda: [131, 256, 512])
    head_widths: List[int] = field(default_factory=lambda: [512, 256, 128, 1])
    n_points: int = 512

    def check(self) -> None:
        self.require(len(self.layers) >= 1, "at least one SA layer is required")
        self.require(self.layers[0].widths[0] == 4, "first SA layer takes 1 mask + 3 coords")
        for prev, layer in zip(self.layers, self.layers[1:]):
            self.require(
                layer.widths[0] == prev.widths[-1] + 3,
                f"SA input width {layer.widths[0]} != {prev.widths[-1]} + 3",
            )
        self.require(
            self.global_widths[0] == self.layers[-1].widths[-1] + 3,
            "global SA input width must be last SA width + 3",
        )
        self.require(
            self.head_widths[0] == self.global_widths[-1] and self.head_widths[-1] == 1,
            "head must map the global feature to one logit",
        )
        self.require(self.n_points >= 2, "n_points must be >= 2")


@dataclass
class CollisionTrainConfig(NerpConfigBase):
    epochs: int = 20
    batch_size: int = 32
    val_fraction: float = 0.1
    adagrad: AdagradConfig = field(default_factory=AdagradConfig)
    seed: int = 0
    balance_low: float = 0.45
    balance_high: float = 0.55
    augment: bool = True

    def check(self) -> None:
        self.require(self.epochs >= 1, "epochs must be >= 1")
        self.require(self.batch_size >= 1, "batch_size must be >= 1")
        self.require(0 < self.val_fraction < 1, "val_fraction must be in (0, 1)")


@dataclass
class ExpertConfig(NerpConfigBase):
    storage_attempts: int = 200
    storage_batch: int = 64
    tol: float = SUCCESS_TOLERANCE
    epsilon: float = 0.5
    budget_factor: int = 2

    def check(self) -> None:
        self.require(self.storage_attempts >= 1, "storage_attempts must be >= 1")
        self.require(self.storage_batch >= 1, "storage_batch must be >= 1")
        self.require(0 < self.epsilon < 1, "epsilon must be in (0, 1)")


@dataclass
class DatasetConfig(NerpConfigBase):
    num_problems: int = 2000
    num_objects: int = 5
    seed: int = 0
    noise_sigma: float = 0.0
    annulus: Tuple[float, float] = (2.0, 10.0)
    tol: float = SUCCESS_TOLERANCE
    split_fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    workers: int = 1
    scene: SceneConfig = field(default_factory=SceneConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    emit_traces: bool = False

    def check(self) -> None:
        self.require(self.num_problems >= 1, "num_problems must be >= 1")
        self.require(self.num_objects >= 2, "swap targets need at least two objects")
        self.require(0 < self.annulus[0] < self.annulus[1], "bad annulus")
        self.require(abs(sum(self.split_fractions) - 1.0) < 1e-9, "split fractions must sum to 1")
        self.require(self.workers >= 1, "workers must be >= 1")


@dataclass
class TrainConfig(NerpConfigBase):
    epochs: int = 10
    micro_batch: int = 1
    adagrad: AdagradConfig = field(default_factory=AdagradConfig)
    eval_every: int = 1
    checkpoint_dir: Optional[str] = None
    seed: int = 0
    patience: Optional[int] = None
    model: ModelConfig = field(default_factory=ModelConfig)

    def check(self) -> None:
        self.require(self.epochs >= 1, "epochs must be >= 1")
        self.require(self.micro_batch >= 1, "micro_batch must be >= 1")
        self.require(self.eval_every >= 1, "eval_every must be >= 1")


@dataclass
class PlannerConfig(NerpConfigBase):
    n_rollouts: int = 16
    num_proposals: int = 64
    epsilon: float = 0.5
    horizon_mode: HorizonMode = HorizonMode.Simulation
    r_ball: float = 0.03
    max_candidates: int = 32
    tol: float = SUCCESS_TOLERANCE
    p_fail: float = 0.0
    iteration_cap_factor: int = 10
    error_reduction: ErrorReduction = ErrorReduction.Sum
    variant: AblationVariant = AblationVariant.Full
    check_table_bounds: bool = True
    seed: int = 0

    def check(self) -> None:
        self.require(self.n_rollouts >= 1, "n_rollouts must be >= 1")
        self.require(self.num_proposals >= 1, "num_proposals must be >= 1")
        self.require(0 < self.epsilon < 1, "epsilon must be in (0, 1)")
        self.require(self.r_ball > 0, "r_ball must be positive")
        self.require(self.max_candidates >= 1, "max_candidates must be >= 1")
        self.require(0.0 <= self.p_fail <= 1.0, "p_fail must be in [0, 1]")
        self.require(self.iteration_cap_factor >= 1, "iteration_cap_factor must be >= 1")

    def horizon(self, num_objects: int) -> int:
        if self.horizon_mode == HorizonMode.Constrained:
            return num_objects + 1
        return 2 * num_objects


@dataclass
class BenchmarkConfig(NerpConfigBase):
    num_scenes: int = 100
    num_objects: int = 5
    seeds: List[int] = field(default_factory=lambda: [1, 2, 3])
    noise_sigma: float = 0.0
    workers: int = 1
    use_oracle_collision: bool = False
    random_rollouts: int = 16
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)

    def check(self) -> None:
        self.require(self.num_scenes >= 0, "num_scenes must be >= 0")
        self.require(self.num_objects >= 1, "num_objects must be >= 1")
        self.require(len(self.seeds) >= 1, "at least one seed is required")
        self.require(self.workers >= 1, "workers must be >= 1")
        self.require(self.random_rollouts >= 1, "random_rollouts must be >= 1")
