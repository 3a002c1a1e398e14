import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from dbt.adapters.events.logging import AdapterLogger

from nerp.configs import DropoutMode, Split
from nerp.nerp_collision import classification_metrics
from nerp.nerp_configs import LossWeights, TrainConfig
from nerp.nerp_datagen import TrainingSample, load_split
from nerp.nerp_exceptions import EmptyDataset, NonFiniteLoss
from nerp.nerp_models import HeadPredictor, ModelBundle, joint_loss
from nerp.nerp_reports import write_csv
from nerp.neural import Adagrad, functional as F, no_grad

logger = AdapterLogger("nerp")

HISTORY_FILE = "history.csv"
HISTORY_COLUMNS = [
    "epoch",
    "loss",
    "selection",
    "proposal",
    "goal",
    "val_selection_accuracy",
    "val_delta_error",
    "val_goal_auc",
]


@dataclass
class HeadMetrics:
    selection_accuracy: float
    delta_error: float
    goal_auc: float
    samples: int

    def composite(self) -> float:
        """Early-stopping score, higher is better."""
        return self.selection_accuracy - self.delta_error

    def to_row(self) -> Dict[str, float]:
        return {
            "val_selection_accuracy": self.selection_accuracy,
            "val_delta_error": self.delta_error,
            "val_goal_auc": self.goal_auc,
        }


@dataclass
class TrainResult:
    bundle: ModelBundle
    history: List[Dict[str, float]] = field(default_factory=list)
    best_epoch: int = 0
    best_metrics: Optional[HeadMetrics] = None


def evaluate_heads(predictor: HeadPredictor, samples: Sequence[TrainingSample]) -> HeadMetrics:
    """
    Top-1 node selection accuracy and mean delta L2 error over expert steps, goal
    satisfaction AUC over every sample including the perturbed negatives.
    """
    hits, errors, scores, labels = [], [], [], []
    for sample in samples:
        if not sample.augmented:
            rho = predictor.selection_scores(sample.graph)
            hits.append(int(np.argmax(rho)) == sample.selected)
            delta = predictor.predict_delta(sample.graph, sample.selected)
            errors.append(float(np.linalg.norm(delta - sample.delta)))
        goal = predictor.goal_scores(sample.graph, sample.selected, sample.goal_delta[None, :])
        scores.append(float(goal[0]))
        labels.append(sample.y_goal)
    _, auc = classification_metrics(np.array(scores), np.array(labels))
    return HeadMetrics(
        selection_accuracy=float(np.mean(hits)) if hits else float("nan"),
        delta_error=float(np.mean(errors)) if errors else float("nan"),
        goal_auc=auc,
        samples=len(samples),
    )


def _mean_losses(
    bundle: ModelBundle, samples: Sequence[TrainingSample], weights: LossWeights
) -> Dict[str, float]:
    totals = {"loss": 0.0, "selection": 0.0, "proposal": 0.0, "goal": 0.0}
    with no_grad():
        for sample in samples:
            _, values = joint_loss(sample, bundle, weights, mode=DropoutMode.Eval)
            for key in totals:
                totals[key] += values[key]
    return {key: value / len(samples) for key, value in totals.items()}


def _update(
    batch: Sequence[TrainingSample],
    bundle: ModelBundle,
    optimizer: Adagrad,
    rng: np.random.Generator,
    weights: LossWeights,
) -> None:
    optimizer.zero_grad()
    losses = []
    for sample in batch:
        loss, values = joint_loss(sample, bundle, weights, rng, DropoutMode.Train)
        if not np.isfinite(values["loss"]):
            raise NonFiniteLoss(sample.sample_id, values["loss"])
        losses.append(loss)
    F.scale(F.total(losses), 1.0 / len(losses)).backward()
    optimizer.step()


def train_joint(
    train: Sequence[TrainingSample],
    val: Sequence[TrainingSample] = (),
    cfg: Optional[TrainConfig] = None,
    bundle: Optional[ModelBundle] = None,
) -> TrainResult:
    """
    End-to-end training of encoder, selector, proposal and goal nets on one loss.
    History row 0 holds the loss before any update; train losses are measured with
    dropout off so rows are comparable.
    """
    cfg = cfg or TrainConfig()
    if len(train) == 0:
        raise EmptyDataset("The train split is empty")
    bundle = bundle or ModelBundle(cfg.model, seed=cfg.seed)
    optimizer = Adagrad(bundle.parameters(), cfg.adagrad)
    rng = np.random.default_rng(cfg.seed)

    result = TrainResult(bundle=bundle)
    best = -np.inf
    stale = 0
    for epoch in range(0, cfg.epochs + 1):
        if epoch > 0:
            order = rng.permutation(len(train))
            for start in range(0, len(order), cfg.micro_batch):
                batch = [train[k] for k in order[start : start + cfg.micro_batch]]
                _update(batch, bundle, optimizer, rng, cfg.model.loss_weights)
            bundle.trained = True
        row: Dict[str, float] = {"epoch": epoch}
        row.update(_mean_losses(bundle, train, cfg.model.loss_weights))
        metrics = None
        if val and (epoch == cfg.epochs or epoch % cfg.eval_every == 0):
            metrics = evaluate_heads(bundle, val)
            row.update(metrics.to_row())
        else:
            row.update({column: None for column in HISTORY_COLUMNS[5:]})
        result.history.append(row)
        logger.info(
            f"Epoch {epoch}: loss={row['loss']:.5f}"
            + (f" val_selection={metrics.selection_accuracy:.3f}" if metrics else "")
        )

        if epoch == 0 or metrics is None:
            continue
        if metrics.composite() > best:
            best, stale = metrics.composite(), 0
            result.best_epoch, result.best_metrics = epoch, metrics
            if cfg.checkpoint_dir:
                bundle.save(os.path.join(cfg.checkpoint_dir, "best"))
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                logger.info(f"No validation improvement for {stale} evaluations, stopping")
                break

    if cfg.checkpoint_dir:
        bundle.save(cfg.checkpoint_dir)
        write_csv(result.history, HISTORY_COLUMNS, os.path.join(cfg.checkpoint_dir, HISTORY_FILE))
    return result


def train_from_dir(
    data_dir: str, cfg: Optional[TrainConfig] = None, bundle: Optional[ModelBundle] = None
) -> TrainResult:
    cfg = cfg or TrainConfig()
    graph_cfg = cfg.model.graph
    train = list(load_split(data_dir, Split.Train, graph_cfg=graph_cfg))
    val = list(load_split(data_dir, Split.Val, graph_cfg=graph_cfg))
    logger.info(f"Training on {len(train)} samples, validating on {len(val)}")
    return train_joint(train, val, cfg, bundle)
