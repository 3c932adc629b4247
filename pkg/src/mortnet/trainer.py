"""Weighted-loss SGD with Nesterov momentum and stratified k-fold cross-validation."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mortnet.ingest import CohortDataset, StandardizationStats, standardize_apply, standardize_fit
from mortnet.layers import sigmoid
from mortnet.metrics import operating_point, roc_auc
from mortnet.model import ModelConfig, Network, build_model, save_checkpoint

log = logging.getLogger(__name__)

EPS = 1e-12


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.01
    decay: float = 1e-7
    momentum: float = 0.9
    batch_size: int = 32
    pos_weight: float = 10.0
    epochs: int = 20
    folds: int = 5
    seed: int = 0
    patience: int | None = 5

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.pos_weight < 1:
            raise ValueError("pos_weight must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class FoldReport:
    fold_index: int
    train_loss: list[float]
    val_loss: list[float]
    train_auc: float
    val_auc: float
    sensitivity: float
    specificity: float
    standardization: StandardizationStats
    checkpoint: str | None = None
    n_train: int = 0
    n_val: int = 0
    seconds: float = 0.0
    network: Network | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
             if f.name not in ("network", "standardization")}
        d["standardization"] = self.standardization.to_dict()
        return d


def weighted_log_loss(p, y, pos_weight: float = 10.0) -> float:
    """Mean of -[w*y*ln p + (1-y)*ln(1-p)], with p clamped to [1e-12, 1 - 1e-12]."""
    p = np.clip(np.asarray(p, dtype=np.float64), EPS, 1 - EPS)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean(-(pos_weight * y * np.log(p) + (1 - y) * np.log1p(-p))))


def loss_grad_logits(z, y, pos_weight: float) -> np.ndarray:
    """d(mean weighted log loss)/d(logit)."""
    p = sigmoid(z)
    return (pos_weight * y * (p - 1.0) + (1.0 - y) * p) / len(z)


def sgd_nesterov_step(params: dict, velocity: dict, grads: dict, step_count: int,
                      config: TrainConfig) -> tuple[dict, dict]:
    """In-place Nesterov update with time-based decay lr / (1 + decay * step)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {name} at step {step_count}")
    lr_t = config.lr / (1.0 + config.decay * step_count)
    mu = config.momentum
    for name, g in grads.items():
        v = velocity.setdefault(name, np.zeros_like(params[name]))
        v *= mu
        v -= lr_t * g
        params[name] += mu * v - lr_t * g
    return params, velocity


def kfold_split(labels, k: int = 5, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified partition into ``k`` (train, val) index pairs.

    Positives are dealt round-robin first and negatives continue the same
    rotation, so fold sizes and per-fold positive counts each differ by at most one.
    """
    labels = np.asarray(labels)
    n = labels.size
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n:
        raise ValueError(f"cannot split {n} patients into {k} folds")
    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(np.flatnonzero(labels == 1)),
                            rng.permutation(np.flatnonzero(labels != 1))])
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[order] = np.arange(n) % k
    all_idx = np.arange(n)
    return [(all_idx[fold_of != f], all_idx[fold_of == f]) for f in range(k)]


def _predict_batched(net: Network, x: np.ndarray, batch: int = 512) -> np.ndarray:
    return np.concatenate([net.forward(x[i:i + batch], logits=True)
                           for i in range(0, len(x), batch)])


def train_fold(cohort: CohortDataset, fold: tuple[np.ndarray, np.ndarray],
               model_config: ModelConfig | None = None, train_config: TrainConfig | None = None,
               fold_index: int = 0, checkpoint_path=None) -> FoldReport:
    model_config = model_config or ModelConfig()
    tc = train_config or TrainConfig()
    t0 = time.perf_counter()
    train_idx, val_idx = fold
    stats = standardize_fit(cohort.grids[train_idx])
    x_tr = standardize_apply(cohort.grids[train_idx], stats)
    y_tr = cohort.labels[train_idx].astype(np.float64)
    x_val = standardize_apply(cohort.grids[val_idx], stats)
    y_val = cohort.labels[val_idx].astype(np.float64)

    net = build_model(model_config)
    params = net.parameters()
    velocity: dict[str, np.ndarray] = {}
    rng = np.random.default_rng([tc.seed, fold_index])
    step = 0
    train_hist, val_hist = [], []
    best, stale = np.inf, 0

    if tc.epochs == 0:
        net.calibrate(x_tr)
    for epoch in range(tc.epochs):
        perm = rng.permutation(len(x_tr))
        total = 0.0
        for start in range(0, len(perm), tc.batch_size):
            idx = perm[start:start + tc.batch_size]
            z = net.forward(x_tr[idx], training=True, rng=rng, logits=True)
            loss = weighted_log_loss(sigmoid(z), y_tr[idx], tc.pos_weight)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"fold {fold_index}: loss became {loss} at epoch {epoch}")
            net.backward(loss_grad_logits(z, y_tr[idx], tc.pos_weight))
            sgd_nesterov_step(params, velocity, net.gradients(), step, tc)
            step += 1
            total += loss * len(idx)
        train_hist.append(total / len(perm))
        val_loss = weighted_log_loss(sigmoid(_predict_batched(net, x_val)), y_val, tc.pos_weight) \
            if len(x_val) else float("nan")
        val_hist.append(val_loss)
        log.info("fold %d epoch %d train %.4f val %.4f", fold_index, epoch + 1, train_hist[-1], val_loss)
        if tc.patience is not None:
            if val_loss < best:
                best, stale = val_loss, 0
            else:
                stale += 1
                if stale >= tc.patience:
                    break

    p_tr = sigmoid(_predict_batched(net, x_tr))
    p_val = sigmoid(_predict_batched(net, x_val))
    sens, spec = operating_point(p_val, y_val, 0.5)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, net, stats, {"fold_index": fold_index})
    return FoldReport(fold_index, train_hist, val_hist, roc_auc(p_tr, y_tr), roc_auc(p_val, y_val),
                      sens, spec, stats, None if checkpoint_path is None else str(checkpoint_path),
                      len(train_idx), len(val_idx), time.perf_counter() - t0, net)


def cross_validate(cohort: CohortDataset, model_config: ModelConfig | None = None,
                   train_config: TrainConfig | None = None, out_dir=None) -> list[FoldReport]:
    tc = train_config or TrainConfig()
    folds = kfold_split(cohort.labels, tc.folds, tc.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    reports = []
    for i, fold in enumerate(folds):
        ckpt = out / f"fold{i}.ckpt" if out is not None else None
        rep = train_fold(cohort, fold, model_config, tc, i, ckpt)
        reports.append(rep)
        log.info("fold %d: train AUC %.4f  val AUC %.4f", i, rep.train_auc, rep.val_auc)
        if out is not None:
            (out / f"fold{i}.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    return reports
