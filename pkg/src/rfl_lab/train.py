"""Deterministic manual-gradient training under any of the three losses.

Two trainers live here.  ``train_classifier`` fits a linear softmax
model with plain minibatch SGD (no momentum, no weight decay), averaging
per-sample losses and gradients over each batch so learning rates stay
comparable across batch sizes.  ``train_two_stage`` mirrors a
proposal-then-classify detector at desk scale: a binary objectness
scorer trained with stratified foreground/background minibatches feeds
its top-K candidates per scene to a multiclass classifier, and the
report carries proposal recall (overall and per class) plus stage-2
recall on the retained positives.

Determinism: everything derives from explicit integer seeds through
numpy's PCG64.  The configured seed feeds two child streams (weight
init and batch order); per-epoch undersampling derives its own sub-seed
from the policy seed and the epoch index, so enabling an undersample
policy never perturbs the batch stream, and an all-zero-skip policy
reproduces the unconfigured trajectory bitwise.

The batch loss/gradient helpers are exact vectorized twins of
``softmax_loss_and_grad`` / ``binary_loss_and_grad`` (same expressions,
same clamping), which keeps single-example and batched paths
interchangeable in tests.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .losses import PT_CLAMP_HI, PT_CLAMP_LO, LossKind, LossParams
from .sampling import Candidate, LabeledExample, Scene, UndersamplePolicy, undersample

LrSchedule = Sequence[tuple[float, float]]


@dataclass(frozen=True)
class TrainConfig:
    loss: LossParams
    epochs: int
    batch_size: int
    lr_schedule: tuple[tuple[float, float], ...]
    weight_init_seed: int = 0
    undersample: UndersamplePolicy | None = None

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr_schedule:
            raise ValueError("lr_schedule must not be empty")
        prev = -math.inf
        for t, rate in self.lr_schedule:
            if t <= prev:
                raise ValueError("lr thresholds must be strictly increasing")
            if rate <= 0:
                raise ValueError("learning rates must be positive")
            prev = t


@dataclass
class LinearModel:
    weights: np.ndarray  # (num_classes, feature_dim)
    biases: np.ndarray   # (num_classes,)

    def scores(self, X: np.ndarray) -> np.ndarray:
        return X @ self.weights.T + self.biases

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.scores(X), axis=1)

    def copy(self) -> "LinearModel":
        return LinearModel(self.weights.copy(), self.biases.copy())


def lr_at(schedule: LrSchedule, iteration: int) -> float:
    """Rate of the first schedule threshold exceeding the iteration index."""
    for threshold, rate in schedule:
        if iteration < threshold:
            return rate
    return schedule[-1][1]


def init_model(num_classes: int, feature_dim: int, seed: int) -> LinearModel:
    """Zero biases, uniform weights in [-0.01, 0.01] from the init stream."""
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[0])
    weights = rng.uniform(-0.01, 0.01, size=(num_classes, feature_dim))
    return LinearModel(weights, np.zeros(num_classes))


# ---------------------------------------------------------------------------
# Vectorized batch losses (exact twins of the scalar composite ops).
# ---------------------------------------------------------------------------


def _loss_and_dpt(pt: np.ndarray, params: LossParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample loss and d(loss)/d(pt) for clamped pt vectors."""
    neg_log = -np.log(pt)
    gamma, th = params.gamma, params.threshold
    if params.kind is LossKind.CE:
        return neg_log, -1.0 / pt
    one_minus = 1.0 - pt
    fl = one_minus**gamma * neg_log
    if gamma == 0.0:
        dfl = -1.0 / pt
    else:
        dfl = gamma * one_minus ** (gamma - 1.0) * np.log(pt) - one_minus**gamma / pt
    if params.kind is LossKind.FL:
        return fl, dfl
    scale = th**gamma
    flat = pt < th
    loss = np.where(flat, neg_log, fl / scale)
    dpt = np.where(flat, -1.0 / pt, dfl / scale)
    return loss, dpt


def softmax_batch(
    X: np.ndarray, y: np.ndarray, model: LinearModel, params: LossParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-sample losses and mean weight/bias gradients for one minibatch.

    Returns ``(losses, dW, db)`` where dW and db are averaged over the
    batch.
    """
    z = model.scores(X)
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    n = X.shape[0]
    pt = np.clip(p[np.arange(n), y], PT_CLAMP_LO, PT_CLAMP_HI)

    losses, dpt = _loss_and_dpt(pt, params)
    direction = -p
    direction[np.arange(n), y] += 1.0
    glogits = (dpt * pt)[:, None] * direction
    dW = glogits.T @ X / n
    db = glogits.mean(axis=0)
    return losses, dW, db


def binary_batch(
    X: np.ndarray, y: np.ndarray, w: np.ndarray, b: float, params: LossParams
) -> tuple[np.ndarray, np.ndarray, float]:
    """Per-sample losses and mean gradients for a sigmoid binary scorer."""
    z = X @ w + b
    s = np.where(y == 1, z, -z)
    log_pt = -np.logaddexp(0.0, -s)
    neg_log_pt = np.minimum(-log_pt, -math.log(PT_CLAMP_LO))
    pt = np.clip(np.exp(log_pt), PT_CLAMP_LO, PT_CLAMP_HI)
    one_minus = np.clip(np.exp(-np.logaddexp(0.0, s)), PT_CLAMP_LO, PT_CLAMP_HI)

    gamma, th = params.gamma, params.threshold
    if params.kind is LossKind.CE:
        loss = neg_log_pt
        dpt = -1.0 / pt
    else:
        fl = one_minus**gamma * neg_log_pt
        if gamma == 0.0:
            dfl = -1.0 / pt
        else:
            dfl = gamma * one_minus ** (gamma - 1.0) * np.log(pt) - one_minus**gamma / pt
        if params.kind is LossKind.FL:
            loss, dpt = fl, dfl
        else:
            scale = th**gamma
            flat = pt < th
            loss = np.where(flat, neg_log_pt, fl / scale)
            dpt = np.where(flat, -1.0 / pt, dfl / scale)

    sign = np.where(y == 1, 1.0, -1.0)
    gz = dpt * pt * one_minus * sign
    n = X.shape[0]
    dw = gz @ X / n
    db = float(gz.mean())
    return loss, dw, db


def batch_loss_and_grad(
    model: LinearModel, X: np.ndarray, y: np.ndarray, params: LossParams
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean loss and full-model gradient for a frozen minibatch."""
    losses, dW, db = softmax_batch(X, y, model, params)
    return float(losses.mean()), dW, db


# ---------------------------------------------------------------------------
# Linear softmax training.
# ---------------------------------------------------------------------------


def _epoch_policy(policy: UndersamplePolicy, epoch: int) -> UndersamplePolicy:
    sub = np.random.SeedSequence(policy.seed, spawn_key=(epoch,))
    return dataclasses.replace(policy, seed=int(sub.generate_state(1, np.uint64)[0]))


def train_classifier(
    data: Sequence[LabeledExample], config: TrainConfig
) -> tuple[LinearModel, list[float]]:
    """Minibatch SGD on a linear softmax model; returns (model, loss curve).

    Each epoch optionally re-undersamples the data (fresh sub-seed per
    epoch), reshuffles, and walks the batches in order; the curve holds
    the pre-update mean batch loss of every iteration.
    """
    if not data:
        raise ValueError("training data is empty")
    X_all = np.stack([ex.features for ex in data])
    y_all = np.array([ex.label for ex in data], dtype=np.int64)
    num_classes = int(y_all.max()) + 1
    if num_classes < 2:
        num_classes = 2

    model = init_model(num_classes, X_all.shape[1], config.weight_init_seed)
    batch_rng = np.random.default_rng(
        np.random.SeedSequence(config.weight_init_seed).spawn(2)[1]
    )

    curve: list[float] = []
    iteration = 0
    for epoch in range(config.epochs):
        if config.undersample is not None:
            epoch_data = undersample(data, _epoch_policy(config.undersample, epoch))
            if not epoch_data:
                continue
            Xe = np.stack([ex.features for ex in epoch_data])
            ye = np.array([ex.label for ex in epoch_data], dtype=np.int64)
        else:
            Xe, ye = X_all, y_all
        perm = batch_rng.permutation(len(ye))
        for start in range(0, len(ye), config.batch_size):
            idx = perm[start:start + config.batch_size]
            losses, dW, db = softmax_batch(Xe[idx], ye[idx], model, config.loss)
            rate = lr_at(config.lr_schedule, iteration)
            model.weights -= rate * dW
            model.biases -= rate * db
            curve.append(float(losses.mean()))
            iteration += 1
    return model, curve


@dataclass
class ClassifierEval:
    per_class_recall: dict[int, float]
    m_recall: float
    accuracy: float


def evaluate_classifier(
    model: LinearModel, data: Sequence[LabeledExample]
) -> ClassifierEval:
    """Per-class recall over classes present in the data, mRecall, accuracy."""
    if not data:
        raise ValueError("evaluation data is empty")
    X = np.stack([ex.features for ex in data])
    y = np.array([ex.label for ex in data], dtype=np.int64)
    pred = model.predict(X)
    per_class: dict[int, float] = {}
    for cls in sorted(set(y.tolist())):
        mask = y == cls
        per_class[cls] = float((pred[mask] == cls).mean())
    return ClassifierEval(
        per_class_recall=per_class,
        m_recall=float(np.mean(list(per_class.values()))),
        accuracy=float((pred == y).mean()),
    )


# ---------------------------------------------------------------------------
# Two-stage proposal -> classify simulation.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TwoStageConfig:
    stage1: TrainConfig
    proposal_budget: int
    stage2: TrainConfig
    fg_bg_ratio: float = 0.5  # foreground:background count ratio per batch

    def __post_init__(self) -> None:
        if self.proposal_budget < 1:
            raise ValueError("proposal_budget must be >= 1")
        if not (0.0 < self.fg_bg_ratio <= 1.0):
            raise ValueError("fg_bg_ratio must be in (0, 1]")


@dataclass
class BinaryModel:
    weights: np.ndarray
    bias: float

    def scores(self, X: np.ndarray) -> np.ndarray:
        return X @ self.weights + self.bias


@dataclass
class TwoStageReport:
    proposal_recall: float
    per_class_proposal_recall: dict[int, float]
    mean_class_proposal_recall: float
    stage2_per_class_recall: dict[int, float]
    stage2_m_recall: float
    stage1_curve: list[float] = field(repr=False, default_factory=list)
    stage2_curve: list[float] = field(repr=False, default_factory=list)


def train_objectness(
    X: np.ndarray, y: np.ndarray, config: TrainConfig, fg_bg_ratio: float
) -> tuple[BinaryModel, list[float]]:
    """Binary scorer via SGD on stratified fg/bg minibatches.

    Each batch draws round(batch * r / (1 + r)) foreground samples (at
    least one) and fills the rest with background, sampling a stratum
    with replacement only when it is smaller than its quota.  One epoch
    is ceil(n / batch_size) batches.
    """
    rng_init, rng_batch = (
        np.random.default_rng(s)
        for s in np.random.SeedSequence(config.weight_init_seed).spawn(2)
    )
    w = rng_init.uniform(-0.01, 0.01, size=X.shape[1])
    b = 0.0
    fg_idx = np.flatnonzero(y == 1)
    bg_idx = np.flatnonzero(y == 0)
    if len(fg_idx) == 0 or len(bg_idx) == 0:
        raise ValueError("objectness training needs both labels present")

    n_fg = max(1, round(config.batch_size * fg_bg_ratio / (1.0 + fg_bg_ratio)))
    n_bg = max(1, config.batch_size - n_fg)
    batches_per_epoch = math.ceil(len(y) / config.batch_size)

    curve: list[float] = []
    iteration = 0
    for _ in range(config.epochs):
        for _ in range(batches_per_epoch):
            fg = rng_batch.choice(fg_idx, size=n_fg, replace=len(fg_idx) < n_fg)
            bg = rng_batch.choice(bg_idx, size=n_bg, replace=len(bg_idx) < n_bg)
            idx = np.concatenate([fg, bg])
            losses, dw, db = binary_batch(X[idx], y[idx], w, b, config.loss)
            rate = lr_at(config.lr_schedule, iteration)
            w -= rate * dw
            b -= rate * db
            curve.append(float(losses.mean()))
            iteration += 1
    return BinaryModel(w, b), curve


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest scores, ties broken by lower index."""
    k = min(k, len(scores))
    order = np.argsort(-scores, kind="stable")
    return order[:k]


def train_two_stage(
    scenes: Sequence[Scene], config: TwoStageConfig
) -> tuple[BinaryModel, LinearModel, TwoStageReport]:
    """Train both stages on the scene pool and evaluate top-K pass-through.

    Stage 1 trains on every candidate and stage 2 on the labelled
    positives, both using the observed (possibly noise-flipped) labels.
    Evaluation scores each scene, keeps the top proposal_budget
    candidates (clamped to the scene size), and counts the true objects
    that survive (label flips undone via ``true_class``); retained true
    objects are then classified by stage 2 against their true class.
    """
    pool: list[Candidate] = [c for sc in scenes for c in sc.candidates]
    if not pool:
        raise ValueError("scenes contain no candidates")
    X = np.stack([c.features for c in pool])
    y = np.array([1 if c.is_object else 0 for c in pool], dtype=np.int64)

    scorer, s1_curve = train_objectness(X, y, config.stage1, config.fg_bg_ratio)

    positives = [
        LabeledExample(c.features, c.class_id) for c in pool if c.is_object
    ]
    classifier, s2_curve = train_classifier(positives, config.stage2)

    kept_total = 0
    obj_total = 0
    per_class_kept: dict[int, int] = {}
    per_class_total: dict[int, int] = {}
    retained: list[Candidate] = []
    for sc in scenes:
        Xs = np.stack([c.features for c in sc.candidates])
        top = set(top_k_indices(scorer.scores(Xs), config.proposal_budget).tolist())
        for i, c in enumerate(sc.candidates):
            if not c.is_true_object:
                continue
            obj_total += 1
            per_class_total[c.true_class] = per_class_total.get(c.true_class, 0) + 1
            if i in top:
                kept_total += 1
                per_class_kept[c.true_class] = per_class_kept.get(c.true_class, 0) + 1
                retained.append(c)
    if obj_total == 0:
        raise ValueError("scenes contain no labelled objects")

    per_class_recall = {
        cls: per_class_kept.get(cls, 0) / per_class_total[cls]
        for cls in sorted(per_class_total)
    }

    stage2_recall: dict[int, float] = {}
    if retained:
        Xr = np.stack([c.features for c in retained])
        yr = np.array([c.true_class for c in retained], dtype=np.int64)
        pred = classifier.predict(Xr)
        for cls in sorted(set(yr.tolist())):
            mask = yr == cls
            stage2_recall[cls] = float((pred[mask] == cls).mean())

    report = TwoStageReport(
        proposal_recall=kept_total / obj_total,
        per_class_proposal_recall=per_class_recall,
        mean_class_proposal_recall=float(np.mean(list(per_class_recall.values()))),
        stage2_per_class_recall=stage2_recall,
        stage2_m_recall=float(np.mean(list(stage2_recall.values()))) if stage2_recall else 0.0,
        stage1_curve=s1_curve,
        stage2_curve=s2_curve,
    )
    return scorer, classifier, report
