"""Cross entropy, focal loss, and reduced focal loss with analytic gradients.

All three losses are functions of ``pt``, the probability the model assigns
to the ground-truth class:

    CE(pt)  = -log(pt)
    FL(pt)  = (1 - pt)^gamma * (-log(pt))
    RFL(pt) = fr(pt, th)    * (-log(pt))

where the cut-off factor ``fr`` flattens the focal weight below a
probability threshold ``th``:

    fr(pt, th) = 1                          if pt <  th
               = (1 - pt)^gamma / th^gamma  if pt >= th

The flat branch makes RFL behave exactly like cross entropy on hard
samples while keeping the focal down-weighting of easy ones.  The factor
is continuous at pt = th only for th = 0.5 (there (1-th)^g/th^g = 1); for
other thresholds the formula has a jump at the boundary, which is kept
as written rather than smoothed.

Two composite forms wire the scalar losses to model outputs: a softmax
multiclass head and a sigmoid binary head, both returning the analytic
gradient with respect to the logits.  Scalar entry points reject
pt outside the open interval (0, 1); the composites instead clamp pt to
[1e-12, 1 - 1e-12] so training survives saturated outputs.

Everything here is a pure function of its arguments and safe to call
from any number of threads.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

# Clamp bounds applied to pt inside the softmax/binary composites.
PT_CLAMP_LO = 1e-12
PT_CLAMP_HI = 1.0 - 1e-12


class LossKind(enum.Enum):
    CE = "CE"
    FL = "FL"
    RFL = "RFL"


@dataclass(frozen=True)
class LossParams:
    """Focusing exponent, cut-off threshold, and loss selector.

    ``gamma`` and ``threshold`` are ignored by the CE kind; ``threshold``
    is ignored by FL.  ``threshold`` may be 1.0, in which case RFL
    degenerates to CE (the composites clamp pt strictly below 1).
    """

    kind: LossKind
    gamma: float = 2.0
    threshold: float = 0.5

    def __post_init__(self) -> None:
        if not (self.gamma >= 0.0):
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not (0.0 < self.threshold <= 1.0):
            raise ValueError(f"threshold must be in (0, 1], got {self.threshold}")


def _check_pt(pt: float) -> None:
    if not (0.0 < pt < 1.0):
        raise ValueError(f"pt must lie strictly inside (0, 1), got {pt}")


def ce_loss(pt: float) -> float:
    """Cross entropy -log(pt) of the ground-truth-class probability."""
    _check_pt(pt)
    return -math.log(pt)


def focal_loss(pt: float, params: LossParams) -> float:
    """(1-pt)^gamma * (-log pt); equals CE when gamma is 0."""
    _check_pt(pt)
    return (1.0 - pt) ** params.gamma * (-math.log(pt))


def cutoff_factor(pt: float, params: LossParams) -> float:
    """Piecewise focal weight: 1 below threshold, (1-pt)^g/th^g at or above."""
    _check_pt(pt)
    if pt < params.threshold:
        return 1.0
    return (1.0 - pt) ** params.gamma / params.threshold**params.gamma


def reduced_focal_loss(pt: float, params: LossParams) -> float:
    """cutoff_factor(pt) * (-log pt).

    Below the threshold this evaluates the identical expression as
    :func:`ce_loss` (bitwise-equal results); at or above it evaluates
    focal_loss / th^gamma so the scaling identity FL = th^g * RFL holds
    to within a couple of ulp.
    """
    _check_pt(pt)
    if pt < params.threshold:
        return -math.log(pt)
    return focal_loss(pt, params) / params.threshold**params.gamma


def loss_value(pt: float, params: LossParams) -> float:
    """Selected loss at pt."""
    if params.kind is LossKind.CE:
        return ce_loss(pt)
    if params.kind is LossKind.FL:
        return focal_loss(pt, params)
    return reduced_focal_loss(pt, params)


def _focal_grad(pt: float, gamma: float) -> float:
    # d/dpt [(1-pt)^g * (-log pt)] = g*(1-pt)^(g-1)*log(pt) - (1-pt)^g/pt
    if gamma == 0.0:
        return -1.0 / pt
    return gamma * (1.0 - pt) ** (gamma - 1.0) * math.log(pt) - (1.0 - pt) ** gamma / pt


def loss_grad_pt(pt: float, params: LossParams) -> float:
    """d(loss)/d(pt) for the selected kind.

    The losses have a kink at pt = threshold (RFL) where the derivative
    is not defined; this returns the at-or-above-threshold branch there,
    matching the branch assignment of the value formula.
    """
    _check_pt(pt)
    if params.kind is LossKind.CE:
        return -1.0 / pt
    if params.kind is LossKind.FL:
        return _focal_grad(pt, params.gamma)
    if pt < params.threshold:
        return -1.0 / pt
    return _focal_grad(pt, params.gamma) / params.threshold**params.gamma


def _clamp_pt(pt: float) -> float:
    return min(max(pt, PT_CLAMP_LO), PT_CLAMP_HI)


def softmax_loss_and_grad(
    logits: np.ndarray, gt: int, params: LossParams
) -> tuple[float, np.ndarray]:
    """Selected loss of softmax(logits)[gt] and its gradient wrt the logits.

    Uses max-subtraction so logit magnitudes up to ~1e3 stay finite, and
    clamps pt to [1e-12, 1 - 1e-12] before the loss so saturated softmax
    outputs produce finite values and gradients.

    Returns:
        (loss, grad) with grad the same length as ``logits``:
        d(loss)/d(logit_j) = loss_grad_pt * pt * (delta_{j,gt} - softmax_j).
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] < 2:
        raise ValueError("logits must be a 1-D vector of length >= 2")
    if not (0 <= gt < z.shape[0]):
        raise ValueError(f"gt index {gt} out of range for {z.shape[0]} classes")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")

    shifted = z - z.max()
    ez = np.exp(shifted)
    p = ez / ez.sum()
    pt = _clamp_pt(float(p[gt]))

    loss = loss_value(pt, params)
    dpt = loss_grad_pt(pt, params)
    direction = -p
    direction[gt] += 1.0
    grad = dpt * pt * direction
    return loss, grad


def binary_loss_and_grad(
    logit: float, label: int, params: LossParams
) -> tuple[float, float]:
    """Selected loss of a sigmoid binary head and its gradient wrt the logit.

    pt = sigmoid(logit) for label 1 and 1 - sigmoid(logit) for label 0,
    evaluated through the log-sigmoid identity log(sigmoid(z)) =
    -log(1 + exp(-z)) so large |logit| never overflows.  The -log(pt)
    term is capped at -log(1e-12), mirroring the composite clamp.

    Returns:
        (loss, dloss/dlogit).
    """
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    if not math.isfinite(logit):
        raise ValueError("logit must be finite")

    # Effective logit of the labelled class: pt = sigmoid(s).
    s = logit if label == 1 else -logit
    log_pt = -np.logaddexp(0.0, -s)  # log sigmoid(s), stable for all s
    neg_log_pt = min(-log_pt, -math.log(PT_CLAMP_LO))
    pt = _clamp_pt(math.exp(log_pt))
    one_minus_pt = _clamp_pt(math.exp(-np.logaddexp(0.0, s)))  # sigmoid(-s)

    if params.kind is LossKind.CE:
        loss = neg_log_pt
        dpt = -1.0 / pt
    elif params.kind is LossKind.FL:
        loss = one_minus_pt**params.gamma * neg_log_pt
        dpt = _focal_grad(pt, params.gamma)
    elif pt < params.threshold:
        loss = neg_log_pt
        dpt = -1.0 / pt
    else:
        scale = params.threshold**params.gamma
        loss = one_minus_pt**params.gamma * neg_log_pt / scale
        dpt = _focal_grad(pt, params.gamma) / scale

    # dpt/dlogit = +/- sigmoid(s) * (1 - sigmoid(s))
    sign = 1.0 if label == 1 else -1.0
    grad = dpt * pt * one_minus_pt * sign
    return float(loss), float(grad)
