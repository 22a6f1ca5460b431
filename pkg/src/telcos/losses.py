"""Training objectives: pooled log-cosh regression, pixelwise cross-entropy, distillation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor

__all__ = [
    "LossValue",
    "DistillTargets",
    "logcosh_pool_loss",
    "pixel_ce_loss",
    "soft_ce_loss",
    "combined_loss",
    "distill_targets",
    "distill_loss",
    "LAMBDA",
    "TEMPERATURE",
]

LAMBDA = 0.5
TEMPERATURE = 2.0


@dataclass
class LossValue:
    """A scalar loss tensor plus the per-element terms it averages.

    ``float(value) == contributions.sum() / normalizer`` for the primitive
    losses; combined losses keep their parts in ``parts``.
    """

    value: Tensor
    contributions: np.ndarray
    normalizer: float
    parts: dict[str, float] = field(default_factory=dict)
    source: str = "ground_truth"

    @property
    def scalar(self) -> float:
        return float(self.value.data)


def _tensor(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=like.dtype))


def logcosh_pool_loss(pred: Tensor, gt) -> LossValue:
    """sum over channels of mean(logcosh(avgpool2(pred) - avgpool2(gt))).

    Pooling is linear, so the difference is pooled once.
    """
    gt = _tensor(gt, pred)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and target {gt.shape} differ in shape")
    terms = nx.logcosh(nx.avg_pool2(nx.sub(pred, gt)))
    n, c = terms.shape[:2]
    norm = float(terms.data.size // c)
    value = nx.mul(nx.total(terms), 1.0 / norm)
    return LossValue(value, terms.data, norm, {"tl": float(value.data)})


def _check_one_hot(target: np.ndarray) -> None:
    if not (np.isin(target, (0.0, 1.0)).all() and np.array_equal(target.sum(axis=1), np.ones(target.shape[:1] + target.shape[2:]))):
        raise ValueError("script target must be strictly one-hot along the class axis")


def pixel_ce_loss(logits: Tensor, target) -> LossValue:
    """Mean over pixels of -sum_j y_j log softmax(logits)_j."""
    y = np.asarray(target.data if isinstance(target, Tensor) else target)
    if logits.shape != y.shape:
        raise ValueError(f"logits {logits.shape} and target {y.shape} differ in shape")
    _check_one_hot(y)
    logp = nx.log_softmax_channels(logits)
    picked = nx.mul(logp, Tensor(y.astype(logits.dtype)))
    norm = float(y.size // y.shape[1])
    value = nx.mul(nx.total(picked), -1.0 / norm)
    return LossValue(value, -picked.data.sum(axis=1), norm, {"sd": float(value.data)})


def soft_ce_loss(logits: Tensor, probs, temperature: float = 1.0) -> LossValue:
    """T^2 * mean over pixels of -sum_j q_j log softmax(logits / T)_j."""
    q = np.asarray(probs)
    if logits.shape != q.shape:
        raise ValueError(f"logits {logits.shape} and soft targets {q.shape} differ in shape")
    logp = nx.log_softmax_channels(nx.mul(logits, 1.0 / temperature))
    picked = nx.mul(logp, Tensor(q.astype(logits.dtype)))
    norm = float(q.size // q.shape[1])
    scale = temperature * temperature
    value = nx.mul(nx.total(picked), -scale / norm)
    return LossValue(value, -scale * picked.data.sum(axis=1), norm, {"sd": float(value.data)}, "teacher")


def combined_loss(loc_pred: Tensor, loc_gt, script_logits: Tensor, script_gt, lam: float = LAMBDA) -> LossValue:
    """lam * L_tl + (1 - lam) * L_sd."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    tl = logcosh_pool_loss(loc_pred, loc_gt)
    sd = pixel_ce_loss(script_logits, script_gt)
    value = nx.add(nx.mul(tl.value, lam), nx.mul(sd.value, 1.0 - lam))
    parts = {"tl": tl.scalar, "sd": sd.scalar, "combined": float(value.data)}
    return LossValue(value, np.array([lam * tl.scalar, (1.0 - lam) * sd.scalar]), 1.0, parts)


@dataclass
class DistillTargets:
    loc: np.ndarray  # teacher localization maps, unchanged
    script: np.ndarray  # temperature-softened class probabilities
    temperature: float


def distill_targets(loc, script_logits, temperature: float = TEMPERATURE) -> DistillTargets:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    loc = np.asarray(loc.data if isinstance(loc, Tensor) else loc)
    z = np.asarray(script_logits.data if isinstance(script_logits, Tensor) else script_logits, dtype=np.float64)
    return DistillTargets(loc.copy(), nx._softmax(z / temperature), temperature)


def distill_loss(loc_pred: Tensor, script_logits: Tensor, targets: DistillTargets, lam: float = LAMBDA) -> LossValue:
    """Student objective against teacher outputs only; no ground truth enters."""
    tl = logcosh_pool_loss(loc_pred, targets.loc)
    sd = soft_ce_loss(script_logits, targets.script, targets.temperature)
    value = nx.add(nx.mul(tl.value, lam), nx.mul(sd.value, 1.0 - lam))
    parts = {"tl": tl.scalar, "sd": sd.scalar, "combined": float(value.data)}
    return LossValue(value, np.array([lam * tl.scalar, (1.0 - lam) * sd.scalar]), 1.0, parts, "teacher")
