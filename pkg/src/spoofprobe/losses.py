"""Loss terms of the multitask model and the single-head attack objective.

Reductions are means over batch and elements. Annotations equal to
``UNLABELED`` contribute nothing; when a whole term is unlabeled it is zero.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F

from .datasets import UNLABELED
from .errors import DimensionError, SchemaError

HEADS = ("f", "t", "i", "d", "r", "c")
HEAD_NAMES = {
    "f": "facial_attr",
    "t": "spoof_type",
    "i": "illum",
    "d": "depth",
    "r": "reflection",
    "c": "classification",
}


@dataclass(frozen=True)
class LossWeights:
    f: float = 1.0
    t: float = 0.1
    i: float = 0.01
    d: float = 0.1
    r: float = 0.1

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise SchemaError(f"loss weight {k} must be nonnegative, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)


def _masked_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    count = mask.sum()
    if count == 0:
        return values.sum() * 0.0
    return (values * mask).sum() / count


def bce_per_sample(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Attribute BCE averaged over each sample's labeled attributes -> (N,)."""
    if logits.shape != target.shape:
        raise DimensionError(f"attribute logits {tuple(logits.shape)} vs labels {tuple(target.shape)}")
    if ((target != 0) & (target != 1) & (target != UNLABELED)).any():
        raise SchemaError("attribute labels must be 0, 1 or UNLABELED")
    mask = (target != UNLABELED).to(logits.dtype)
    raw = F.binary_cross_entropy_with_logits(logits, target.clamp(min=0).to(logits.dtype), reduction="none")
    return (raw * mask).sum(dim=1) / mask.sum(dim=1).clamp(min=1.0)


def bce(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if logits.shape != target.shape:
        raise DimensionError(f"attribute logits {tuple(logits.shape)} vs labels {tuple(target.shape)}")
    if ((target != 0) & (target != 1) & (target != UNLABELED)).any():
        raise SchemaError("attribute labels must be 0, 1 or UNLABELED")
    mask = (target != UNLABELED).to(logits.dtype)
    raw = F.binary_cross_entropy_with_logits(logits, target.clamp(min=0).to(logits.dtype), reduction="none")
    return _masked_mean(raw, mask)


def sce_per_sample(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Softmax cross-entropy per sample; unlabeled rows give 0 -> (N,)."""
    n_classes = logits.shape[-1]
    target = target.long()
    if logits.shape[0] != target.shape[0]:
        raise DimensionError(f"{logits.shape[0]} logit rows vs {target.shape[0]} labels")
    bad = (target != UNLABELED) & ((target < 0) | (target >= n_classes))
    if bad.any():
        raise SchemaError(f"class label outside [0, {n_classes}): {target[bad].tolist()[:5]}")
    return F.cross_entropy(logits, target, ignore_index=UNLABELED, reduction="none")


def sce(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    per = sce_per_sample(logits, target)
    return _masked_mean(per, (target != UNLABELED).to(per.dtype))


def mse_per_sample(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise DimensionError(f"map shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).flatten(1).mean(dim=1)


def mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise DimensionError(f"map shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


def semantic_loss(out, labels, weights: LossWeights = LossWeights()) -> torch.Tensor:
    return (weights.f * bce(out.v_f, labels.attrs)
            + weights.t * sce(out.v_t, labels.spoof_type)
            + weights.i * sce(out.v_i, labels.illum))


def geometric_loss(out, targets, weights: LossWeights = LossWeights()) -> torch.Tensor:
    return weights.d * mse(out.v_d, targets.depth) + weights.r * mse(out.v_r, targets.reflection)


def classification_loss(out, labels) -> torch.Tensor:
    return sce(out.v_c, labels.y)


class LossTerms(NamedTuple):
    total: torch.Tensor
    classification: torch.Tensor
    semantic: torch.Tensor
    geometric: torch.Tensor


def loss_terms(out, labels, targets, weights: LossWeights = LossWeights()) -> LossTerms:
    c = classification_loss(out, labels)
    a = semantic_loss(out, labels, weights)
    g = geometric_loss(out, targets, weights)
    return LossTerms(c + a + g, c, a, g)


def total_loss(out, labels, targets, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Classification cross-entropy plus the weighted semantic and geometric terms."""
    return loss_terms(out, labels, targets, weights).total


def head_loss(out, labels, targets, head: str, reduction: str = "mean") -> torch.Tensor:
    """Unweighted loss of a single head, the objective of a head-targeted attack.

    ``reduction="none"`` returns one value per sample.
    """
    if head not in HEADS:
        raise SchemaError(f"unknown head {head!r}; expected one of {HEADS}")
    if head in ("d", "r"):
        target = getattr(targets, "depth" if head == "d" else "reflection", None) if targets is not None else None
        if target is None:
            raise SchemaError(f"head {head!r} needs a {HEAD_NAMES[head]} target map")
        per = mse_per_sample(out.v_d if head == "d" else out.v_r, target)
    else:
        field = {"f": "attrs", "t": "spoof_type", "i": "illum", "c": "y"}[head]
        target = getattr(labels, field, None)
        if target is None or bool((target == UNLABELED).all()):
            raise SchemaError(f"head {head!r} needs {field} annotations, none present")
        logits = out.head(head)
        per = bce_per_sample(logits, target) if head == "f" else sce_per_sample(logits, target)
    if reduction == "none":
        return per
    if reduction == "sum":
        return per.sum()
    return per.mean()
