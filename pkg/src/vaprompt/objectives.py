"""Concordance correlation, the KL region loss and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_KL_WEIGHT = 0.2


def ccc(pred, target) -> float:
    """Lin's concordance correlation with population moments.

    Two constant, equal sequences score 1; constant but unequal scores 0.
    """
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(target, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"ccc: length mismatch {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError(f"ccc: need at least 2 samples, got {x.size}")
    # A constant sequence's mean can round away from its value; pin it so
    # its deviations (and hence the covariance) are exactly zero.
    mx = x[0] if np.all(x == x[0]) else x.mean()
    my = y[0] if np.all(y == y[0]) else y.mean()
    dx, dy = x - mx, y - my
    cov = (dx * dy).mean()
    denom = (dx * dx).mean() + (dy * dy).mean() + (mx - my) ** 2
    if denom == 0.0:
        return 1.0
    return float(2.0 * cov / denom)


def _ccc_tensor(x: Tensor, y: Tensor) -> Tensor:
    dx = x - ad.mean(x)
    dy = y - ad.mean(y)
    cov = ad.mean(dx * dy)
    denom = ad.mean(ad.square(dx)) + ad.mean(ad.square(dy)) + ad.square(ad.mean(x) - ad.mean(y))
    return ad.scale(cov, 2.0) / denom


def _flatten_va(t: Tensor, name: str) -> Tensor:
    if t.shape[-1] != 2:
        raise ValueError(f"{name}: expected trailing dim 2, got shape {t.shape}")
    return ad.reshape(t, (-1, 2))


def ccc_terms(pred: Tensor, target) -> tuple[Tensor, Tensor]:
    """Differentiable (CCC_valence, CCC_arousal) over all frames."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    p = _flatten_va(pred, "ccc_loss")
    y = _flatten_va(target, "ccc_loss")
    if p.shape != y.shape:
        raise ValueError(f"ccc_loss: shape mismatch {pred.shape} vs {target.shape}")
    if p.shape[0] < 2:
        raise ValueError(f"ccc_loss: need at least 2 frames, got {p.shape[0]}")
    return (
        _ccc_tensor(ad.select(p, 0, axis=1), ad.select(y, 0, axis=1)),
        _ccc_tensor(ad.select(p, 1, axis=1), ad.select(y, 1, axis=1)),
    )


def ccc_loss(pred: Tensor, target) -> Tensor:
    """``1 - (CCC_v + CCC_a) / 2`` with frames flattened across the batch."""
    c_v, c_a = ccc_terms(pred, target)
    return ad.sub(1.0, ad.scale(c_v + c_a, 0.5))


def _check_rows(w: np.ndarray, name: str, tol: float = 1e-6) -> None:
    if np.any(w < 0) or np.any(np.abs(w.sum(axis=-1) - 1.0) > tol):
        raise ValueError(f"kl_loss: {name} rows must be non-negative and sum to 1")


def _targets_array(soft_targets) -> np.ndarray:
    w = soft_targets.data if isinstance(soft_targets, Tensor) else np.asarray(soft_targets, float)
    _check_rows(w, "soft target")
    return w.reshape(-1, w.shape[-1])


def _safe_log(w: np.ndarray) -> np.ndarray:
    # Zero-weight entries contribute nothing (0 log 0 = 0).
    with np.errstate(divide="ignore"):
        return np.where(w > 0, np.log(np.where(w > 0, w, 1.0)), 0.0)


def _kl_rows(w: np.ndarray, log_p: Tensor) -> Tensor:
    if log_p.shape != w.shape:
        raise ValueError(f"kl_loss: shape mismatch {w.shape} vs {log_p.shape}")
    terms = ad.mul(Tensor(w), ad.sub(Tensor(_safe_log(w)), log_p))
    return ad.mean(ad.sum(terms, axis=-1))


def kl_loss(soft_targets, predicted: Tensor) -> Tensor:
    """Mean over rows of ``KL(target || predicted)``."""
    w = _targets_array(soft_targets)
    _check_rows(predicted.data, "predicted")
    if np.any(predicted.data <= 0):
        raise ValueError("kl_loss: predicted probabilities must be strictly positive")
    return _kl_rows(w, ad.log(ad.reshape(predicted, (-1, predicted.shape[-1]))))


def kl_loss_logits(soft_targets, logits: Tensor) -> Tensor:
    """``kl_loss`` against ``softmax(logits)``, computed via log-softmax."""
    w = _targets_array(soft_targets)
    return _kl_rows(w, ad.reshape(ad.log_softmax(logits), (-1, logits.shape[-1])))


@dataclass
class LossBreakdown:
    ccc_loss: float
    kl_loss: float
    total: float
    ccc_valence: float
    ccc_arousal: float
    kl_weight: float = DEFAULT_KL_WEIGHT
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict[str, float]:
        return {
            "ccc_loss": self.ccc_loss,
            "kl_loss": self.kl_loss,
            "total": self.total,
            "ccc_valence": self.ccc_valence,
            "ccc_arousal": self.ccc_arousal,
        }


def total_loss(
    pred_va: Tensor,
    target_va,
    pred_dist: Tensor | None,
    soft_targets,
    kl_weight: float = DEFAULT_KL_WEIGHT,
    logits: Tensor | None = None,
) -> LossBreakdown:
    """CCC loss plus ``kl_weight`` times the KL region loss.

    Pass ``logits`` instead of ``pred_dist`` to evaluate the KL term through
    log-softmax.  ``breakdown.tensor`` is the differentiable total.
    """
    if kl_weight < 0:
        raise ValueError(f"kl_weight must be >= 0, got {kl_weight}")
    c_v, c_a = ccc_terms(pred_va, target_va)
    l_ccc = ad.sub(1.0, ad.scale(c_v + c_a, 0.5))
    if logits is not None:
        l_kl = kl_loss_logits(soft_targets, logits)
    elif pred_dist is not None:
        l_kl = kl_loss(soft_targets, pred_dist)
    else:
        raise ValueError("total_loss: need pred_dist or logits")
    total = l_ccc + ad.scale(l_kl, kl_weight)
    return LossBreakdown(
        ccc_loss=l_ccc.item(),
        kl_loss=l_kl.item(),
        total=total.item(),
        ccc_valence=c_v.item(),
        ccc_arousal=c_a.item(),
        kl_weight=kl_weight,
        tensor=total,
    )
