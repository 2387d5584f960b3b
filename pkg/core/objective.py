"""Scores, losses and evaluation metrics for both tasks."""
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import confusion_matrix

from core.errors import ConfigurationError, InvalidArgumentError, UndefinedMetricError
from core.numerics import l2_normalize
from ontology.output import MetricsReport

EXPRESSION = "expression"
AU = "au"


# ----------------------------------------------------------------------
# Scores
# ----------------------------------------------------------------------
def similarity_scores(Z: torch.Tensor, T: torch.Tensor, tau: float) -> torch.Tensor:
    """B x C cosine similarities between visual vectors and prototypes, divided by tau."""
    if not tau > 0:
        raise InvalidArgumentError(f"Similarity temperature must be positive, got {tau}")
    return l2_normalize(Z) @ l2_normalize(T).t() / tau


def baseline_heads(Z: torch.Tensor, W_cls: torch.Tensor, b_cls: torch.Tensor) -> torch.Tensor:
    if Z.shape[-1] != W_cls.shape[1]:
        raise ConfigurationError(f"Head expects width {W_cls.shape[1]}, features have {Z.shape[-1]}")
    return F.linear(Z, W_cls, b_cls)


# ----------------------------------------------------------------------
# Losses
# ----------------------------------------------------------------------
def _one_hot(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    if labels.dim() == 1:
        return F.one_hot(labels.long(), num_classes).to(torch.float64)
    return labels.to(torch.float64)


def dfer_loss(scores: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Batch mean of the softmax cross-entropy; labels are one-hot rows or class ids."""
    y = _one_hot(labels, scores.shape[1])
    return -(y * torch.log_softmax(scores, dim=1)).sum(dim=1).mean()


def au_loss(scores: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy of sigmoid(scores) over every (clip, AU) pair."""
    y = labels.to(scores.dtype)
    return (y * F.softplus(-scores) + (1 - y) * F.softplus(scores)).mean()


baseline_dfer_loss = dfer_loss
baseline_au_loss = au_loss


def task_weights(lam: float) -> Tuple[float, float]:
    if lam < 0:
        raise InvalidArgumentError(f"Task weight lambda must be non-negative, got {lam}")
    return 1.0 / (1.0 + lam), lam / (1.0 + lam)


def total_loss(l_dfe: torch.Tensor, l_au: Optional[torch.Tensor], lam: float) -> torch.Tensor:
    """(1/(1+lambda)) L_dfe + (lambda/(1+lambda)) L_au.

    At lambda = 0 the AU term is left out of the graph entirely.
    """
    w_dfe, w_au = task_weights(lam)
    if w_au == 0.0 or l_au is None:
        return w_dfe * l_dfe
    return w_dfe * l_dfe + w_au * l_au


# ----------------------------------------------------------------------
# Prediction and metrics
# ----------------------------------------------------------------------
def predict(scores: torch.Tensor, task: str) -> torch.Tensor:
    if task == EXPRESSION:
        # argmax returns the first maximal index
        return torch.argmax(scores, dim=1)
    if task == AU:
        return (scores > 0).long()
    raise InvalidArgumentError(f"Unknown task '{task}'")


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def f1_scores(pred, truth, au_ids: Optional[Sequence[int]] = None) -> Tuple[List[float], float]:
    """Per-AU F1 = 2TP / (2TP + FP + FN) and their mean."""
    p = _as_numpy(pred).astype(bool)
    t = _as_numpy(truth).astype(bool)
    if p.shape != t.shape or p.ndim != 2:
        raise InvalidArgumentError(f"Prediction shape {p.shape} does not match truth {t.shape}")
    tp = (p & t).sum(axis=0)
    fp = (p & ~t).sum(axis=0)
    fn = (~p & t).sum(axis=0)

    per_au = []
    for m in range(p.shape[1]):
        denom = 2 * tp[m] + fp[m] + fn[m]
        if denom == 0:
            label = f"AU{au_ids[m]}" if au_ids is not None else f"column {m}"
            logging.info(f"{label} has no positives and no predictions; F1 set to 0")
            per_au.append(0.0)
        else:
            per_au.append(float(2 * tp[m] / denom))
    avg = float(np.mean(per_au)) if per_au else 0.0
    return per_au, avg


def confusion_counts(pred, truth, K: int) -> np.ndarray:
    """K x K counts, rows = true class, columns = predicted class."""
    return confusion_matrix(_as_numpy(truth), _as_numpy(pred), labels=list(range(K)))


def uar_war(pred, truth, K: int) -> Tuple[float, float]:
    t = _as_numpy(truth)
    if not ((t >= 0) & (t < K)).any():
        raise UndefinedMetricError("UAR/WAR undefined: no class has any sample")
    cm = confusion_counts(pred, truth, K)
    support = cm.sum(axis=1)
    correct = np.diag(cm)
    present = support > 0
    uar = float(np.mean(correct[present] / support[present]))
    war = float(correct.sum() / support.sum())
    return uar, war


def expression_report(scores: torch.Tensor, labels: torch.Tensor, class_names: Sequence[str]) -> MetricsReport:
    K = len(class_names)
    pred = predict(scores, EXPRESSION)
    uar, war = uar_war(pred, labels, K)
    return MetricsReport(
        task=EXPRESSION, uar=uar, war=war,
        confusion=confusion_counts(pred, labels, K).tolist(),
        class_names=list(class_names), samples=int(labels.shape[0]),
    )


def au_report(scores: torch.Tensor, labels: torch.Tensor, au_ids: Sequence[int]) -> MetricsReport:
    per_au, avg = f1_scores(predict(scores, AU), labels, au_ids)
    return MetricsReport(task=AU, per_au_f1=per_au, au_ids=[int(a) for a in au_ids], avg_f1=avg,
        samples=int(labels.shape[0]))


def shared_aus(source_aus: Sequence[int], target_aus: Sequence[int]) -> List[int]:
    """AUs present in both sets, in source order."""
    target = set(int(a) for a in target_aus)
    return [int(a) for a in source_aus if int(a) in target]


def subset_eval(scores: torch.Tensor, source_aus: Sequence[int], labels: torch.Tensor,
    target_aus: Sequence[int]) -> MetricsReport:
    """Score AU predictions made over ``source_aus`` against labels over ``target_aus``."""
    shared = shared_aus(source_aus, target_aus)
    if not shared:
        raise ConfigurationError(f"AU sets {list(source_aus)} and {list(target_aus)} share no AU")
    src = [list(source_aus).index(a) for a in shared]
    tgt = [list(target_aus).index(a) for a in shared]
    return au_report(scores[:, src], labels[:, tgt], shared)
