# evaluation/services/metrics.py
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from django.core.exceptions import ValidationError
from scipy import ndimage
from scipy.stats import rankdata

from labels.services.label_service import COUNTER_DESCRIPTORS, LabelService
from labels.types import FRAME_RATE
from ptsd.network import PosteriorSet


@dataclass(frozen=True)
class ScoredFrames:
    """Scores por frame con su etiqueta binaria; base de AP/AUC/EER."""
    scores: np.ndarray
    labels: np.ndarray
    event: str = ""

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).ravel()
        labels = np.asarray(self.labels).ravel()
        if scores.shape != labels.shape:
            raise ValidationError(
                f"{self.event}: {scores.shape[0]} scores vs {labels.shape[0]} etiquetas.",
                code="shape_mismatch",
            )
        if not np.isin(labels, (0, 1)).all():
            raise ValidationError(f"{self.event}: etiquetas no binarias.", code="shape_mismatch")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.int8))

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())

    @property
    def n_negative(self) -> int:
        return int(self.labels.size - self.labels.sum())

    @classmethod
    def pool(cls, parts: list["ScoredFrames"], event: str = "") -> "ScoredFrames":
        if not parts:
            return cls(np.zeros(0), np.zeros(0, dtype=np.int8), event)
        return cls(
            np.concatenate([p.scores for p in parts]),
            np.concatenate([p.labels for p in parts]),
            event or parts[0].event,
        )


def _threshold_groups(sf: ScoredFrames) -> tuple[np.ndarray, np.ndarray]:
    """TP y FP acumulados al final de cada grupo de scores empatados (umbral descendente)."""
    order = np.argsort(-sf.scores, kind="mergesort")
    scores, labels = sf.scores[order], sf.labels[order]
    tp = np.cumsum(labels)
    fp = np.cumsum(1 - labels)
    # último índice de cada corrida de scores iguales
    ends = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True])
    return tp[ends].astype(np.float64), fp[ends].astype(np.float64)


def average_precision(sf: ScoredFrames) -> float:
    """AP = Σ_k (R_k − R_{k−1}) · P_k sobre umbrales descendentes, empates agrupados."""
    if sf.n_positive == 0:
        raise ValidationError(f"{sf.event}: AP indefinido sin positivos.", code="undefined_metric")
    tp, fp = _threshold_groups(sf)
    precision = tp / (tp + fp)
    recall = tp / sf.n_positive
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def _require_both_classes(sf: ScoredFrames, metric: str) -> None:
    if sf.n_positive == 0 or sf.n_negative == 0:
        raise ValidationError(f"{sf.event}: {metric} indefinido con una sola clase.", code="undefined_metric")


def roc_auc(sf: ScoredFrames) -> float:
    """Mann-Whitney con rangos promedio (empates cuentan ½)."""
    _require_both_classes(sf, "AUC")
    ranks = rankdata(sf.scores, method="average")
    n_pos, n_neg = sf.n_positive, sf.n_negative
    rank_sum = float(ranks[sf.labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_points(sf: ScoredFrames) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) incluyendo (0, 0) y terminando en (1, 1)."""
    _require_both_classes(sf, "ROC")
    tp, fp = _threshold_groups(sf)
    fpr = np.r_[0.0, fp / sf.n_negative]
    tpr = np.r_[0.0, tp / sf.n_positive]
    return fpr, tpr


def eer(sf: ScoredFrames) -> float:
    """Punto FPR = FNR sobre la ROC por tramos, interpolando linealmente."""
    fpr, tpr = roc_points(sf)
    fnr = 1.0 - tpr
    gap = fpr - fnr  # crece de -1 a 1
    k = int(np.flatnonzero(gap >= 0.0)[0])
    if gap[k] == 0.0 or k == 0:
        return float(fpr[k])
    t = -gap[k - 1] / (gap[k] - gap[k - 1])
    return float(fpr[k - 1] + t * (fpr[k] - fpr[k - 1]))


def osd_precision_recall(predicted, labels) -> tuple[float | None, float | None]:
    """Precision/recall por frame; None cuando el denominador es cero."""
    pred = np.asarray(predicted).astype(bool).ravel()
    ref = np.asarray(labels).astype(bool).ravel()
    if pred.shape != ref.shape:
        raise ValidationError(f"{pred.shape[0]} predicciones vs {ref.shape[0]} etiquetas.", code="shape_mismatch")
    tp = int(np.sum(pred & ref))
    fp = int(np.sum(pred & ~ref))
    fn = int(np.sum(~pred & ref))
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    return precision, recall


def binarize(posteriors, threshold: float = 0.5, median_window: int = 11) -> np.ndarray:
    """Umbral y luego filtro de mediana de ancho impar por fila (uint8)."""
    if median_window < 1 or median_window % 2 == 0:
        raise ValidationError(
            f"median_window debe ser impar y >= 1, se recibió {median_window}.",
            code="even_window",
        )
    values = np.asarray(posteriors, dtype=np.float64)
    binary = (values > threshold).astype(np.uint8)
    if median_window == 1:
        return binary
    size = (1, median_window) if binary.ndim == 2 else median_window
    return ndimage.median_filter(binary, size=size, mode="nearest").astype(np.uint8)


def binarize_segments(
    posteriors,
    threshold: float = 0.5,
    median_window: int = 11,
    frame_rate: int = FRAME_RATE,
) -> list[tuple[float, float]]:
    return LabelService.frames_to_segments(binarize(posteriors, threshold, median_window), frame_rate)


def estimate_speaker_count(posteriors: PosteriorSet) -> np.ndarray:
    """Argmax por frame sobre (non-speech, single, overlap) -> 0, 1, 2."""
    rows = np.stack([posteriors.row(desc) for desc in COUNTER_DESCRIPTORS])
    return rows.argmax(axis=0).astype(np.int64)


def threshold_metrics(sf: ScoredFrames) -> dict[str, float]:
    """AP, AUC y EER; los indefinidos se omiten del dict."""
    out: dict[str, float] = {}
    if sf.n_positive:
        out["ap"] = average_precision(sf)
    if sf.n_positive and sf.n_negative:
        out["auc"] = roc_auc(sf)
        out["eer"] = eer(sf)
    return out
