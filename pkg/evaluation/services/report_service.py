# evaluation/services/report_service.py
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from evaluation.services.protocol_service import EvalConfig, EvaluationResult
from labels.types import Attribute

logger = logging.getLogger(__name__)

THRESHOLD_METRICS = ("ap", "auc", "eer")
METRIC_CHOICES = ("ap", "auc", "eer", "der", "osd", "count")


@dataclass(frozen=True)
class ReportRecord:
    dataset: str
    system: str
    attribute: str
    metric: str
    value: float | None
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class ReportService:
    """Registros por (dataset, sistema, atributo, métrica) en JSON lines."""

    @staticmethod
    def build_records(
        result: EvaluationResult,
        cfg: EvalConfig,
        *,
        dataset: str,
        config_hash: str = "",
        system_label: str | None = None,
        metrics: Sequence[str] = METRIC_CHOICES,
        extra: dict | None = None,
    ) -> list[ReportRecord]:
        system = system_label or result.system
        extra = dict(extra or {})
        records: list[ReportRecord] = []

        def add(attribute: str, metric: str, value, **more):
            records.append(ReportRecord(dataset, system, attribute, metric, value, config_hash, {**extra, **more}))

        pooled = result.attribute_metrics()
        per_clip = result.per_clip_metrics() if cfg.per_clip else {}
        for attribute in result.attributes():
            for metric in THRESHOLD_METRICS:
                if metric in metrics:
                    add(attribute, metric, pooled.get(attribute, {}).get(metric))
                    if cfg.per_clip:
                        add(attribute, f"{metric}_per_clip", per_clip.get(attribute, {}).get(metric))

        if "der" in metrics:
            if Attribute.TIMESTAMP.value in result.attributes():
                der = result.der(cfg)
                for name, value in (der or {"der": None}).items():
                    add(Attribute.TIMESTAMP.value, name, value, collar=cfg.collar, score_overlap=cfg.score_overlap)
            if Attribute.GENDER.value in result.attributes():
                der = result.gender_der(cfg)
                add(Attribute.GENDER.value, "der", (der or {}).get("der"), collar=cfg.collar, score_overlap=cfg.score_overlap)

        if "osd" in metrics:
            pr = result.overlap_precision_recall(cfg)
            if pr is not None:
                add(Attribute.COUNTER.value, "overlap_precision", pr[0], threshold=cfg.threshold)
                add(Attribute.COUNTER.value, "overlap_recall", pr[1], threshold=cfg.threshold)

        if "count" in metrics:
            accuracy = result.speaker_count_accuracy()
            if accuracy is not None:
                add(Attribute.COUNTER.value, "count_accuracy", accuracy)

        return records

    @staticmethod
    def write_report(path: str | Path, records: Iterable[ReportRecord]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [r.to_json() for r in records]
        path.write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
        logger.info("reporte escrito: %s (%d registros)", path, len(lines))
        return path

    @staticmethod
    def read_report(path: str | Path) -> list[ReportRecord]:
        records = []
        for raw in Path(path).read_text(encoding="utf-8").splitlines():
            if raw.strip():
                records.append(ReportRecord(**json.loads(raw)))
        return records

    @staticmethod
    def format_table(records: Sequence[ReportRecord]) -> str:
        """Tabla de texto: una fila por (sistema, atributo), columnas por métrica."""
        rows: dict[tuple[str, str, str], dict[str, float | None]] = {}
        columns: list[str] = []
        for r in records:
            tag = ",".join(f"{k}={v}" for k, v in sorted(r.extra.items()) if k == "enrollment_seconds")
            rows.setdefault((r.system, r.attribute, tag), {})[r.metric] = r.value
            if r.metric not in columns:
                columns.append(r.metric)

        header = f"{'system':<18}{'attr':<6}" + "".join(f"{c:>18}" for c in columns)
        lines = [header]
        for (system, attribute, tag), values in rows.items():
            label = f"{system}[{tag}]" if tag else system
            cells = []
            for c in columns:
                v = values.get(c)
                cells.append(f"{'-' if v is None else f'{v:.4f}':>18}")
            lines.append(f"{label:<18}{attribute:<6}" + "".join(cells))
        return "\n".join(lines)
