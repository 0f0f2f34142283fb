# training/services/train_service.py
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import torch
from django.core.exceptions import ValidationError
from torch import nn

from evaluation.services.protocol_service import EvalConfig, ProtocolService
from ptsd.services.checkpoint_service import Checkpoint, CheckpointService
from ptsd.services.loss import masked_bce
from ptsd.systems import GENDER_SYSTEMS, build_system, system_config
from runs.models import RunRecord
from runs.services.run_config import RunConfig
from runs.services.run_log_service import RunLogService
from training.services.sampler_service import (
    Batch,
    ClipStore,
    collate,
    example_rng,
    sample_training_example,
)
from training.services.schedule import TrainConfig, lr_at_epoch

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
RUN_CONFIG_FILE = "run_config.json"
LAST_CHECKPOINT = "last.ckpt"
BEST_CHECKPOINT = "best.ckpt"


class TrainingAborted(RuntimeError):
    """Pérdida no finita: se corta el entrenamiento indicando clip(s) y paso."""

    def __init__(self, clip_ids: tuple[str, ...], step: int, loss: float):
        self.clip_ids = tuple(clip_ids)
        self.step = step
        self.loss = loss
        super().__init__(f"Pérdida no finita ({loss}) en step={step} clips={', '.join(self.clip_ids)}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    loss: float | None
    metrics: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"epoch": self.epoch, "lr": self.lr, "loss": self.loss, "metrics": self.metrics},
            sort_keys=True,
        )


@dataclass(frozen=True)
class TrainResult:
    out_dir: Path
    last_checkpoint: Path
    best_checkpoint: Path | None
    best_epoch: int | None
    best_ap: float | None
    history: tuple[EpochRecord, ...]
    step_losses: tuple[float, ...]


def checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:03d}.ckpt"


def _finite_or_none(value: float | None) -> float | None:
    if value is None or not math.isfinite(value):
        return None
    return float(value)


def _clean_metrics(value):
    # JSON sin NaN: lo indefinido queda como null
    if isinstance(value, dict):
        return {str(k): _clean_metrics(v) for k, v in value.items()}
    if isinstance(value, float):
        return _finite_or_none(value)
    return value


class TrainService:

    @staticmethod
    def sample_batch(store: ClipStore, cfg: TrainConfig, seed: int, epoch: int, step: int, system: str) -> Batch:
        def one(index: int):
            return sample_training_example(store, cfg, example_rng(seed, epoch, step, index), system)

        if cfg.workers > 0:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                examples = list(pool.map(one, range(cfg.batch_size)))
        else:
            examples = [one(i) for i in range(cfg.batch_size)]
        return collate(examples, system)

    @staticmethod
    def forward_batch(model: nn.Module, system: str, batch: Batch) -> torch.Tensor:
        if system in GENDER_SYSTEMS:
            return model(batch.raw, batch.frame_mask)
        return model(batch.raw, batch.prompts, batch.frame_mask)

    @staticmethod
    def run_step(
        model: nn.Module,
        optimizer: torch.optim.Optimizer,
        batch: Batch,
        cfg: TrainConfig,
        step: int,
    ) -> float:
        model.train()
        optimizer.zero_grad(set_to_none=True)
        probs = TrainService.forward_batch(model, cfg.system, batch)
        loss = masked_bce(probs, batch.targets, batch.frame_mask, batch.query_mask)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingAborted(batch.clip_ids, step, value)
        loss.backward()
        if cfg.grad_clip > 0:
            nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()
        return value

    @staticmethod
    def validate(model: nn.Module, system: str, store: ClipStore | None, cfg: EvalConfig, chunk: float) -> dict[str, Any]:
        """AP/AUC/EER por atributo sobre el manifest de validación + mean_ap."""
        if store is None or len(store) == 0:
            return {}
        result = ProtocolService.evaluate(model, system, store, replace(cfg, chunk=chunk))
        return {"attributes": result.attribute_metrics(), "mean_ap": result.mean_ap()}

    @staticmethod
    def build_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.Adam:
        return torch.optim.Adam(
            model.parameters(),
            lr=cfg.lr0,
            betas=(cfg.beta1, cfg.beta2),
            eps=cfg.eps,
        )

    @staticmethod
    def train_loop(
        train_store: ClipStore,
        val_store: ClipStore | None,
        run_config: RunConfig,
        out_dir: str | Path,
        *,
        resume: str | Path | None = None,
        init_from: str | Path | None = None,
        run: RunRecord | None = None,
    ) -> TrainResult:
        """
        Por step: muestreo -> forward -> BCE enmascarada -> Adam (con clip de gradiente).
        Por época: lr = lr0 * decay^epoch, validación, línea en metrics.jsonl,
        checkpoints epoch_XXX / last / best (best por mean AP de validación).

        - resume: restaura parámetros, optimizador y RNG de torch; sigue el conteo de épocas.
        - init_from: solo parámetros (fine-tuning), optimizador nuevo y época 0.
        """
        if resume and init_from:
            raise ValidationError("resume e init_from son excluyentes.", code="invalid_config")
        if len(train_store) == 0:
            raise ValidationError("El manifest de entrenamiento está vacío.", code="empty_manifest")

        cfg = run_config.train
        system = cfg.system
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        run_config.write(out_dir / RUN_CONFIG_FILE)
        config_hash = run_config.config_hash()
        expected = system_config(system, run_config.frontend, run_config.model)

        torch.manual_seed(run_config.seed)
        model = build_system(system, run_config.frontend, run_config.model)
        optimizer = TrainService.build_optimizer(model, cfg)

        start_epoch = 0
        global_step = 0
        best_ap: float | None = None
        best_epoch: int | None = None
        resumed: Checkpoint | None = None

        if resume:
            resumed = CheckpointService.read(resume)
            CheckpointService.check_config(resumed, expected)
            CheckpointService.load_parameters(model, resumed)
            CheckpointService.restore_optimizer(optimizer, resumed)
            CheckpointService.restore_torch_rng(resumed)
            start_epoch = int(resumed.meta.get("epoch", 0))
            global_step = int(resumed.meta.get("global_step", 0))
            best_ap = resumed.meta.get("best_ap")
            best_epoch = resumed.meta.get("best_epoch")
            if resumed.meta.get("seed") not in (None, run_config.seed):
                logger.warning("resume con seed=%s distinta a la del checkpoint (%s)", run_config.seed, resumed.meta["seed"])
            logger.info("resume desde %s epoch=%d step=%d", resume, start_epoch, global_step)
        elif init_from:
            source = CheckpointService.read(init_from)
            CheckpointService.check_config(source, expected)
            CheckpointService.load_parameters(model, source)
            logger.info("fine-tuning desde %s", init_from)

        history: list[EpochRecord] = []
        step_losses: list[float] = []
        metrics_path = out_dir / METRICS_FILE
        if resume is None:
            metrics_path.write_text("", encoding="utf-8")
        last_path = out_dir / LAST_CHECKPOINT
        best_path: Path | None = out_dir / BEST_CHECKPOINT if best_epoch is not None else None

        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at_epoch(cfg, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr

            epoch_losses = []
            for step in range(cfg.steps_per_epoch):
                batch = TrainService.sample_batch(train_store, cfg, run_config.seed, epoch, step, system)
                loss = TrainService.run_step(model, optimizer, batch, cfg, global_step)
                epoch_losses.append(loss)
                global_step += 1
                logger.debug("epoch=%d step=%d loss=%.6f", epoch, global_step, loss)
            step_losses.extend(epoch_losses)

            metrics = _clean_metrics(
                TrainService.validate(model, system, val_store, run_config.eval, cfg.eval_chunk)
            )
            record = EpochRecord(
                epoch=epoch + 1,
                lr=lr,
                loss=_finite_or_none(float(np.mean(epoch_losses))),
                metrics=metrics,
            )
            history.append(record)
            with metrics_path.open("a", encoding="utf-8") as fh:
                fh.write(record.to_json() + "\n")
            RunLogService.record_metric(run, epoch=record.epoch, lr=lr, loss=record.loss, metrics=metrics)

            mean_ap = metrics.get("mean_ap")
            improved = mean_ap is not None and (best_ap is None or mean_ap > best_ap)
            if improved or best_epoch is None:
                best_ap = mean_ap if improved else best_ap
                best_epoch = epoch + 1

            checkpoint = CheckpointService.to_checkpoint(
                model,
                expected,
                optimizer=optimizer,
                meta={
                    "epoch": epoch + 1,
                    "global_step": global_step,
                    "best_ap": best_ap,
                    "best_epoch": best_epoch,
                    "seed": run_config.seed,
                    "config_hash": config_hash,
                    "run_config": run_config.as_dict(),
                },
                include_rng=True,
            )
            CheckpointService.write(checkpoint, out_dir / checkpoint_name(epoch + 1))
            CheckpointService.write(checkpoint, last_path)
            if best_epoch == epoch + 1:
                best_path = CheckpointService.write(checkpoint, out_dir / BEST_CHECKPOINT)

            logger.info(
                "epoch=%d lr=%.3e loss=%s mean_ap=%s",
                epoch + 1, lr, record.loss, mean_ap,
            )

        if not history:
            # Sin épocas pendientes: se reescribe el estado recibido tal cual
            if resumed is not None:
                CheckpointService.write(resumed, last_path)
            else:
                CheckpointService.save(
                    last_path,
                    model,
                    expected,
                    optimizer=optimizer,
                    meta={"epoch": 0, "global_step": 0, "best_ap": None, "best_epoch": None,
                          "seed": run_config.seed, "config_hash": config_hash,
                          "run_config": run_config.as_dict()},
                    include_rng=True,
                )

        return TrainResult(
            out_dir=out_dir,
            last_checkpoint=last_path,
            best_checkpoint=best_path,
            best_epoch=best_epoch,
            best_ap=best_ap,
            history=tuple(history),
            step_losses=tuple(step_losses),
        )
