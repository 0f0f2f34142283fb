# ptsd/services/checkpoint_service.py
from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch
from django.core.exceptions import ValidationError
from torch import nn

from ptsd.systems import system_from_config

logger = logging.getLogger(__name__)

MAGIC = b"PTSDCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")  # magic, versión, largo de cabecera

PARAM_PREFIX = "param."
OPTIM_PREFIX = "optim.state."
TORCH_RNG_BLOCK = "rng.torch"


@dataclass
class Checkpoint:
    """
    Contenedor binario versionado:
    MAGIC | u32 versión | u64 largo | cabecera JSON (claves ordenadas) | bloques crudos.
    La cabecera lleva la config del sistema, la tabla de bloques y metadatos.
    """
    config: dict[str, Any]
    meta: dict[str, Any] = field(default_factory=dict)
    blocks: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def parameters(self) -> dict[str, np.ndarray]:
        return {k[len(PARAM_PREFIX):]: v for k, v in self.blocks.items() if k.startswith(PARAM_PREFIX)}

    @property
    def system(self) -> str:
        return str(self.config.get("system", ""))


def flatten_config(config: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in config.items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(flatten_config(value, f"{name}."))
        else:
            flat[name] = value
    return flat


def diff_configs(found: Mapping[str, Any], expected: Mapping[str, Any]) -> list[str]:
    a, b = flatten_config(found), flatten_config(expected)
    lines = []
    for key in sorted(set(a) | set(b)):
        if a.get(key, "<ausente>") != b.get(key, "<ausente>"):
            lines.append(f"{key}: checkpoint={a.get(key, '<ausente>')!r} expected={b.get(key, '<ausente>')!r}")
    return lines


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().contiguous().numpy()


def _json_safe(value):
    if isinstance(value, tuple):
        return [_json_safe(v) for v in value]
    if isinstance(value, list):
        return [_json_safe(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, torch.Tensor):
        return value.item()
    return value


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("ascii")


class CheckpointService:

    @staticmethod
    def to_checkpoint(
        model: nn.Module,
        config: Mapping[str, Any],
        optimizer: torch.optim.Optimizer | None = None,
        meta: Mapping[str, Any] | None = None,
        include_rng: bool = False,
    ) -> Checkpoint:
        blocks: dict[str, np.ndarray] = {}
        for name, tensor in model.state_dict().items():
            blocks[f"{PARAM_PREFIX}{name}"] = _to_numpy(tensor)

        meta = dict(meta or {})
        if optimizer is not None:
            state = optimizer.state_dict()
            for idx, slots in state["state"].items():
                for slot, value in slots.items():
                    if isinstance(value, torch.Tensor):
                        blocks[f"{OPTIM_PREFIX}{idx}.{slot}"] = _to_numpy(value)
            meta["optimizer_param_groups"] = _json_safe(state["param_groups"])
        if include_rng:
            blocks[TORCH_RNG_BLOCK] = _to_numpy(torch.get_rng_state())

        return Checkpoint(config=dict(config), meta=_json_safe(meta), blocks=blocks)

    @staticmethod
    def write(checkpoint: Checkpoint, path: str | Path) -> Path:
        path = Path(path)
        table = []
        offset = 0
        payloads = []
        for name in sorted(checkpoint.blocks):
            array = np.ascontiguousarray(checkpoint.blocks[name])
            data = array.tobytes(order="C")
            table.append({
                "name": name,
                "dtype": array.dtype.str,
                "shape": list(array.shape),
                "offset": offset,
                "nbytes": len(data),
            })
            payloads.append(data)
            offset += len(data)

        header = _canonical_json({"config": checkpoint.config, "meta": checkpoint.meta, "blocks": table})
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(suffix=".tmp", dir=str(path.parent))
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
                fh.write(header)
                for data in payloads:
                    fh.write(data)
            os.replace(tmp, path)
        except Exception:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        logger.info("checkpoint escrito: %s (%d bloques)", path, len(table))
        return path

    @staticmethod
    def save(
        path: str | Path,
        model: nn.Module,
        config: Mapping[str, Any],
        optimizer: torch.optim.Optimizer | None = None,
        meta: Mapping[str, Any] | None = None,
        include_rng: bool = False,
    ) -> Path:
        checkpoint = CheckpointService.to_checkpoint(model, config, optimizer, meta, include_rng)
        return CheckpointService.write(checkpoint, path)

    @staticmethod
    def read(path: str | Path) -> Checkpoint:
        path = Path(path)
        try:
            raw = path.read_bytes()
        except OSError as ex:
            raise ValidationError(f"No se pudo leer el checkpoint {path}: {ex}", code="missing_file")

        if len(raw) < _PREFIX.size:
            raise ValidationError(f"{path}: archivo truncado.", code="bad_checkpoint")
        magic, version, header_len = _PREFIX.unpack_from(raw, 0)
        if magic != MAGIC:
            raise ValidationError(f"{path}: no es un checkpoint PTSD.", code="bad_checkpoint")
        if version != FORMAT_VERSION:
            raise ValidationError(
                f"{path}: versión de formato {version}, se esperaba {FORMAT_VERSION}.",
                code="bad_checkpoint",
            )

        start = _PREFIX.size
        header = json.loads(raw[start:start + header_len].decode("ascii"))
        body = start + header_len
        blocks = {}
        for entry in header["blocks"]:
            a = body + entry["offset"]
            b = a + entry["nbytes"]
            if b > len(raw):
                raise ValidationError(f"{path}: bloque {entry['name']} truncado.", code="bad_checkpoint")
            array = np.frombuffer(raw[a:b], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
            blocks[entry["name"]] = array.copy()
        return Checkpoint(config=header["config"], meta=header["meta"], blocks=blocks)

    @staticmethod
    def check_config(checkpoint: Checkpoint, expected: Mapping[str, Any]) -> None:
        diff = diff_configs(checkpoint.config, expected)
        if diff:
            raise ValidationError(
                "La config del checkpoint no coincide:\n  " + "\n  ".join(diff),
                code="config_mismatch",
            )

    @staticmethod
    def load_parameters(model: nn.Module, checkpoint: Checkpoint) -> nn.Module:
        own = model.state_dict()
        params = checkpoint.parameters
        missing = sorted(set(own) - set(params))
        extra = sorted(set(params) - set(own))
        if missing or extra:
            raise ValidationError(
                f"Bloques de parámetros no coinciden (faltan={missing}, sobran={extra}).",
                code="config_mismatch",
            )
        state = {}
        for name, ref in own.items():
            array = params[name]
            if tuple(array.shape) != tuple(ref.shape):
                raise ValidationError(
                    f"{name}: forma {tuple(array.shape)} en checkpoint, se esperaba {tuple(ref.shape)}.",
                    code="config_mismatch",
                )
            state[name] = torch.from_numpy(array.copy()).to(dtype=ref.dtype)
        model.load_state_dict(state, strict=True)
        return model

    @staticmethod
    def load_model(path: str | Path, expected_config: Mapping[str, Any] | None = None) -> tuple[nn.Module, Checkpoint]:
        checkpoint = CheckpointService.read(path)
        if expected_config is not None:
            CheckpointService.check_config(checkpoint, expected_config)
        model = system_from_config(checkpoint.config)
        CheckpointService.load_parameters(model, checkpoint)
        logger.info("checkpoint cargado: %s system=%s", path, checkpoint.system)
        return model, checkpoint

    @staticmethod
    def restore_optimizer(optimizer: torch.optim.Optimizer, checkpoint: Checkpoint) -> None:
        groups = checkpoint.meta.get("optimizer_param_groups")
        if groups is None:
            raise ValidationError("El checkpoint no trae estado del optimizador.", code="bad_checkpoint")

        state: dict[int, dict[str, torch.Tensor]] = {}
        for name, array in checkpoint.blocks.items():
            if not name.startswith(OPTIM_PREFIX):
                continue
            idx, _, slot = name[len(OPTIM_PREFIX):].partition(".")
            state.setdefault(int(idx), {})[slot] = torch.from_numpy(array.copy())
        optimizer.load_state_dict({"state": state, "param_groups": groups})

    @staticmethod
    def restore_torch_rng(checkpoint: Checkpoint) -> None:
        if TORCH_RNG_BLOCK in checkpoint.blocks:
            torch.set_rng_state(torch.from_numpy(checkpoint.blocks[TORCH_RNG_BLOCK].copy()))
