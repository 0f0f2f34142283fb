from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable

from django.core.exceptions import ValidationError

from evaluation.services.protocol_service import EvalConfig
from frontend.services.feature_service import FrontendConfig
from ptsd.network import ModelConfig
from training.services.schedule import TrainConfig

SECTIONS = {
    "frontend": FrontendConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(section: str, key: str, current: Any, value: Any) -> Any:
    where = f"{section}.{key}"
    try:
        if isinstance(current, bool):
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in _TRUE:
                return True
            if text in _FALSE:
                return False
            raise ValueError("se esperaba booleano")
        if isinstance(current, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError("se esperaba entero")
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, tuple):
            items = value if isinstance(value, (list, tuple)) else str(value).split(",")
            return tuple(float(v) for v in items if str(v).strip())
        return str(value)
    except (TypeError, ValueError) as ex:
        raise ValidationError(f"{where}: valor inválido {value!r} ({ex}).", code="invalid_config")


def _apply(section_obj, section: str, updates: dict[str, Any]):
    known = {f.name for f in fields(section_obj)}
    changes = {}
    for key, value in updates.items():
        if key not in known:
            raise ValidationError(f"Clave desconocida: {section}.{key}", code="unknown_key")
        changes[key] = _coerce(section, key, getattr(section_obj, key), value)
    return replace(section_obj, **changes)


@dataclass(frozen=True)
class RunConfig:
    """
    Config de una corrida: defaults -> archivo JSON -> overrides `--set`.
    Se guarda tal cual junto a cada salida.
    """
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def __post_init__(self):
        if self.frontend.d_model != self.model.d_model:
            raise ValidationError(
                f"frontend.d_model={self.frontend.d_model} != model.d_model={self.model.d_model}",
                code="invalid_config",
            )

    def as_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {name: asdict(getattr(self, name)) for name in SECTIONS}
        out["eval"]["enrollment_lengths"] = list(self.eval.enrollment_lengths)
        out["seed"] = self.seed
        return out

    def config_hash(self) -> str:
        payload = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.as_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, data: dict[str, Any], base: "RunConfig | None" = None) -> "RunConfig":
        base = base or cls()
        unknown = sorted(set(data) - set(SECTIONS) - {"seed"})
        if unknown:
            raise ValidationError(f"Secciones desconocidas: {', '.join(unknown)}", code="unknown_key")

        sections = {name: getattr(base, name) for name in SECTIONS}
        for name, updates in data.items():
            if name == "seed":
                continue
            if not isinstance(updates, dict):
                raise ValidationError(f"La sección {name} debe ser un objeto.", code="invalid_config")
            sections[name] = _apply(sections[name], name, updates)

        model_updates = data.get("model", {})
        frontend_updates = data.get("frontend", {})
        # d_model lo fija la sección model salvo que frontend lo diga explícitamente
        if "d_model" in model_updates and "d_model" not in frontend_updates:
            sections["frontend"] = replace(sections["frontend"], d_model=sections["model"].d_model)

        seed = _coerce("run", "seed", base.seed, data["seed"]) if "seed" in data else base.seed
        return cls(seed=seed, **sections)

    @classmethod
    def from_sources(
        cls,
        config_path: str | Path | None = None,
        overrides: Iterable[str] = (),
        seed: int | None = None,
    ) -> "RunConfig":
        config = cls()
        if config_path:
            path = Path(config_path)
            try:
                data = json.loads(path.read_text(encoding="utf-8"))
            except OSError as ex:
                raise ValidationError(f"No se pudo leer {path}: {ex}", code="missing_file")
            except json.JSONDecodeError as ex:
                raise ValidationError(f"{path}: JSON inválido ({ex}).", code="invalid_config")
            if not isinstance(data, dict):
                raise ValidationError(f"{path}: se esperaba un objeto JSON.", code="invalid_config")
            config = cls.from_dict(data, config)

        nested: dict[str, Any] = {}
        for item in overrides:
            key, sep, value = item.partition("=")
            section, dot, name = key.strip().partition(".")
            if not sep:
                raise ValidationError(f"Override sin '=': {item!r}", code="invalid_config")
            if section == "seed" and not dot:
                nested["seed"] = value
                continue
            if not dot or not name:
                raise ValidationError(f"Override debe ser section.key=value: {item!r}", code="invalid_config")
            nested.setdefault(section, {})[name] = value
        if nested:
            config = cls.from_dict(nested, config)

        if seed is not None:
            config = replace(config, seed=int(seed))
        return config
