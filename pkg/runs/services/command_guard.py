from __future__ import annotations

import logging
from contextlib import contextmanager
from typing import Any, Iterator

from django.core.exceptions import ValidationError
from django.core.management.base import CommandError
from django.db import DatabaseError

from runs.models import RunRecord
from runs.services.run_log_service import RunLogService

logger = logging.getLogger(__name__)

EXIT_RUNTIME = 1
EXIT_VALIDATION = 2


def validation_message(ex: ValidationError) -> str:
    code = getattr(ex, "code", None)
    text = "; ".join(ex.messages)
    return f"[{code}] {text}" if code else text


@contextmanager
def guarded_run(
    command: str,
    *,
    config_hash: str = "",
    seed: int | None = None,
    config: dict[str, Any] | None = None,
    output_path: str = "",
    metadata: dict[str, Any] | None = None,
) -> Iterator[RunRecord | None]:
    """
    Abre un RunRecord, ejecuta el bloque y lo cierra con el resultado.
    ValidationError -> exit 2, cualquier otra falla -> exit 1.
    Sin tablas migradas el comando corre igual, sin bitácora.
    """
    try:
        run = RunLogService.start(
            command=command,
            config_hash=config_hash,
            seed=seed,
            config=config,
            output_path=output_path,
            metadata=metadata,
        )
    except DatabaseError as ex:
        logger.warning("bitácora de corridas no disponible (%s); ejecute migrate", ex)
        run = None

    try:
        yield run
    except ValidationError as ex:
        message = validation_message(ex)
        RunLogService.fail(run, message)
        raise CommandError(message, returncode=EXIT_VALIDATION) from ex
    except CommandError as ex:
        RunLogService.fail(run, str(ex))
        raise
    except Exception as ex:
        message = f"{type(ex).__name__}: {ex}"
        RunLogService.fail(run, message)
        raise CommandError(message, returncode=EXIT_RUNTIME) from ex
    else:
        RunLogService.finish(run)
