"""
Django settings del proyecto PTSD (target speech diarization).

Solo se usa a través de manage.py (comandos simulate/train/infer/score/benchmark),
no hay superficie web. Todo lo ajustable se lee de variables de entorno (.env).
"""

from pathlib import Path
import os
from dotenv import load_dotenv

BASE_DIR = Path(__file__).resolve().parent.parent
load_dotenv(BASE_DIR / ".env")


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.getenv("DJANGO_SECRET_KEY", "django-insecure-ptsd-desk-scale-key")

DEBUG = os.getenv("DJANGO_DEBUG", "0") == "1"

ALLOWED_HOSTS = []


# Database: SQLite por defecto, PostgreSQL si DB_ENGINE=postgresql
DB_ENGINE = (os.getenv("DB_ENGINE") or "sqlite3").strip()

if DB_ENGINE == "postgresql":
    DATABASES = {
        "default": {
            "ENGINE": "django.db.backends.postgresql",
            "NAME": os.getenv("DB_NAME"),
            "USER": os.getenv("DB_USER"),
            "PASSWORD": os.getenv("DB_PASSWORD"),
            "HOST": os.getenv("DB_HOST"),
            "PORT": os.getenv("DB_PORT"),
        }
    }
else:
    DATABASES = {
        "default": {
            "ENGINE": "django.db.backends.sqlite3",
            "NAME": os.getenv("DB_NAME") or str(BASE_DIR / "ptsd_runs.sqlite3"),
        }
    }


INSTALLED_APPS = [
    "django.contrib.contenttypes",
    "labels",
    "simulation",
    "frontend",
    "ptsd",
    "training",
    "evaluation",
    "baselines",
    "runs",
]


# Internationalization
LANGUAGE_CODE = "en-us"

TIME_ZONE = "UTC"

USE_I18N = False

USE_TZ = True

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"


# -------------------------
# Audio / frame grid
# -------------------------
PTSD_SAMPLE_RATE = int(os.getenv("PTSD_SAMPLE_RATE") or "16000")
PTSD_FRAME_RATE = int(os.getenv("PTSD_FRAME_RATE") or "25")

if PTSD_FRAME_RATE != 25:
    # Labels, prompts y posteriors comparten la rejilla de 0.04 s
    raise ValueError(f"PTSD_FRAME_RATE debe ser 25, se recibió {PTSD_FRAME_RATE}.")


# -------------------------
# Paths / runtime
# -------------------------
PTSD_DATA_DIR = Path(os.getenv("PTSD_DATA_DIR") or (BASE_DIR / "data"))
PTSD_RUNS_DIR = Path(os.getenv("PTSD_RUNS_DIR") or (BASE_DIR / "runs_out"))
PTSD_FEATURE_CACHE_DIR = os.getenv("PTSD_FEATURE_CACHE_DIR") or ""

PTSD_NUM_WORKERS = int(os.getenv("PTSD_NUM_WORKERS") or "0")


# -------------------------
# Logging
# -------------------------
PTSD_LOG_LEVEL = (os.getenv("PTSD_LOG_LEVEL") or "INFO").upper()

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "kv": {
            "format": "ts=%(asctime)s level=%(levelname)s logger=%(name)s msg=%(message)s",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "kv",
        },
    },
    "loggers": {
        app: {"handlers": ["console"], "level": PTSD_LOG_LEVEL, "propagate": False}
        for app in (
            "labels",
            "simulation",
            "frontend",
            "ptsd",
            "training",
            "evaluation",
            "baselines",
            "runs",
        )
    },
}
