from django.apps import AppConfig


class PtsdConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'ptsd'
