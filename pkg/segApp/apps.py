from django.apps import AppConfig


class SegappConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'segApp'
    verbose_name = 'Concept-first open-vocabulary segmentation'
