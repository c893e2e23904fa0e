"""
Django settings for the ConceptSeg project.

The project has no web surface: Django supplies the management-command CLI, the
settings layer and the validation exception types. Everything run-specific lives
in the TOML run configuration (see segApp/helpers/cs_config.py); the environment
only selects the settings flavour and the output root.
"""

from pathlib import Path
from decouple import config

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent.parent

SECRET_KEY = config('DJANGO_SECRET_KEY', default='conceptseg-development-only-key')

DEBUG = config('DEBUG', default=False, cast=bool)

ENV = config('ENV', default='development')

ALLOWED_HOSTS = ['127.0.0.1', 'localhost']

# Root directory for run artifacts; relative output_dir values resolve under it.
CONCEPTSEG_OUTPUT_ROOT = Path(config('CONCEPTSEG_OUTPUT_ROOT', default=str(BASE_DIR / 'runs')))

INSTALLED_APPS = [
    'segApp',
]

# No models are defined; the default entry only satisfies Django's checks.
DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': ':memory:',
    }
}

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'standard': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'standard',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': 'DEBUG' if DEBUG else 'INFO',
    },
    'loggers': {
        # PNG chunk tracing floods stderr at DEBUG
        'PIL': {
            'handlers': ['console'],
            'level': 'WARNING',
            'propagate': False,
        },
        'urllib3': {
            'handlers': ['console'],
            'level': 'WARNING',
            'propagate': False,
        },
        'segApp.helpers.cs_training': {
            'handlers': ['console'],
            'level': 'INFO',
            'propagate': False,
        },
    },
}

# Internationalization
LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True

# Default primary key field type
DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'
