# Development-specific settings

from .settings_base import *

# Dev runs print per-step training progress
LOGGING['loggers']['segApp.helpers.cs_training']['level'] = 'DEBUG' if DEBUG else 'INFO'
