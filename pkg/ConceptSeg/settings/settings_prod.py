# Production-specific settings (batch hosts running long training/eval jobs)

import sentry_sdk

from .settings_base import *

DEBUG = False

SENTRY_DSN = config('SENTRY_DSN', default='')
if SENTRY_DSN:
    sentry_sdk.init(dsn=SENTRY_DSN, environment=ENV)

# Keep batch logs terse: warnings from the model stack, info from the pipeline only
LOGGING['root']['level'] = 'WARNING'
LOGGING['loggers']['segApp.helpers.cs_pipeline'] = {
    'handlers': ['console'],
    'level': 'INFO',
    'propagate': False,
}
