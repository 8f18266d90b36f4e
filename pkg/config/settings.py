"""
Django settings for the anomaly detection project.

The project has no web surface: Django provides the management commands,
the Run table that records every pipeline invocation, and the test runner.
"""

from pathlib import Path
from decouple import config


# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Nothing is signed; Django still requires a key
SECRET_KEY = config('SECRET_KEY', default='insecure-local-key')

DEBUG = config('DEBUG', default=False, cast=bool)

ALLOWED_HOSTS = []

# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'detector',
]

MIDDLEWARE = []


# Database

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': config('AVFM_DATABASE', default=str(BASE_DIR / 'db.sqlite3')),
    }
}


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Logging goes to stderr; stdout is reserved for machine-parseable command output

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'stderr': {
            'class': 'logging.StreamHandler',
            'stream': 'ext://sys.stderr',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'detector': {
            'handlers': ['stderr'],
            'level': config('AVFM_LOG_LEVEL', default='INFO'),
            'propagate': False,
        },
    },
}


# Pipeline defaults (command-line flags and --config files override these)

AVFM_SEED = config('AVFM_SEED', default=0, cast=int)
AVFM_WORKERS = config('AVFM_WORKERS', default=1, cast=int)
AVFM_OUTPUT_ROOT = Path(config('AVFM_OUTPUT_ROOT', default=str(BASE_DIR / 'runs')))

TEST_RUNNER = 'detector.test_runner.AnomalyTestRunner'
AVFM_RUN_SLOW_TESTS = config('AVFM_RUN_SLOW_TESTS', default=False, cast=bool)
