"""
Django settings for the spdc_jump_lab project.

Only infrastructure lives here: logging, Celery dispatch and the default
output directory. Physical parameters come from the experiment config
(see quantum_jumps/experiment_config.py and configs/default.ini).
"""
import os
from pathlib import Path

# Fall back for local environments where the variables are not exported

if os.environ.get('SPDC_JUMP_LAB_OUTPUT_ROOT') is None:
    from dotenv import load_dotenv
    load_dotenv('.env')

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.environ.get('SECRET_KEY', 'spdc-jump-lab-local')

DEBUG = bool(int(os.environ.get('DEBUG', 0)))

ALLOWED_HOSTS = []

INSTALLED_APPS = [
    'quantum_jumps.apps.QuantumJumpsConfig',
]

# No models; the commands only read and write files
DATABASES = {}

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# OUTPUT
SPDC_JUMP_LAB_OUTPUT_ROOT = os.environ.get('SPDC_JUMP_LAB_OUTPUT_ROOT', str(BASE_DIR / 'runs'))

# LOGGING
LOG_LEVEL = os.environ.get('LOG_LEVEL', 'INFO').upper()

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'quantum_jumps': {
            'handlers': ['console'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
        'celery': {
            'handlers': ['console'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
    },
}

# CELERY
# Without a broker, task groups run eagerly in the calling process
CELERY_BROKER_URL = os.environ.get('CELERY_BROKER_URL')
CELERY_RESULT_BACKEND = os.environ.get('CELERY_RESULT_BACKEND', 'rpc://' if CELERY_BROKER_URL else None)
CELERY_TASK_ALWAYS_EAGER = not CELERY_BROKER_URL
CELERY_TASK_EAGER_PROPAGATES = True
CELERY_TASK_SERIALIZER = 'json'
CELERY_RESULT_SERIALIZER = 'json'
CELERY_ACCEPT_CONTENT = ['json']
