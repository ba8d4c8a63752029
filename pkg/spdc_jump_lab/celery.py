import os

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'spdc_jump_lab.settings')

from celery import Celery

app = Celery('spdc_jump_lab')

# Read every CELERY_-prefixed key from the Django settings.
app.config_from_object('django.conf:settings', namespace='CELERY')

# Load task modules from all registered Django apps.
app.autodiscover_tasks()
