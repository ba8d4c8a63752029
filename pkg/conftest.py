import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'spdc_jump_lab.settings')
django.setup()
