from django.apps import AppConfig


class QuantumJumpsConfig(AppConfig):
    name = 'quantum_jumps'
    verbose_name = 'Single-ion quantum jumps driven by SPDC photons'
