default_app_config = 'quantum_jumps.apps.QuantumJumpsConfig'
