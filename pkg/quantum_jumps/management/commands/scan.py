from quantum_jumps.controllers.experiment_controller import ScanMode, run_scan
from quantum_jumps.helper.interaction_model import ScanKind
from quantum_jumps.management.commands._experiment_command import ExperimentCommand
from quantum_jumps.renderers import fmt


class Command(ExperimentCommand):
    help = 'Compute a temperature, frequency, laser or filtered-arm scan, analytically or by Monte Carlo'

    def add_experiment_arguments(self, parser):
        parser.add_argument('--kind', choices=ScanKind.values, default=ScanKind.TEMPERATURE.value,
                            help='Scanned quantity (default: temperature)')
        parser.add_argument('--mode', choices=ScanMode.values, default=ScanMode.ANALYTIC.value,
                            help='analytic model or simulated measurement (default: analytic)')

    def run(self, config, **options):
        scan, path = run_scan(config, options['kind'], options['mode'], options['out'], options['parallel'])
        peak = int(scan.rates.argmax())
        unit = '/min' if scan.meta['unit'] == 'per_min' else '/s'
        self.stdout.write(f'{len(scan)} points, peak {fmt(scan.rates[peak])}{unit} at '
                          f'{fmt(scan.x_values[peak])} {scan.meta["x_unit"]}')
        self.stdout.write(self.style.SUCCESS(f'Wrote {path}'))
