from quantum_jumps.controllers.experiment_controller import run_predict
from quantum_jumps.management.commands._experiment_command import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Print the factor-chain jump-rate estimate and write it with the filtered-arm spectrum'

    def run(self, config, **options):
        report, paths = run_predict(config, options['out'])
        self.write_report(report)
        for path in paths:
            self.stdout.write(self.style.SUCCESS(f'Wrote {path}'))
