from django.core.management.base import CommandError

from quantum_jumps.controllers.experiment_controller import AnalysisTask, run_analysis
from quantum_jumps.helper.analysis import ErrorMethod, Polarity
from quantum_jumps.management.commands._experiment_command import EXIT_NOT_CONVERGED, ExperimentCommand


class Command(ExperimentCommand):
    help = 'Detect jumps in traces, estimate dark dwells, or fit a line to a scan'

    def add_experiment_arguments(self, parser):
        parser.add_argument('files', nargs='+', help='Trace CSVs (jumps, dwell) or one scan CSV (fit, fit-convolved)')
        parser.add_argument('--task', choices=AnalysisTask.values, required=True)
        parser.add_argument('--method', choices=ErrorMethod.values, default=ErrorMethod.POISSON_SQRT.value,
                            help='Error rule for the jump rate of several traces (default: poisson-sqrt)')
        parser.add_argument('--polarity', choices=Polarity.values, default=Polarity.PEAK.value,
                            help='Fit a peak or a dip (default: peak)')

    def run(self, config, **options):
        outcome, path = run_analysis(config, options['files'], options['task'], options['out'],
                                     method=options['method'], polarity=options['polarity'])
        self.write_report(outcome.report)
        if not outcome.converged:
            self.stdout.write(self.style.WARNING(f'Fit did not converge; report written to {path}'))
            raise CommandError('Fit did not converge', returncode=EXIT_NOT_CONVERGED)
        self.stdout.write(self.style.SUCCESS(f'Wrote {path}'))
