from quantum_jumps.controllers.experiment_controller import run_simulation
from quantum_jumps.management.commands._experiment_command import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Simulate photon-count traces of the ion at the peak SPDC pump rate'

    def add_experiment_arguments(self, parser):
        parser.add_argument('--duration', type=float, help='Trace length in seconds (default: telegraph.duration_s)')
        parser.add_argument('--seed', type=int, help='Master seed (default: rng.master_seed)')
        trials = parser.add_mutually_exclusive_group()
        trials.add_argument('--trials', type=int, help='Simulate K independent trials, trace_0000.csv ...')
        trials.add_argument('--trial', type=int, help='Re-run trial k of a batch on its own')

    def run(self, config, **options):
        summaries = run_simulation(config, options['out'], duration=options['duration'], seed=options['seed'],
                                   trials=options['trials'], trial=options['trial'], parallel=options['parallel'])
        for summary in summaries:
            self.stdout.write(f'{summary["path"]}: {summary["n_bins"]} bins, {summary["true_cycles"]} jump cycles')
        self.stdout.write(self.style.SUCCESS(f'Wrote {len(summaries)} trace(s)'))
