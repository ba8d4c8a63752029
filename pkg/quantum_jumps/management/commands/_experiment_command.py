import logging
from typing import Any, Dict, Optional

from django.core.management.base import BaseCommand, CommandError

from quantum_jumps.exceptions import ConfigValidationError, QuantumJumpError, TraceFormatError
from quantum_jumps.experiment_config import ExperimentConfig

logger = logging.getLogger(__name__)

EXIT_IO = 1
EXIT_VALIDATION = 2
EXIT_NOT_CONVERGED = 3


class ExperimentCommand(BaseCommand):
    '''
    Shared surface of the experiment commands: `--config`, `--out`, repeatable
    `--set section.key=value` overrides and the `--parallel/--serial` switch.
    Subclasses implement `run(config, **options)`; errors raised there leave
    the command with exit code 1 (I/O and parse failures) or 2 (invalid
    config or arguments).
    '''

    def add_arguments(self, parser):
        parser.add_argument('--config', help='Experiment config file (INI). Defaults apply to missing keys.')
        parser.add_argument('--out', help='Output directory (default: SPDC_JUMP_LAB_OUTPUT_ROOT)')
        parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='SECTION.KEY=VALUE',
                            help='Override one config value, e.g. --set rng.master_seed=7. Repeatable.')
        dispatch_mode = parser.add_mutually_exclusive_group()
        dispatch_mode.add_argument('--parallel', dest='parallel', action='store_true', default=True,
                                   help='Dispatch scan points and trials as a Celery group (default)')
        dispatch_mode.add_argument('--serial', dest='parallel', action='store_false',
                                   help='Run scan points and trials one after the other in this process')
        self.add_experiment_arguments(parser)

    def add_experiment_arguments(self, parser):
        return

    def handle(self, *args: Any, **options: Any) -> Optional[str]:
        try:
            config = ExperimentConfig.load(options['config'], options['overrides'])
            self.run(config, **{key: value for key, value in options.items() if key != 'config'})
        except (OSError, TraceFormatError) as exc:
            raise CommandError(str(exc), returncode=EXIT_IO) from exc
        except ConfigValidationError as exc:
            raise CommandError(f'Invalid configuration: {exc}', returncode=EXIT_VALIDATION) from exc
        except QuantumJumpError as exc:
            raise CommandError(str(exc), returncode=EXIT_VALIDATION) from exc
        return None

    def run(self, config: ExperimentConfig, **options: Any) -> None:
        raise NotImplementedError('Experiment commands must implement run()')

    def write_report(self, report: Dict[str, str]) -> None:
        for key, value in report.items():
            self.stdout.write(f'{key}={value}')
