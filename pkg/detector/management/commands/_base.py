"""
Shared flags and error handling for the pipeline commands
"""
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError
from django.db.utils import OperationalError

from detector.engine.errors import (
    CheckpointError,
    ConfigurationError,
    DetectorError,
    GenerationError,
    LeakageError,
    TrainingDivergedError,
    UndefinedMetricError,
    VocabularyError,
)
from detector.runconfig import load_run_config
from detector.services import RunService, start_run

EXIT_CONFIGURATION = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_UNDEFINED_METRIC = 5

RUN_TRACKING_NOTE = (
    "Every invocation is recorded as a Run row; on a fresh checkout run "
    "`python manage.py migrate` once before the first command. "
    "Exit codes: 2 configuration (including generation giving up), 3 I/O, "
    "4 diverged training, 5 undefined metric."
)


def exit_code_for(error: Exception) -> int:
    if isinstance(error, (ConfigurationError, GenerationError, VocabularyError, LeakageError)):
        return EXIT_CONFIGURATION
    if isinstance(error, (CheckpointError, OSError)):
        return EXIT_IO
    if isinstance(error, TrainingDivergedError):
        return EXIT_DIVERGED
    if isinstance(error, UndefinedMetricError):
        return EXIT_UNDEFINED_METRIC
    return 1


class PipelineCommand(BaseCommand):
    """Base for gen/train/eval/infer/sweep/benchmark.

    Subclasses set ``kind``, declare their own flags in
    ``add_command_arguments`` and map them to dotted config keys in
    ``overrides``.
    """

    kind = ""

    def create_parser(self, prog_name, subcommand, **kwargs):
        kwargs.setdefault('epilog', RUN_TRACKING_NOTE)
        return super().create_parser(prog_name, subcommand, **kwargs)

    def add_arguments(self, parser):
        parser.add_argument('--config', type=str, default=None, help='JSON run configuration file')
        parser.add_argument('--seed', type=int, default=None, help='Master seed (default: AVFM_SEED)')
        parser.add_argument('--out', type=str, default=None, help='Output directory')
        parser.add_argument('--workers', type=int, default=None, help='Worker threads (default: AVFM_WORKERS)')
        parser.add_argument(
            '--print-config',
            action='store_true',
            help='Print the fully resolved configuration and exit',
        )
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def overrides(self, options) -> dict:
        return {}

    def run_kwargs(self, options) -> dict:
        return {}

    def emit(self, result: dict):
        raise NotImplementedError

    def handle(self, *args, **options):
        try:
            rc = load_run_config(
                options['config'],
                overrides={
                    'seed': options['seed'],
                    'out': options['out'],
                    'workers': options['workers'],
                    **self.overrides(options),
                },
                defaults={'seed': settings.AVFM_SEED, 'workers': settings.AVFM_WORKERS},
            )
        except DetectorError as e:
            raise CommandError(str(e), returncode=exit_code_for(e))

        if options['print_config']:
            self.stdout.write(rc.to_json())
            return

        output_dir = rc.out or Path(settings.AVFM_OUTPUT_ROOT) / self.kind
        try:
            run, result = start_run(self.kind, rc, output_dir, **self.run_kwargs(options))
        except RunService.RunStoppedException as e:
            raise CommandError(str(e))
        except OperationalError as e:
            raise CommandError(f"Run tracking database is not ready (run `python manage.py migrate`): {e}")
        except (DetectorError, OSError) as e:
            raise CommandError(f"{type(e).__name__}: {e}", returncode=exit_code_for(e))

        self.stderr.write(self.style.SUCCESS(f"Run {run.id} ({self.kind}) completed; outputs in {output_dir}"))
        self.emit(result)
