"""
Metric-versus-knob sweeps
Usage: python manage.py sweep --knob threshold --values 0.1,0.2,0.3
"""
from django.core.management.base import CommandError

from ._base import EXIT_CONFIGURATION, PipelineCommand

INTEGER_KNOBS = ('rank', 'n_images', 'n_object_tags')


class Command(PipelineCommand):
    help = 'Rerun the affected pipeline stages for every value of one knob and write sweep_<knob>.csv'
    kind = 'sweep'

    def add_command_arguments(self, parser):
        parser.add_argument('--knob', type=str, default=None, help='threshold, rank, n_images or n_object_tags')
        parser.add_argument('--values', type=str, default=None, help='Comma-separated grid (default: per-knob grid)')

    def overrides(self, options):
        values = None
        if options['values']:
            knob = options['knob'] or ''
            cast = int if knob in INTEGER_KNOBS else float
            try:
                values = [cast(v) for v in options['values'].split(',') if v.strip()]
            except ValueError:
                raise CommandError(f"Could not parse --values '{options['values']}'", returncode=EXIT_CONFIGURATION)
        return {'sweep.knob': options['knob'], 'sweep.values': values}

    def emit(self, result):
        self.stdout.write(result['csv'])
