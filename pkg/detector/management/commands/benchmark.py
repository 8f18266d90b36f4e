"""
Toy zero-shot benchmark over several seeds
Usage: python manage.py benchmark --seeds 0,1,2 --ablations
"""
import json

from django.core.management.base import CommandError

from ._base import EXIT_CONFIGURATION, PipelineCommand


class Command(PipelineCommand):
    help = 'Generate train/held-out splits, score the untrained model, train, evaluate; writes benchmark.json'
    kind = 'benchmark'

    def add_command_arguments(self, parser):
        parser.add_argument('--seeds', type=str, default=None, help='Comma-separated seeds (default: 0,1,2)')
        parser.add_argument(
            '--ablations', action='store_const', const=True, default=None,
            help='Also train without filtering and without foreground selection',
        )

    def overrides(self, options):
        seeds = None
        if options['seeds']:
            try:
                seeds = [int(s) for s in options['seeds'].split(',') if s.strip()]
            except ValueError:
                raise CommandError(f"Could not parse --seeds '{options['seeds']}'", returncode=EXIT_CONFIGURATION)
        return {'benchmark.seeds': seeds, 'benchmark.ablations': options['ablations']}

    def emit(self, result):
        self.stdout.write(json.dumps(result['mean'], sort_keys=True))
