"""
Generate a synthetic triplet dataset
Usage: python manage.py gen --n 512 --seed 7 --out data/train
"""
import json

from ._base import PipelineCommand


class Command(PipelineCommand):
    help = 'Generate normal/anomalous/mask triplets with feature-distance filtering'
    kind = 'gen'

    def add_command_arguments(self, parser):
        parser.add_argument('--n', type=int, default=None, help='Number of accepted samples (default: 512)')
        parser.add_argument('--split', choices=['train', 'eval'], default=None, help='Object split to draw from')
        parser.add_argument('--threshold', type=float, default=None, help='Filtering threshold T (default: 0.3)')
        parser.add_argument('--forced-fail', type=float, default=None, help='Probability of a defect-free "anomalous" image')
        parser.add_argument(
            '--no-filtering', action='store_const', const=False, default=None, dest='filtering',
            help='Accept every attempt (D and M are still computed)',
        )
        parser.add_argument(
            '--no-foreground', action='store_const', const=False, default=None, dest='foreground',
            help='Place defects anywhere in the image',
        )
        parser.add_argument('--extractor', choices=['backbone', 'raw'], default=None, help='Features used by the filter')
        parser.add_argument('--object-tags', type=int, default=None, help='Use only this many train object tags')

    def overrides(self, options):
        return {
            'datagen.n': options['n'],
            'datagen.split': options['split'],
            'datagen.threshold': options['threshold'],
            'datagen.forced_fail': options['forced_fail'],
            'datagen.filtering': options['filtering'],
            'datagen.foreground': options['foreground'],
            'datagen.extractor': options['extractor'],
            'datagen.n_object_tags': options['object_tags'],
        }

    def emit(self, result):
        self.stdout.write(json.dumps(result, sort_keys=True))
