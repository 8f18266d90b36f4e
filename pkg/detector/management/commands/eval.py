"""
Evaluate a checkpoint on a dataset
Usage: python manage.py eval --checkpoint runs/model/model.avfm --dataset data/eval --out runs/eval
"""
import json

from ._base import PipelineCommand


class Command(PipelineCommand):
    help = 'Image- and pixel-level AUROC / F1-max; writes report.json, report.txt and roc_points.csv'
    kind = 'eval'

    def add_command_arguments(self, parser):
        parser.add_argument('--checkpoint', type=str, default=None, help='Checkpoint file')
        parser.add_argument('--dataset', type=str, default=None, help='Dataset directory to evaluate on')
        parser.add_argument(
            '--save-maps', action='store_const', const=True, default=None, dest='save_maps',
            help='Write every anomaly map as a 16-bit PNG',
        )
        parser.add_argument('--smoothing', type=float, default=None, help='Gaussian sigma applied to maps (default: off)')

    def overrides(self, options):
        return {
            'paths.checkpoint': options['checkpoint'],
            'paths.eval_dataset': options['dataset'],
            'eval.save_maps': options['save_maps'],
            'eval.smoothing_sigma': options['smoothing'],
        }

    def emit(self, result):
        self.stdout.write(json.dumps(result, sort_keys=True))
