"""
Score one image
Usage: python manage.py infer part.png --checkpoint runs/model/model.avfm --map-out part_map.png
"""
from ._base import PipelineCommand


class Command(PipelineCommand):
    help = 'Write the anomaly map of one image and print its anomaly score'
    kind = 'infer'

    def add_command_arguments(self, parser):
        parser.add_argument('image', type=str, help='Input image')
        parser.add_argument('--checkpoint', type=str, default=None, help='Checkpoint file')
        parser.add_argument('--map-out', type=str, default=None, help='Where to write the 16-bit anomaly map')

    def overrides(self, options):
        return {'paths.checkpoint': options['checkpoint']}

    def run_kwargs(self, options):
        return {'image': options['image'], 'map_out': options['map_out']}

    def emit(self, result):
        self.stdout.write(f"{result['score']:.8f}")
