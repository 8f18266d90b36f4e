"""
Ask a running pipeline command to stop at its next checkpoint
"""
from django.core.management.base import BaseCommand, CommandError

from detector.models import Run


class Command(BaseCommand):
    help = (
        'Request that a pending or running run stops. The running process checks the flag '
        'between generation chunks, every 25 training iterations and between sweep/benchmark points.'
    )

    def add_arguments(self, parser):
        parser.add_argument('run_id', type=int, help='Id of the run to stop')

    def handle(self, *args, **options):
        try:
            run = Run.objects.get(id=options['run_id'])
        except Run.DoesNotExist:
            raise CommandError(f"Run {options['run_id']} does not exist")

        if run.status not in ('pending', 'running'):
            self.stdout.write(self.style.WARNING(f'Run {run.id} is already {run.status}; nothing to stop.'))
            return

        run.stop_requested = True
        run.save(update_fields=['stop_requested'])
        run.add_log('Stop requested')
        self.stdout.write(self.style.SUCCESS(f'Stop requested for run {run.id} ({run.kind}).'))
