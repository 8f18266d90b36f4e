"""
Fail runs left behind by a crashed or killed pipeline process.

A run stays ``running`` (or ``pending`` when the process died before the
service picked it up) forever once its process is gone. The last recorded
step is kept in ``error_message``.
"""
from django.core.management.base import BaseCommand
from django.utils import timezone

from detector.models import Run


def stuck_message(run: Run, hours: int) -> str:
    last_step = run.current_step or 'nothing recorded'
    return f'{run.get_kind_display()} run abandoned after {hours}+ hours in {run.status}; last step: {last_step}'


class Command(BaseCommand):
    help = 'Fail pending/running runs whose process is gone (older than --hours)'

    def add_arguments(self, parser):
        parser.add_argument('--hours', type=int, default=2, help='Age after which a run counts as stuck (default: 2)')
        parser.add_argument(
            '--kind',
            choices=[kind for kind, _ in Run.KIND_CHOICES],
            default=None,
            help='Only consider runs of this kind',
        )
        parser.add_argument('--dry-run', action='store_true', help='List stuck runs without changing them')

    def handle(self, *args, **options):
        hours = options['hours']
        cutoff = timezone.now() - timezone.timedelta(hours=hours)
        stuck = Run.objects.filter(status__in=('pending', 'running'), started_at__lt=cutoff)
        if options['kind']:
            stuck = stuck.filter(kind=options['kind'])

        runs = list(stuck.order_by('started_at'))
        if not runs:
            self.stdout.write(self.style.SUCCESS('No stuck runs found.'))
            return

        for run in runs:
            message = stuck_message(run, hours)
            if options['dry_run']:
                self.stdout.write(f'Run {run.id} ({run.kind}, output {run.output_dir or "-"}): {message}')
                continue
            run.status = 'failed'
            run.error_message = message
            run.completed_at = timezone.now()
            run.save(update_fields=['status', 'error_message', 'completed_at'])
            run.add_log(f'Marked as failed by fix_stuck_runs (older than {hours}h)')
            self.stdout.write(self.style.WARNING(f'Run {run.id} ({run.kind}): {message}'))

        verb = 'would be marked' if options['dry_run'] else 'marked'
        self.stdout.write(self.style.SUCCESS(f'{len(runs)} stuck run(s) {verb} as failed.'))
