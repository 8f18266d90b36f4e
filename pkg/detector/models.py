from django.db import models
from django.utils import timezone


class Run(models.Model):
    """Tracks one pipeline command (generation, training, evaluation, ...)"""
    KIND_CHOICES = [
        ('gen', 'Dataset generation'),
        ('train', 'Training'),
        ('eval', 'Evaluation'),
        ('infer', 'Inference'),
        ('sweep', 'Sweep'),
        ('benchmark', 'Benchmark'),
    ]
    STATUS_CHOICES = [
        ('pending', 'Pending'),
        ('running', 'Running'),
        ('completed', 'Completed'),
        ('failed', 'Failed'),
    ]

    kind = models.CharField(max_length=20, choices=KIND_CHOICES)
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default='pending')
    config = models.JSONField(default=dict)
    result = models.JSONField(default=dict, blank=True)
    output_dir = models.CharField(max_length=1000, blank=True)
    current_step = models.TextField(blank=True)
    logs = models.TextField(blank=True, default='')
    error_message = models.TextField(blank=True)
    started_at = models.DateTimeField(default=timezone.now)
    completed_at = models.DateTimeField(null=True, blank=True)
    stop_requested = models.BooleanField(default=False)

    class Meta:
        ordering = ['-started_at']
        indexes = [
            models.Index(fields=['kind', '-started_at'], name='detector_run_kind_started_idx'),
        ]

    def __str__(self):
        return f"Run {self.id}: {self.kind} ({self.status})"

    def add_log(self, message):
        """Add a log entry with timestamp"""
        timestamp = timezone.now().strftime("%H:%M:%S")
        self.logs += f"[{timestamp}] {message}\n"
        self.current_step = message
        self.save(update_fields=['logs', 'current_step'])
