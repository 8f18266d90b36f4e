import django.utils.timezone
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='Run',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('kind', models.CharField(choices=[('gen', 'Dataset generation'), ('train', 'Training'), ('eval', 'Evaluation'), ('infer', 'Inference'), ('sweep', 'Sweep'), ('benchmark', 'Benchmark')], max_length=20)),
                ('status', models.CharField(choices=[('pending', 'Pending'), ('running', 'Running'), ('completed', 'Completed'), ('failed', 'Failed')], default='pending', max_length=20)),
                ('config', models.JSONField(default=dict)),
                ('result', models.JSONField(blank=True, default=dict)),
                ('output_dir', models.CharField(blank=True, max_length=1000)),
                ('current_step', models.TextField(blank=True)),
                ('logs', models.TextField(blank=True, default='')),
                ('error_message', models.TextField(blank=True)),
                ('started_at', models.DateTimeField(default=django.utils.timezone.now)),
                ('completed_at', models.DateTimeField(blank=True, null=True)),
                ('stop_requested', models.BooleanField(default=False)),
            ],
            options={
                'ordering': ['-started_at'],
                'indexes': [models.Index(fields=['kind', '-started_at'], name='detector_run_kind_started_idx')],
            },
        ),
    ]
