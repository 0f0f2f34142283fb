# Generated by Django 5.2.11 on 2026-10-17 10:12

import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name='RunRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
                ('command', models.CharField(max_length=40)),
                ('config_hash', models.CharField(blank=True, default='', max_length=64)),
                ('seed', models.BigIntegerField(blank=True, null=True)),
                ('status', models.CharField(choices=[('PENDING', 'Pending'), ('SUCCEEDED', 'Succeeded'), ('FAILED', 'Failed')], default='PENDING', max_length=16)),
                ('output_path', models.CharField(blank=True, default='', max_length=512)),
                ('config', models.JSONField(blank=True, default=dict)),
                ('metadata', models.JSONField(blank=True, default=dict)),
                ('error', models.TextField(blank=True, default='')),
            ],
            options={
                'ordering': ['-created_at'],
                'indexes': [models.Index(fields=['command', 'created_at'], name='runs_runrec_command_5b1e0a_idx'), models.Index(fields=['config_hash', 'created_at'], name='runs_runrec_config__9d2c41_idx'), models.Index(fields=['status', 'created_at'], name='runs_runrec_status_7f3a82_idx')],
            },
        ),
        migrations.CreateModel(
            name='MetricRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('epoch', models.PositiveIntegerField()),
                ('lr', models.FloatField()),
                ('loss', models.FloatField(blank=True, null=True)),
                ('metrics', models.JSONField(blank=True, default=dict)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='metrics', to='runs.runrecord')),
            ],
            options={
                'ordering': ['run', 'epoch'],
                'indexes': [models.Index(fields=['run', 'epoch'], name='runs_metric_run_id_2e6c1d_idx')],
                'constraints': [models.UniqueConstraint(fields=('run', 'epoch'), name='uq_metric_run_epoch')],
            },
        ),
    ]
