"""Synthetic continual benchmark, protocol runner and CLI."""

from .protocol import MetricsReport, emit, evaluate_task, run_continual
from .synthetic import AnomalySpec, RehearsalError, StreamConfig, TaskSpec, gen_stream
