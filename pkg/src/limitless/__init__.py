"""Checkpoint-chained serverless execution on a desk-scale FaaS simulator."""

__version__ = "0.1.0"
